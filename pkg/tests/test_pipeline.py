import numpy as np
import pytest
from helpers import look_at_view, random_graph

from nrmvs.config import RunConfig
from nrmvs.defgraph import deform_points
from nrmvs.errors import BootstrapError
from nrmvs.geometry import project
from nrmvs.patchmatch import DepthNormalMap
from nrmvs.pipeline import (
    FeatureTrack,
    associate,
    ingest_tracks,
    lift_keypoints,
    pairwise_from_tracks,
    processing_order,
    run,
    select_canonical_views,
    static_inlier_table,
    voxel_thin,
)
from nrmvs.syntheval import evaluate, ground_truth_graph, make_scene, render_all, synth_matches


def _pairs(*rows):
    return np.array(rows, dtype=float).reshape(-1, 4)


# tracks -----------------------------------------------------------------


def test_chain_forms_single_track():
    tracks = ingest_tracks({(0, 1): _pairs([1, 1, 2, 2]), (1, 2): _pairs([2, 2, 3, 3])})
    assert len(tracks) == 1
    assert tracks[0].images() == [0, 1, 2]
    assert np.allclose(tracks[0].observations[2], [3, 3])


def test_component_with_two_keypoints_in_one_image_is_rejected():
    pw = {
        (0, 1): _pairs([1, 1, 5, 5], [9, 9, 7, 7]),
        (1, 2): _pairs([5, 5, 4, 4]),
        (0, 2): _pairs([2, 2, 4, 4]),  # links a second keypoint of image 0
    }
    tracks = ingest_tracks(pw)
    assert [t.images() for t in tracks] == [[0, 1]]
    assert np.allclose(tracks[0].observations[0], [9, 9])


def test_empty_matches_give_no_tracks():
    assert ingest_tracks({}) == []


def test_pairwise_from_tracks_round_trip():
    pw = {(0, 1): _pairs([1, 1, 2, 2], [3, 3, 4, 4]), (1, 2): _pairs([2, 2, 5, 5])}
    back = pairwise_from_tracks(ingest_tracks(pw))
    assert sorted(back) == [(0, 1), (0, 2), (1, 2)]
    assert np.allclose(back[(0, 2)], [[1, 1, 5, 5]])


# canonical view selection -------------------------------------------------


def test_static_pair_has_full_inlier_ratio():
    # coincident centres make triangulation degenerate, so the static pair
    # gets a small baseline
    v, w = look_at_view([0.0, 0.0, -5.0]), look_at_view([0.5, 0.0, -5.0])
    X = np.random.default_rng(1).uniform(-1, 1, (30, 3))
    pairs = {(0, 1): np.hstack([[project(v, x) for x in X], [project(w, x) for x in X]])}
    assert static_inlier_table([v, w], pairs)[(0, 1)][0] == pytest.approx(1.0)
    assert select_canonical_views([v, w], pairs) == (0, 1)


def test_selection_needs_enough_matches():
    v, w = look_at_view([0.0, 0.0, -5.0]), look_at_view([0.5, 0.0, -5.0])
    with pytest.raises(BootstrapError):
        select_canonical_views([v, w], {(0, 1): np.zeros((5, 4))})


@pytest.mark.parametrize("seed", range(5))
def test_synthetic_undeformed_pair_is_selected(seed):
    scene = make_scene(6, seed=seed)
    views = [scene.camera(v) for v in range(6)]
    pw, _, _ = synth_matches(scene)
    assert select_canonical_views(views, ingest_tracks(pw)) == tuple(sorted(scene.canonical_pair))


def test_processing_order_is_deterministic():
    table = {(0, 1): (1.0, 9, 9), (0, 2): (0.2, 2, 10), (1, 2): (0.4, 4, 10), (0, 3): (0.6, 6, 10), (1, 3): (0.6, 6, 10)}
    assert processing_order([2, 3, 4], (0, 1), table) == [3, 2, 4]
    assert processing_order([4, 3, 2], (0, 1), table) == [3, 2, 4]


# lifting and association ------------------------------------------------


def _plane_map(view, depth):
    h, w = view.image.shape
    n = np.zeros((h, w, 3))
    n[...] = -view.R[2]
    return DepthNormalMap(np.full((h, w), depth), n, np.ones((h, w), dtype=bool))


def test_lift_canonical_view_is_plain_backprojection():
    v = look_at_view([0.0, 0.0, -5.0])
    tracks = [FeatureTrack(0, {0: np.array([40.0, 30.0])}), FeatureTrack(1, {0: np.array([100.25, 70.5])})]
    lifted = lift_keypoints(tracks, [0], [v], {0: _plane_map(v, 5.0)}, {0: None})
    for tr in tracks:
        u = tr.observations[0]
        expect = v.to_world(np.linalg.inv(v.K) @ np.array([u[0], u[1], 1.0]) * 5.0)
        assert np.allclose(lifted[tr.id], expect, atol=1e-12)


def test_lift_skips_tracks_without_depth():
    v = look_at_view([0.0, 0.0, -5.0])
    m = _plane_map(v, 5.0)
    m.valid[:, :80] = False
    tracks = [FeatureTrack(0, {0: np.array([40.0, 30.0])}), FeatureTrack(1, {0: np.array([120.0, 30.0])}), FeatureTrack(2, {1: np.array([5.0, 5.0])})]
    lifted = lift_keypoints(tracks, [0], [v], {0: m}, {})
    assert sorted(lifted) == [1]


def test_lift_from_two_views_of_rigid_scene_agrees():
    scene = make_scene(2, seed=4, static=True)
    views, depths = render_all(scene, levels=1)
    rng = np.random.default_rng(0)
    X = np.column_stack([rng.uniform(-1.5, 1.5, (20, 2)), np.zeros(20)])
    tracks = [FeatureTrack(i, {v: project(views[v], x) for v in (0, 1)}) for i, x in enumerate(X)]
    maps = {}
    for v in (0, 1):
        n = np.zeros(depths[v].shape + (3,))
        n[...] = [0.0, 0.0, 1.0] if (views[v].center[2] > 0) else [0.0, 0.0, -1.0]
        maps[v] = DepthNormalMap(depths[v], n, depths[v] > 0)
    one = [lift_keypoints(tracks, [v], views, maps, {}) for v in (0, 1)]
    for i in range(20):
        assert np.linalg.norm(one[0][i] - one[1][i]) < 1e-3
        assert np.linalg.norm(one[0][i] - X[i]) < 1e-3


def test_associate_with_exact_deformation_hits_true_point():
    scene = make_scene(3, seed=5)
    f = scene.view_frames[2]
    graph = ground_truth_graph(scene, f)
    view = scene.camera(2)
    rng = np.random.default_rng(1)
    a, b = rng.uniform(-1.5, 1.5, (2, 15))
    xc = scene.surface(0, a, b)[0]
    x_true = deform_points(xc, graph)
    tracks = [FeatureTrack(i, {2: project(view, x_true[i])}) for i in range(15)]
    m = associate({i: xc[i] for i in range(15)}, tracks, view, 2, graph)
    assert np.allclose(m.x_target, x_true, atol=1e-9)
    assert np.allclose(m.x_canonical, xc)


def test_associate_targets_lie_on_rays():
    v = look_at_view([0.0, 0.0, -5.0])
    rng = np.random.default_rng(2)
    graph = random_graph(rng, n_nodes=10)
    xc = rng.uniform(-1, 1, (12, 3))
    uv = rng.uniform(10, 110, (12, 2))
    tracks = [FeatureTrack(i, {0: uv[i]}) for i in range(12)]
    m = associate({i: xc[i] for i in range(12)}, tracks, v, 0, graph)
    for i in range(12):
        if v.to_camera(m.x_target[i])[2] > 1e-9:
            assert np.allclose(project(v, m.x_target[i]), uv[i], atol=1e-6)


def test_voxel_thin():
    pts = np.random.default_rng(0).random((5000, 3))
    keep = voxel_thin(pts, 500)
    assert len(keep) <= 500 and len(np.unique(keep)) == len(keep)
    assert np.array_equal(voxel_thin(pts[:100], 500), np.arange(100))


# end to end ---------------------------------------------------------------


def test_two_view_static_run_is_plain_stereo():
    scene = make_scene(2, seed=0, static=True)
    views, depths = render_all(scene)
    pw, _, _ = synth_matches(scene)
    res = run(views, ingest_tracks(pw), RunConfig(num_nodes=20, template_max_points=500))
    assert res.order == [] and sorted(res.maps) == [0, 1]
    for v in (0, 1):
        g = res.graph(v)
        assert np.abs(deform_points(g.g, g) - g.g).max() < 1e-3
        ev = evaluate(res.maps[v], depths[v])
        assert ev.mre < 1.0 and ev.completeness > 90.0
    assert len(res.canonical_cloud) > 0


@pytest.fixture(scope="module")
def small_run():
    scene = make_scene(3, seed=0)
    views, depths = render_all(scene)
    pw, _, _ = synth_matches(scene)
    cfg = RunConfig(num_nodes=30, template_max_points=800, assoc_iters_N=3)
    return scene, depths, run(views, ingest_tracks(pw), cfg)


def test_small_deforming_run(small_run):
    scene, depths, res = small_run
    assert res.canonical == tuple(sorted(scene.canonical_pair))
    assert len(res.order) == 1 and sorted(res.maps) == [0, 1, 2]
    # canonical views carry the identity, the other view a real deformation
    for v in res.canonical:
        assert res.graph(v).is_identity()
    assert not res.graph(res.order[0]).is_identity()
    for v in res.maps:
        assert evaluate(res.maps[v], depths[v]).mre <= 2.5


def test_final_pass_never_loses_valid_pixels(small_run):
    _, _, res = small_run
    for v in res.maps:
        assert res.maps[v].valid.sum() >= res.first_pass[v].valid.sum()
        assert res.report["views"][str(v)]["valid_final"] >= res.report["views"][str(v)]["valid_first"]


def test_association_reduces_ray_distance(small_run):
    _, _, res = small_run
    rounds = res.report["views"][str(res.order[0])]["rounds"]
    d = [r["median_ray_distance"] for r in rounds]
    assert d[1] < 0.5 * d[0]
    assert d[-1] < d[0]


def test_run_rejects_unbootstrappable_input():
    v, w = look_at_view([0.0, 0.0, -5.0]), look_at_view([0.5, 0.0, -5.0])
    with pytest.raises(BootstrapError):
        run([v, w], [], RunConfig())
