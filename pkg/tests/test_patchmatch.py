import numpy as np
import pytest
from helpers import look_at_view
from scipy import ndimage

from nrmvs.defgraph import deform_points
from nrmvs.errors import NoSourcesError
from nrmvs.geometry import project, unproject
from nrmvs.patchmatch import (
    DepthNormalMap,
    PatchMatchConfig,
    backproject,
    consistency_filter,
    depth_range_from_points,
    fuse_to_cloud,
    nr_patchmatch,
    raw_map,
)
from nrmvs.photometric import PatchSampler, ncc_many
from nrmvs.syntheval import _intersect, evaluate, ground_truth_graph, make_scene, render_all


def _range(depth):
    d = depth[depth > 0]
    return float(d.min() * 0.8), float(d.max() * 1.2)


def _others(i, n):
    return [j for j in range(n) if j != i]


@pytest.fixture(scope="module")
def static3():
    scene = make_scene(3, seed=2, static=True)
    views, depths = render_all(scene)
    maps = [
        nr_patchmatch(views[i], [views[j] for j in _others(i, 3)], PatchMatchConfig(depth_range=_range(depths[i]), seed=i))
        for i in range(3)
    ]
    return scene, views, depths, maps


@pytest.fixture(scope="module")
def deforming4():
    scene = make_scene(4, seed=1)
    views, depths = render_all(scene)
    graphs = [ground_truth_graph(scene, f) for f in scene.view_frames]
    return scene, views, depths, graphs


def test_config_validation():
    with pytest.raises(ValueError):
        PatchMatchConfig(iterations=0)
    with pytest.raises(ValueError):
        PatchMatchConfig(min_consistent_views=0)
    with pytest.raises(ValueError):
        PatchMatchConfig(depth_range=(2.0, 1.0))
    with pytest.raises(ValueError):
        PatchMatchConfig(depth_range=(0.0, 1.0))


def test_no_sources(static3):
    _, views, depths, _ = static3
    with pytest.raises(NoSourcesError):
        nr_patchmatch(views[0], [], PatchMatchConfig(depth_range=(1.0, 2.0)))


def test_depth_range_from_points():
    v = look_at_view([0.0, 0.0, -10.0])
    pts = np.array([[0.0, 0.0, -2.0], [0.0, 0.0, 2.0]])
    assert depth_range_from_points(v, pts, 0.2) == pytest.approx((8 * 0.8, 12 * 1.2))
    with pytest.raises(ValueError):
        depth_range_from_points(v, np.array([[0.0, 0.0, -20.0]]))


def test_static_scene_accurate_and_complete(static3):
    _, views, depths, maps = static3
    for i in range(3):
        sup = _others(i, 3)
        filt = consistency_filter(
            raw_map(maps[i]), views[i], [views[j] for j in sup], [raw_map(maps[j]) for j in sup],
            PatchMatchConfig(depth_range=_range(depths[i])),
        )
        ev = evaluate(filt, depths[i])
        assert ev.mre < 1.0
        assert ev.completeness > 95.0


def test_valid_pixels_have_unit_front_facing_normals(static3):
    _, views, _, maps = static3
    for v, m in zip(views, maps):
        n = m.normal[m.valid]
        assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6)
        ys, xs = np.nonzero(m.valid)
        rays = np.column_stack([xs, ys, np.ones_like(xs)]) @ np.linalg.inv(v.K).T @ v.R
        assert np.all((n * rays).sum(1) < 0)
        assert np.all(m.depth[m.valid] > 0)


def test_min_consistent_views_is_monotone(static3):
    _, views, depths, maps = static3
    sup = [1, 2]
    counts = []
    for k in (1, 2):
        f = consistency_filter(
            raw_map(maps[0]), views[0], [views[j] for j in sup], [raw_map(maps[j]) for j in sup],
            PatchMatchConfig(depth_range=_range(depths[0]), min_consistent_views=k),
        )
        counts.append(f.valid.sum())
    assert counts[0] >= counts[1]


def test_reproducible_with_fixed_seed(static3):
    _, views, depths, maps = static3
    again = nr_patchmatch(views[0], [views[1], views[2]], PatchMatchConfig(depth_range=_range(depths[0]), seed=0))
    assert np.array_equal(again.depth, maps[0].depth)
    assert np.array_equal(again.normal, maps[0].normal)
    assert np.array_equal(again.valid, maps[0].valid)


def test_refinement_never_increases_cost(static3):
    _, views, depths, maps = static3
    start = raw_map(maps[1])
    more = raw_map(
        nr_patchmatch(views[1], [views[0], views[2]], PatchMatchConfig(depth_range=_range(depths[1]), iterations=1, seed=9), initial=start)
    )
    live = start.valid & np.isfinite(start.cost)
    assert np.all(more.cost[live] <= start.cost[live])


def test_true_candidate_is_grid_minimum():
    """On windows entirely on the surface, the true plane beats a dense grid."""
    scene = make_scene(3, seed=2, static=True)
    views, depths = render_all(scene, levels=1)
    a, b, _, hit = _intersect(scene, 0, 1)
    interior = {s: ndimage.binary_erosion(_intersect(scene, 0, s)[3], np.ones((15, 15))) for s in range(3)}
    rr, cc = np.nonzero(interior[1])
    ok = []
    for r, c in zip(rr, cc):
        x = unproject(views[1], np.array([c, r], dtype=float), depths[1][r, c])
        good = True
        for s in (0, 2):
            u = np.round(project(views[s], x)).astype(int)
            good &= bool(interior[s][u[1], u[0]])
        ok.append(good)
    rr, cc = rr[ok], cc[ok]
    pick = np.random.default_rng(0).choice(len(rr), 100, replace=False)
    sampler = PatchSampler()
    th = np.deg2rad(np.linspace(0, 50, 6))
    ph = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    local = np.array([[0.0, 0.0, -1.0]] + [[np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), -np.cos(t)] for t in th[1:] for p in ph])
    normals = local @ views[1].R

    def cost(X, N):
        return np.mean([1.0 - ncc_many(views[1], views[s], X, N, X, N, sampler)[0] for s in (0, 2)], axis=0)

    for i in pick:
        r, c = rr[i], cc[i]
        px = np.array([c, r], dtype=float)
        x = unproject(views[1], px, depths[1][r, c])
        n = scene.normal(0, a[r, c], b[r, c])
        n = -n if n @ (x - views[1].center) > 0 else n
        true_cost = cost(x[None], n[None])[0]
        ds = depths[1][r, c] * np.linspace(0.95, 1.05, 101)
        X = np.array([unproject(views[1], px, d) for d in ds])
        grid = cost(np.repeat(X, len(normals), 0), np.tile(normals, (len(ds), 1)))
        assert true_cost <= grid.min() + 1e-3


def test_ground_truth_deformation_gives_accurate_depth(deforming4):
    scene, views, depths, graphs = deforming4
    for i in range(4):
        if scene.view_frames[i] in (0, 1):
            continue
        sup = _others(i, 4)
        m = nr_patchmatch(
            views[i], [views[j] for j in sup], PatchMatchConfig(depth_range=_range(depths[i])),
            graphs[i], [graphs[j] for j in sup],
        )
        assert evaluate(m, depths[i]).mre <= 2.5
        break


# fusion -----------------------------------------------------------------


def test_constant_depth_gives_planar_cloud():
    v = look_at_view([0.0, 0.0, -5.0], image=np.random.default_rng(0).random((120, 160)))
    shape = (120, 160)
    n = np.zeros(shape + (3,))
    n[..., 2] = -1.0
    m = DepthNormalMap(np.full(shape, 3.0), n, np.ones(shape, dtype=bool))
    (cloud,), canon = fuse_to_cloud([m], [v])
    assert len(cloud) == 120 * 160
    assert np.allclose(v.to_camera(cloud.points)[:, 2], 3.0)
    assert np.allclose(canon.points, cloud.points)
    assert np.allclose(cloud.colors, v.image.ravel())


def test_empty_mask_gives_empty_cloud():
    v = look_at_view([0.0, 0.0, -5.0])
    m = DepthNormalMap.empty((120, 160))
    (cloud,), canon = fuse_to_cloud([m], [v])
    assert len(cloud) == 0 and len(canon) == 0
    assert len(backproject(m, v)) == 0


def test_canonical_cloud_round_trip_reprojects(deforming4):
    scene, views, depths, graphs = deforming4
    i = next(j for j in range(4) if scene.view_frames[j] not in (0, 1))
    shape = depths[i].shape
    valid = depths[i] > 0
    m = DepthNormalMap(depths[i], np.tile([0.0, 0.0, -1.0], shape + (1,)), valid)
    (cloud,), canon = fuse_to_cloud([m], [views[i]], [graphs[i]])
    ys, xs = np.nonzero(valid)
    back = deform_points(canon.points, graphs[i])
    u = np.array([project(views[i], p) for p in back])
    err = np.linalg.norm(u - np.column_stack([xs, ys]), axis=1)
    assert np.mean(err < 0.5) >= 0.99
