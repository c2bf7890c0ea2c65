"""Sequential non-rigid reconstruction over a set of posed views.

Outline of :func:`run`:

1. pick the canonical pair (the pair whose matches best triangulate as a
   static scene) and reconstruct it with rigid two-view PatchMatch;
2. build the template cloud and the deformation graph on it;
3. for each remaining view, closest-to-canonical first: lift keypoints of
   processed views to the canonical frame, associate them with the view's
   keypoint rays, reject outliers and solve the deformation, repeating N
   times; then run non-rigid PatchMatch for the view;
4. recompute every depth map with all deformations known.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .defgraph import DeformationGraph, approx_inverse, deform_points, sample_nodes
from .errors import BootstrapError, NRMVSError
from .geometry import CameraView
from .optimize import EnergyWeights, SolveReport, SparseMatches, filter_sparse, solve_joint
from .patchmatch import (
    DepthNormalMap,
    PatchMatchConfig,
    PointCloud,
    consistency_filter,
    depth_range_from_points,
    fuse_to_cloud,
    nr_patchmatch,
    raw_map,
)
from .photometric import PatchSampler, Template

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# feature tracks
# --------------------------------------------------------------------------


@dataclass
class FeatureTrack:
    id: int
    observations: dict  # image index -> (2,) pixel

    def images(self) -> list[int]:
        return sorted(self.observations)


def ingest_tracks(pairwise: dict) -> list[FeatureTrack]:
    """Chain pairwise matches into tracks with union-find.

    Keypoints are identified by (image, exact pixel coordinates). A connected
    component holding two different keypoints of the same image is
    inconsistent and dropped entirely.

    Args:
        pairwise: ``{(a, b): (n, 4) array}`` as returned by
            :func:`nrmvs.io.load_matches`.
    """
    keys: dict = {}
    parent: list[int] = []

    def node(img, uv):
        key = (int(img), float(uv[0]), float(uv[1]))
        if key not in keys:
            keys[key] = len(parent)
            parent.append(len(parent))
        return keys[key]

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for (a, b), pairs in sorted(pairwise.items()):
        for row in np.asarray(pairs, dtype=np.float64).reshape(-1, 4):
            p, q = find(node(a, row[:2])), find(node(b, row[2:]))
            if p != q:
                parent[max(p, q)] = min(p, q)

    groups: dict = {}
    for key, i in keys.items():
        groups.setdefault(find(i), []).append(key)
    tracks = []
    for root in sorted(groups):
        members = groups[root]
        imgs = [m[0] for m in members]
        if len(set(imgs)) != len(imgs):
            continue
        obs = {m[0]: np.array([m[1], m[2]]) for m in members}
        tracks.append(FeatureTrack(len(tracks), obs))
    return tracks


def pairwise_from_tracks(tracks: list[FeatureTrack]) -> dict:
    """Pairwise matches implied by the tracks, ``{(a, b): (n, 4)}`` with a < b."""
    out: dict = {}
    for tr in tracks:
        imgs = tr.images()
        for x, a in enumerate(imgs):
            for b in imgs[x + 1:]:
                out.setdefault((a, b), []).append(np.concatenate([tr.observations[a], tr.observations[b]]))
    return {k: np.asarray(v) for k, v in sorted(out.items())}


# --------------------------------------------------------------------------
# canonical view selection
# --------------------------------------------------------------------------


def triangulate_pairs(view_a: CameraView, view_b: CameraView, ua: np.ndarray, ub: np.ndarray):
    """Batched two-view DLT triangulation.

    Returns:
        ``(points (n, 3), max reprojection error over both views (n,))``.
        Points that land behind a camera get an infinite error.
    """
    ua = np.asarray(ua, dtype=np.float64).reshape(-1, 2)
    ub = np.asarray(ub, dtype=np.float64).reshape(-1, 2)
    Pa = view_a.K @ np.hstack([view_a.R, view_a.t[:, None]])
    Pb = view_b.K @ np.hstack([view_b.R, view_b.t[:, None]])
    A = np.stack(
        [
            ua[:, :1] * Pa[2] - Pa[0],
            ua[:, 1:] * Pa[2] - Pa[1],
            ub[:, :1] * Pb[2] - Pb[0],
            ub[:, 1:] * Pb[2] - Pb[1],
        ],
        axis=1,
    )
    A /= np.linalg.norm(A, axis=2, keepdims=True)
    _, _, vt = np.linalg.svd(A)
    h = vt[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        X = h[:, :3] / h[:, 3:]
    err = np.zeros(len(X))
    for view, u in ((view_a, ua), (view_b, ub)):
        xc = view.to_camera(X)
        with np.errstate(divide="ignore", invalid="ignore"):
            proj = (xc @ view.K.T)[:, :2] / xc[:, 2:3]
        e = np.linalg.norm(proj - u, axis=1)
        e[~(xc[:, 2] > 0) | ~np.isfinite(e)] = np.inf
        err = np.maximum(err, e)
    return X, err


def static_inlier_table(views: list[CameraView], pairwise: dict, min_matches: int = 8, max_error: float = 1.0) -> dict:
    """``{(a, b): (ratio, inliers, total)}`` for pairs with enough matches."""
    table = {}
    for (a, b), pairs in sorted(pairwise.items()):
        pairs = np.asarray(pairs).reshape(-1, 4)
        if len(pairs) < min_matches:
            continue
        _, err = triangulate_pairs(views[a], views[b], pairs[:, :2], pairs[:, 2:])
        inl = int(np.sum(err < max_error))
        table[(a, b)] = (inl / len(pairs), inl, len(pairs))
    return table


def select_canonical_views(views: list[CameraView], tracks_or_pairs) -> tuple[int, int]:
    """Pair with the highest static-inlier ratio.

    Ties go to the larger inlier count, then to the lower index pair.

    Raises:
        BootstrapError: no pair has at least 8 matches.
    """
    pairwise = tracks_or_pairs if isinstance(tracks_or_pairs, dict) else pairwise_from_tracks(tracks_or_pairs)
    table = static_inlier_table(views, pairwise)
    if not table:
        raise BootstrapError("cannot bootstrap: no view pair with at least 8 matches")
    best = min(table, key=lambda p: (-table[p][0], -table[p][1], p))
    return best


def processing_order(pending: list[int], canonical: tuple[int, int], table: dict) -> list[int]:
    """Pending views by descending mean inlier ratio against the canonical pair."""

    def ratio(a, b):
        key = (min(a, b), max(a, b))
        return table[key][0] if key in table else 0.0

    score = {v: 0.5 * (ratio(v, canonical[0]) + ratio(v, canonical[1])) for v in pending}
    return sorted(pending, key=lambda v: (-score[v], v))


# --------------------------------------------------------------------------
# lifting and association
# --------------------------------------------------------------------------


def _plane_depth_at(view: CameraView, depth_map: DepthNormalMap, u: np.ndarray):
    """Depth of keypoints on the plane of their nearest valid pixel (NaN if none)."""
    h, w = depth_map.shape
    q = np.floor(u + 0.5).astype(np.int64)
    inside = (q[:, 0] >= 0) & (q[:, 1] >= 0) & (q[:, 0] < w) & (q[:, 1] < h)
    out = np.full(len(u), np.nan)
    if not np.any(inside):
        return out
    qi = q[inside]
    ok = depth_map.valid[qi[:, 1], qi[:, 0]]
    Kinv = np.linalg.inv(view.K)
    d = depth_map.depth[qi[:, 1], qi[:, 0]]
    n_cam = depth_map.normal[qi[:, 1], qi[:, 0]] @ view.R.T
    ray_q = np.column_stack([qi, np.ones(len(qi))]) @ Kinv.T
    ray_u = np.column_stack([u[inside], np.ones(len(qi))]) @ Kinv.T
    num = np.einsum("ij,ij->i", n_cam, ray_q) * d
    den = np.einsum("ij,ij->i", n_cam, ray_u)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(np.abs(den) > 1e-9, num / den, d)
    z = np.where(ok & (z > 0), z, np.nan)
    out[inside] = z
    return out


def lift_keypoints(
    tracks: list[FeatureTrack],
    processed: list[int],
    views: list[CameraView],
    maps: dict,
    deformations: dict,
) -> dict:
    """Canonical 3D position of each track seen with depth in a processed view.

    Each observation is back-projected with the depth of its pixel's plane
    and pulled to the canonical frame by the approximate inverse of that
    view's deformation; several estimates are averaged.

    Returns:
        ``{track id: (3,) point}``.
    """
    sums: dict = {}
    counts: dict = {}
    for v in processed:
        if v not in maps:
            continue
        obs = [(tr.id, tr.observations[v]) for tr in tracks if v in tr.observations]
        if not obs:
            continue
        ids = np.array([o[0] for o in obs])
        uv = np.array([o[1] for o in obs])
        z = _plane_depth_at(views[v], maps[v], uv)
        ok = np.isfinite(z)
        if not np.any(ok):
            continue
        rays = np.column_stack([uv[ok], np.ones(ok.sum())]) @ np.linalg.inv(views[v].K).T
        X = views[v].to_world(rays * z[ok, None])
        gr = deformations.get(v)
        if gr is not None and not gr.is_identity():
            X = approx_inverse(X, gr)
        for tid, x in zip(ids[ok], X):
            sums[tid] = sums.get(tid, 0.0) + x
            counts[tid] = counts.get(tid, 0) + 1
    return {tid: sums[tid] / counts[tid] for tid in sorted(sums)}


def associate(lifted: dict, tracks: list[FeatureTrack], view: CameraView, view_index: int, graph: DeformationGraph) -> SparseMatches:
    """Pair deformed canonical points with the closest point on their keypoint ray."""
    rows = [(tr.id, lifted[tr.id], tr.observations[view_index]) for tr in tracks if tr.id in lifted and view_index in tr.observations]
    if not rows:
        return SparseMatches.empty()
    ids = np.array([r[0] for r in rows])
    xc = np.array([r[1] for r in rows])
    uv = np.array([r[2] for r in rows])
    d = np.column_stack([uv, np.ones(len(uv))]) @ np.linalg.inv(view.K).T @ view.R
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    origin = np.broadcast_to(view.center, d.shape)
    xh = deform_points(xc, graph)
    s = np.maximum(np.einsum("ij,ij->i", xh - origin, d), 0.0)
    return SparseMatches(xc, origin + s[:, None] * d, ids)


def voxel_thin(points: np.ndarray, max_points: int) -> np.ndarray:
    """Indices of at most ``max_points`` points, one per occupied voxel.

    The voxel size grows by 20% until the count fits; in each voxel the
    lowest-index point is kept.
    """
    n = len(points)
    if n <= max_points:
        return np.arange(n)
    lo = points.min(0)
    size = max(float(np.ptp(points, axis=0).max()), 1e-12) / max_points
    while True:
        cells = np.floor((points - lo) / size).astype(np.int64)
        _, first = np.unique(cells, axis=0, return_index=True)
        if len(first) <= max_points:
            return np.sort(first)
        size *= 1.2


# --------------------------------------------------------------------------
# orchestration
# --------------------------------------------------------------------------


@dataclass
class PipelineState:
    views: list
    canonical: tuple = ()
    processed: list = field(default_factory=list)
    pending: list = field(default_factory=list)
    deformations: dict = field(default_factory=dict)
    maps: dict = field(default_factory=dict)
    template: Template | None = None
    base_graph: DeformationGraph | None = None
    failed: list = field(default_factory=list)
    report: dict = field(default_factory=dict)


@dataclass
class RunResult:
    """Everything :func:`run` produces.

    ``maps`` are the final filtered depth maps, ``raw_maps`` their
    unfiltered counterparts and ``first_pass`` the maps before the final
    recomputation.
    """

    canonical: tuple
    order: list
    deformations: dict
    maps: dict
    raw_maps: dict
    first_pass: dict
    template: Template
    canonical_cloud: PointCloud
    view_clouds: dict
    report: dict
    base_graph: DeformationGraph | None = None

    def graph(self, view: int) -> DeformationGraph:
        """Deformation of ``view``; canonical views get the identity."""
        gr = self.deformations.get(view)
        return self.base_graph.identity_like() if gr is None else gr


def _pm_config(cfg: RunConfig, depth_range, seed_offset: int, n_supports: int) -> PatchMatchConfig:
    return PatchMatchConfig(
        iterations=cfg.pm_iterations,
        halvings=cfg.pm_halvings,
        depth_range=depth_range,
        min_consistent_views=min(cfg.min_consistent_views, n_supports),
        min_ncc=cfg.min_ncc,
        geom_tol=cfg.geom_tol,
        seed=cfg.seed * 1000 + seed_offset,
        sampler=PatchSampler(cfg.window, cfg.sigma_color),
    )


def _nearest_supports(view_index: int, candidates: list[int], views: list[CameraView], limit: int) -> list[int]:
    c = views[view_index].center
    ranked = sorted(candidates, key=lambda q: (float(np.linalg.norm(views[q].center - c)), q))
    return sorted(ranked[:limit])


def _range_from_template(view: CameraView, template: Template, graph: DeformationGraph | None):
    pts = template.points if graph is None or graph.is_identity() else deform_points(template.points, graph)
    return depth_range_from_points(view, pts, 0.2)


def bootstrap(state: PipelineState, tracks: list[FeatureTrack], cfg: RunConfig, pairwise: dict) -> None:
    """Rigid two-view reconstruction of the canonical pair."""
    views = state.views
    i, j = state.canonical
    pairs = pairwise.get((i, j))
    X, err = triangulate_pairs(views[i], views[j], pairs[:, :2], pairs[:, 2:])
    X = X[err < 1.0]
    if len(X) == 0:
        raise BootstrapError("cannot bootstrap: no static inliers in the canonical pair")
    raw = {}
    for a, b in ((i, j), (j, i)):
        pm = _pm_config(cfg, depth_range_from_points(views[a], X, 0.2), a, 1)
        raw[a] = nr_patchmatch(views[a], [views[b]], pm)
    for a, b in ((i, j), (j, i)):
        pm = _pm_config(cfg, None, a, 1)
        state.maps[a] = consistency_filter(raw_map(raw[a]), views[a], [views[b]], [raw_map(raw[b])], pm)
        state.deformations[a] = None
    state.processed = [i, j]
    for a in (i, j):
        state.report.setdefault("views", {})[str(a)] = {"role": "canonical", "valid_first": int(state.maps[a].valid.sum())}


def build_template(state: PipelineState, cfg: RunConfig) -> None:
    i, j = state.canonical
    _, cloud = fuse_to_cloud([state.maps[i], state.maps[j]], [state.views[i], state.views[j]])
    if len(cloud) < cfg.k + 1:
        raise BootstrapError("cannot bootstrap: canonical reconstruction is empty")
    keep = voxel_thin(cloud.points, cfg.template_max_points)
    state.template = Template(cloud.points[keep], cloud.normals[keep])
    state.base_graph, _, _ = sample_nodes(state.template.points, cfg.num_nodes, cfg.k)


def solve_view(state: PipelineState, tracks: list[FeatureTrack], l: int, cfg: RunConfig) -> dict:
    """Deformation of view ``l``: N rounds of association, filtering and solving."""
    views = state.views
    i, j = state.canonical
    weights = EnergyWeights(cfg.w_sparse, cfg.w_dense, cfg.w_reg)
    sampler = PatchSampler(cfg.window, cfg.sigma_color)
    graph = state.base_graph.identity_like()
    info: dict = {"rounds": []}
    lifted = lift_keypoints(tracks, state.processed, views, state.maps, state.deformations) if cfg.w_sparse > 0 else {}
    info["lifted"] = len(lifted)
    # without sparse matches there is nothing to re-associate between rounds
    rounds = cfg.assoc_iters_N if cfg.w_sparse > 0 else 1
    for m in range(rounds):
        rnd: dict = {}
        matches = None
        if cfg.w_sparse > 0:
            matches = associate(lifted, tracks, views[l], l, graph)
            rnd["associated"] = len(matches)
            dist = np.linalg.norm(deform_points(matches.x_canonical, graph) - matches.x_target, axis=1)
            rnd["median_ray_distance"] = float(np.median(dist)) if len(dist) else float("nan")
            matches, _, frep = filter_sparse(graph, matches, cfg.d_max, cfg.tau, weights, cfg.lm_max_iters)
            rnd["retained"] = len(matches)
            rnd["sparse_cuts"] = frep.cut_sequence[0] if frep.cut_sequence else []
        graph, mask, jrep = solve_joint(
            graph, matches, state.template, [views[i], views[j]], views[l], weights,
            cfg.rho_max, cfg.tau, cfg.pyramid_levels, sampler, cfg.lm_max_iters,
        )
        rnd["masked_dense"] = int((~mask).sum())
        rnd["energy"] = jrep.final_energy
        info["rounds"].append(rnd)
    state.deformations[l] = graph
    return info


def run(views: list[CameraView], tracks: list[FeatureTrack], cfg: RunConfig | None = None) -> RunResult:
    """Reconstruct every view; see the module docstring for the stages.

    Raises:
        BootstrapError: the canonical pair cannot be selected or reconstructed.
    """
    cfg = cfg or RunConfig()
    cfg.validate()
    state = PipelineState(views)
    pairwise = pairwise_from_tracks(tracks)
    table = static_inlier_table(views, pairwise)
    if not table:
        raise BootstrapError("cannot bootstrap: no view pair with at least 8 matches")
    state.canonical = select_canonical_views(views, pairwise)
    state.report["canonical"] = list(state.canonical)
    state.report["inlier_ratios"] = {f"{a}-{b}": v[0] for (a, b), v in table.items()}
    logger.info("canonical pair %s", state.canonical)

    bootstrap(state, tracks, cfg, pairwise)
    build_template(state, cfg)
    state.report["template_points"] = len(state.template)
    state.report["graph_nodes"] = state.base_graph.num_nodes

    pending = [v for v in range(len(views)) if v not in state.canonical]
    order = processing_order(pending, state.canonical, table)
    state.report["order"] = order
    for l in order:
        vrep: dict = {"role": "pending"}
        try:
            vrep.update(solve_view(state, tracks, l, cfg))
            supports = _nearest_supports(l, state.processed, views, cfg.max_supports)
            pm = _pm_config(cfg, _range_from_template(views[l], state.template, state.deformations[l]), l, len(supports))
            state.maps[l] = nr_patchmatch(
                views[l], [views[q] for q in supports], pm,
                state.deformations[l], [state.deformations[q] for q in supports],
                [state.maps[q] for q in supports],
            )
            vrep["supports"] = supports
            vrep["valid_first"] = int(state.maps[l].valid.sum())
            state.processed.append(l)
        except NRMVSError as exc:
            warnings.warn(f"view {l} skipped: {exc}", RuntimeWarning, stacklevel=2)
            state.deformations.pop(l, None)
            state.failed.append(l)
            vrep["failed"] = str(exc)
        state.report.setdefault("views", {})[str(l)] = vrep
        logger.info("view %d done", l)

    first_pass = {v: state.maps[v] for v in state.processed}
    final, raw = final_pass(state, cfg)
    _, canonical_cloud = fuse_to_cloud(
        [final[v] for v in state.processed], [views[v] for v in state.processed],
        [state.deformations[v] for v in state.processed],
    )
    clouds, _ = fuse_to_cloud([final[v] for v in state.processed], [views[v] for v in state.processed])
    for v in state.processed:
        state.report["views"][str(v)]["valid_final"] = int(final[v].valid.sum())
    state.report["failed"] = state.failed
    return RunResult(
        state.canonical, order, dict(state.deformations), final, raw, first_pass, state.template,
        canonical_cloud, dict(zip(state.processed, clouds)), state.report, state.base_graph,
    )


def final_pass(state: PipelineState, cfg: RunConfig):
    """Recompute every processed view with all deformations known.

    Each view is matched against its nearest processed views and filtered
    against their recomputed maps. Pixels the recomputation loses keep their
    first-pass values.

    Returns:
        ``(filtered maps, raw maps)`` keyed by view index.
    """
    views = state.views
    raw = {}
    supports = {}
    for v in state.processed:
        sup = _nearest_supports(v, [q for q in state.processed if q != v], views, cfg.max_supports)
        supports[v] = sup
        pm = _pm_config(cfg, _range_from_template(views[v], state.template, state.deformations[v]), 500 + v, len(sup))
        raw[v] = nr_patchmatch(
            views[v], [views[q] for q in sup], pm, state.deformations[v], [state.deformations[q] for q in sup],
        )
    final = {}
    for v in state.processed:
        sup = supports[v]
        pm = _pm_config(cfg, None, v, len(sup))
        filt = consistency_filter(
            raw_map(raw[v]), views[v], [views[q] for q in sup], [raw_map(raw[q]) for q in sup], pm,
            state.deformations[v], [state.deformations[q] for q in sup],
        )
        first = state.maps[v]
        keep_first = first.valid & ~filt.valid
        merged = DepthNormalMap(
            np.where(keep_first, first.depth, filt.depth),
            np.where(keep_first[..., None], first.normal, filt.normal),
            filt.valid | first.valid,
            filt.cost,
            filt.support_ncc,
            raw_map(raw[v]),
        )
        final[v] = merged
    return final, {v: raw_map(raw[v]) for v in state.processed}
