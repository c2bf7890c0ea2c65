"""Non-rigid PatchMatch depth/normal estimation and cloud fusion.

A hypothesis at a target pixel is a plane (z-depth, world normal). To score
it against a support view, the point and normal are pulled to the canonical
frame with the target's approximate inverse deformation, pushed into the
support's state with the support's deformation, and compared with the
bilateral NCC. With identity deformations this is ordinary plane-sweep
PatchMatch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _pmkernels as pk
from .defgraph import DeformationGraph, approx_inverse, approx_inverse_normals
from .errors import IncompatibleGraphsError, NoSourcesError
from .geometry import CameraView
from .photometric import PatchSampler


@dataclass
class DepthNormalMap:
    """Per-pixel z-depth and world-frame unit normal with a validity mask.

    ``cost`` is the matching cost of the kept hypothesis and ``support_ncc``
    holds its NCC against each support view, shaped ``(S, H, W)``.
    ``unfiltered`` keeps the map before consistency filtering.
    """

    depth: np.ndarray
    normal: np.ndarray
    valid: np.ndarray
    cost: np.ndarray | None = None
    support_ncc: np.ndarray | None = None
    unfiltered: "DepthNormalMap | None" = field(default=None, repr=False)

    @property
    def shape(self):
        return self.depth.shape

    @classmethod
    def empty(cls, shape) -> "DepthNormalMap":
        h, w = shape
        return cls(np.zeros((h, w)), np.zeros((h, w, 3)), np.zeros((h, w), dtype=bool))

    def masked(self, valid: np.ndarray) -> "DepthNormalMap":
        """Copy with a new validity mask; invalid depths are zeroed."""
        valid = np.asarray(valid, dtype=bool)
        return DepthNormalMap(
            np.where(valid, self.depth, 0.0),
            np.where(valid[..., None], self.normal, 0.0),
            valid,
            self.cost,
            self.support_ncc,
            self.unfiltered if self.unfiltered is not None else self,
        )

    def copy(self) -> "DepthNormalMap":
        return DepthNormalMap(
            self.depth.copy(), self.normal.copy(), self.valid.copy(),
            None if self.cost is None else self.cost.copy(),
            None if self.support_ncc is None else self.support_ncc.copy(),
            self.unfiltered,
        )


@dataclass
class PatchMatchConfig:
    iterations: int = 5
    halvings: int = 6
    depth_range: tuple[float, float] | None = None
    min_consistent_views: int = 1
    min_ncc: float = 0.1
    geom_tol: float = 0.01
    seed: int = 0
    sampler: PatchSampler = field(default_factory=PatchSampler)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.min_consistent_views < 1:
            raise ValueError("min_consistent_views must be >= 1")
        if self.depth_range is not None:
            lo, hi = self.depth_range
            if not 0 < lo < hi:
                raise ValueError("depth range must satisfy 0 < near < far")


def depth_range_from_points(view: CameraView, points: np.ndarray, margin: float = 0.2) -> tuple[float, float]:
    """Z-depth extent of ``points`` in ``view``, widened by ``margin`` each side."""
    z = view.to_camera(np.asarray(points).reshape(-1, 3))[:, 2]
    z = z[z > 0]
    if len(z) == 0:
        raise ValueError("no points in front of the camera")
    return float(z.min() * (1 - margin)), float(z.max() * (1 + margin))


# --------------------------------------------------------------------------
# packing helpers
# --------------------------------------------------------------------------


def _pack_deformations(graphs: list):
    """Stack per-view node transforms; ``None`` or identity graphs get a flag."""
    ref = next((gr for gr in graphs if gr is not None and not gr.is_identity()), None)
    if ref is None:
        m, k, g = 1, 1, np.zeros((1, 3))
    else:
        m, k, g = ref.num_nodes, ref.k, ref.g
    Rn = np.tile(np.eye(3), (len(graphs), m, 1, 1))
    Tn = np.zeros((len(graphs), m, 3))
    ident = np.ones(len(graphs), dtype=bool)
    for i, gr in enumerate(graphs):
        if gr is None or gr.is_identity():
            continue
        if gr.num_nodes != m or gr.k != k or not np.array_equal(gr.g, g):
            raise IncompatibleGraphsError("deformations must share node positions and k")
        Rn[i] = gr.R
        Tn[i] = gr.t
        ident[i] = False
    return np.ascontiguousarray(g, dtype=np.float64), Rn, Tn, ident, int(k)


def _camera_arrays(views: list[CameraView]):
    Ks = np.ascontiguousarray([v.K for v in views], dtype=np.float64)
    Ks_inv = np.ascontiguousarray([np.linalg.inv(v.K) for v in views])
    Rs = np.ascontiguousarray([v.R for v in views], dtype=np.float64)
    ts = np.ascontiguousarray([v.t for v in views], dtype=np.float64)
    Cs = np.ascontiguousarray([v.center for v in views], dtype=np.float64)
    return Ks, Ks_inv, Rs, ts, Cs


def _stack_images(views: list[CameraView]):
    shapes = {v.image.shape for v in views}
    if len(shapes) != 1:
        # pad to a common size with NaN so samples outside the real image fail
        h = max(s[0] for s in shapes)
        w = max(s[1] for s in shapes)
        out = np.full((len(views), h, w), np.nan)
        for i, v in enumerate(views):
            out[i, : v.image.shape[0], : v.image.shape[1]] = v.image
        return out
    return np.ascontiguousarray([v.image for v in views], dtype=np.float64)


# --------------------------------------------------------------------------
# main entry points
# --------------------------------------------------------------------------


def nr_patchmatch(
    target: CameraView,
    supports: list[CameraView],
    config: PatchMatchConfig,
    target_deformation: DeformationGraph | None = None,
    support_deformations: list | None = None,
    support_maps: list[DepthNormalMap] | None = None,
    initial: DepthNormalMap | None = None,
) -> DepthNormalMap:
    """Estimate the depth and normal map of ``target``.

    Args:
        target: view to reconstruct.
        supports: source views used for matching.
        config: PatchMatch settings; ``depth_range`` is required.
        target_deformation: canonical-to-target deformation (``None`` means
            identity).
        support_deformations: one deformation (or ``None``) per support.
        support_maps: depth maps of the supports. When given, a pixel is
            valid only if at least ``min_consistent_views`` supports agree
            photometrically (NCC >= ``min_ncc``) and geometrically. Without
            them only the photometric test is applied.
        initial: optional starting hypotheses instead of random ones.

    Raises:
        NoSourcesError: empty support set.
    """
    if not supports:
        raise NoSourcesError("no sources")
    if config.depth_range is None:
        raise ValueError("config.depth_range must be set")
    support_deformations = support_deformations or [None] * len(supports)
    if len(support_deformations) != len(supports):
        raise ValueError("one deformation per support view is required")
    g, Rn, Tn, ident, k = _pack_deformations([target_deformation] + list(support_deformations))
    Ks, Ks_inv, Rs, ts, Cs = _camera_arrays(supports)
    src = _stack_images(supports)
    sampler = config.sampler
    img = np.ascontiguousarray(target.image, dtype=np.float64)
    weights, moments, inside = pk.ref_windows(img, sampler.radius, sampler.sigma_color, sampler.sigma_spatial)

    h, w = img.shape
    S = len(supports)
    if initial is not None:
        depth = np.ascontiguousarray(np.clip(initial.depth, *config.depth_range))
        normal = np.ascontiguousarray(initial.normal, dtype=np.float64)
        do_init = False
    else:
        depth = np.zeros((h, w))
        normal = np.zeros((h, w, 3))
        do_init = True
    cost = np.ones((h, w))
    rho = np.zeros((h, w, S))
    Kt_inv = np.linalg.inv(target.K)
    pk.patchmatch(
        img, Kt_inv, target.R, target.t, target.center, weights, moments, inside,
        src, Ks, Rs, ts,
        g, Rn[0], Tn[0], bool(ident[0]), Rn[1:], Tn[1:], ident[1:], k, sampler.radius,
        float(config.depth_range[0]), float(config.depth_range[1]),
        int(config.iterations), int(config.halvings), int(config.seed),
        depth, normal, cost, rho, do_init,
    )
    raw = DepthNormalMap(depth, normal, inside.copy(), cost, np.moveaxis(rho, 2, 0).copy())
    return consistency_filter(raw, target, supports, support_maps, config, target_deformation, support_deformations)


def consistency_filter(
    raw: DepthNormalMap,
    target: CameraView,
    supports: list[CameraView],
    support_maps: list[DepthNormalMap] | None,
    config: PatchMatchConfig,
    target_deformation: DeformationGraph | None = None,
    support_deformations: list | None = None,
) -> DepthNormalMap:
    """Keep pixels on which enough supports agree.

    A support agrees when the NCC of the kept hypothesis reaches
    ``config.min_ncc`` and, if ``support_maps`` are given, the support's
    depth reproduces the point within ``config.geom_tol``. ``raw`` must
    come from a PatchMatch run over the same ``supports`` in the same order.
    """
    agree = raw.support_ncc >= config.min_ncc
    if support_maps is not None:
        agree = agree & geometric_agreement(
            raw, target, supports, support_maps, config.geom_tol,
            target_deformation, support_deformations,
        )
    valid = raw.valid & (agree.sum(0) >= config.min_consistent_views)
    return raw.masked(valid)


def raw_map(depth_map: DepthNormalMap) -> DepthNormalMap:
    """The map before consistency filtering (every scored pixel valid)."""
    return depth_map.unfiltered if depth_map.unfiltered is not None else depth_map


def geometric_agreement(
    depth_map: DepthNormalMap,
    target: CameraView,
    supports: list[CameraView],
    support_maps: list[DepthNormalMap],
    tol: float = 0.01,
    target_deformation: DeformationGraph | None = None,
    support_deformations: list | None = None,
) -> np.ndarray:
    """Boolean ``(S, H, W)``: support ``s`` reproduces the target depth within ``tol``."""
    support_deformations = support_deformations or [None] * len(supports)
    g, Rn, Tn, ident, k = _pack_deformations([target_deformation] + list(support_deformations))
    Ks, Ks_inv, Rs, ts, _ = _camera_arrays(supports)
    h = max(m.depth.shape[0] for m in support_maps)
    w = max(m.depth.shape[1] for m in support_maps)
    sd = np.zeros((len(supports), h, w))
    sn = np.zeros((len(supports), h, w, 3))
    for i, m in enumerate(support_maps):
        mh, mw = m.depth.shape
        sd[i, :mh, :mw] = np.where(m.valid, m.depth, 0.0)
        sn[i, :mh, :mw] = m.normal
    depth = np.where(depth_map.valid, depth_map.depth, 0.0)
    return pk.geometric_check(
        np.ascontiguousarray(depth), np.ascontiguousarray(depth_map.normal),
        np.linalg.inv(target.K), target.R, target.center,
        Ks, Ks_inv, Rs, ts,
        g, Rn[0], Tn[0], bool(ident[0]), Rn[1:], Tn[1:], ident[1:], k,
        sd, sn, float(tol),
    )


# --------------------------------------------------------------------------
# clouds
# --------------------------------------------------------------------------


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray
    colors: np.ndarray

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def concat(cls, clouds: list["PointCloud"]) -> "PointCloud":
        if not clouds:
            return cls.empty()
        return cls(
            np.vstack([c.points for c in clouds]),
            np.vstack([c.normals for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
        )


def backproject(depth_map: DepthNormalMap, view: CameraView) -> PointCloud:
    """World points, normals and intensities of the valid pixels."""
    ys, xs = np.nonzero(depth_map.valid)
    if len(ys) == 0:
        return PointCloud.empty()
    d = depth_map.depth[ys, xs]
    rays = np.column_stack([xs, ys, np.ones_like(xs)]).astype(np.float64) @ np.linalg.inv(view.K).T
    points = view.to_world(rays * d[:, None])
    return PointCloud(points, depth_map.normal[ys, xs], view.image[ys, xs])


def fuse_to_cloud(
    maps: list[DepthNormalMap],
    views: list[CameraView],
    deformations: list | None = None,
) -> tuple[list[PointCloud], PointCloud]:
    """Per-view clouds and their union mapped to the canonical frame."""
    deformations = deformations or [None] * len(views)
    per_view = []
    canon = []
    for m, v, gr in zip(maps, views, deformations):
        cloud = backproject(m, v)
        per_view.append(cloud)
        if len(cloud) == 0:
            continue
        if gr is None or gr.is_identity():
            canon.append(cloud)
        else:
            canon.append(
                PointCloud(
                    approx_inverse(cloud.points, gr),
                    approx_inverse_normals(cloud.normals, cloud.points, gr),
                    cloud.colors,
                )
            )
    return per_view, PointCloud.concat(canon)
