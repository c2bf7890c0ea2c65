"""Synthetic deforming-plane scenes with ground truth, and depth metrics.

The surface is a textured square of side ``plane_size`` in the z = 0 plane,
parameterised by ``(a, b)``. Frame ``f`` displaces it by a sum of Gaussian
bumps,

    P_f(a, b) = (a, b, 0) + sum_k amp[f, k] * exp(-|(a, b) - c_k|^2 / 2 s_k^2) * dir_k,

so texture stays attached to the surface. Cameras sit on an arc looking at
the origin. View ``v`` observes frame ``view_frames[v]``; the arc ends show
frames 0 and 1, which share the same (flat) state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .defgraph import DeformationGraph, sample_nodes
from .errors import ResolutionMismatchError
from .geometry import CameraView


@dataclass
class SyntheticScene:
    plane_size: float
    texture: np.ndarray
    centers: np.ndarray
    sigmas: np.ndarray
    directions: np.ndarray
    amplitudes: np.ndarray
    K: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    width: int
    height: int
    view_frames: list
    landmarks: np.ndarray
    seed: int = 0
    background: float = 0.2
    light: np.ndarray = field(default_factory=lambda: np.array([0.2, 0.3, 1.0]) / math.sqrt(1.13))

    @property
    def n_views(self) -> int:
        return len(self.rotations)

    @property
    def canonical_pair(self) -> tuple[int, int]:
        return self.view_frames.index(0), self.view_frames.index(1)

    # surface -------------------------------------------------------------

    def surface(self, frame: int, a: np.ndarray, b: np.ndarray):
        """Position and partial derivatives of the deformed surface."""
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        P = np.stack([a, b, np.zeros_like(a)], -1)
        Pa = np.zeros_like(P)
        Pb = np.zeros_like(P)
        Pa[..., 0] = 1.0
        Pb[..., 1] = 1.0
        for amp, c, s, d in zip(self.amplitudes[frame], self.centers, self.sigmas, self.directions):
            if amp == 0.0:
                continue
            da = a - c[0]
            db = b - c[1]
            phi = amp * np.exp(-(da * da + db * db) / (2 * s * s))
            P = P + phi[..., None] * d
            Pa = Pa + (-da / (s * s) * phi)[..., None] * d
            Pb = Pb + (-db / (s * s) * phi)[..., None] * d
        return P, Pa, Pb

    def normal(self, frame, a, b):
        _, Pa, Pb = self.surface(frame, a, b)
        n = np.cross(Pa, Pb)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def camera(self, view: int, image: np.ndarray | None = None, levels: int = 3) -> CameraView:
        if image is None:
            image = np.zeros((self.height, self.width))
        return CameraView(self.K, self.rotations[view], self.translations[view], image, levels=levels, name=f"view_{view:02d}")

    def texture_at(self, a, b):
        n = self.texture.shape[0]
        half = 0.5 * self.plane_size
        ti = (np.asarray(b) + half) / self.plane_size * (n - 1)
        tj = (np.asarray(a) + half) / self.plane_size * (n - 1)
        return ndimage.map_coordinates(self.texture, [ti.ravel(), tj.ravel()], order=1, mode="nearest").reshape(np.shape(a))


def make_scene(
    n_views: int = 10,
    width: int = 160,
    height: int = 120,
    seed: int = 0,
    plane_size: float = 6.0,
    arc_degrees: float = 60.0,
    distance: float | None = None,
    elevation_degrees: float = 10.0,
    amplitude_range: tuple[float, float] = (0.3, 0.6),
    n_bumps: int = 3,
    n_landmarks: int = 300,
    texture_size: int = 256,
    texture_sigma: float = 3.0,
    static: bool = False,
    min_state_gap: float = 0.3,
    min_center_gap: float = 0.35,
) -> SyntheticScene:
    """Random deforming-plane scene.

    ``static=True`` gives zero amplitudes for every frame. Otherwise frames 0
    and 1 are flat and every other frame has bump amplitudes whose magnitude
    lies in ``amplitude_range`` (5-10% of the default plane size) with
    random sign, resampled until all non-canonical states
    differ pairwise and from the flat state by at least ``min_state_gap``.
    Bump centres are at least ``min_center_gap * plane_size`` apart.
    """
    if n_views < 2:
        raise ValueError("need at least two views")
    rng = np.random.default_rng(seed)
    distance = distance if distance is not None else 2.0 * plane_size
    half = 0.5 * plane_size

    tex = ndimage.gaussian_filter(rng.standard_normal((texture_size, texture_size)), texture_sigma, mode="wrap")
    tex = 0.5 + 0.15 * (tex - tex.mean()) / tex.std()
    tex = np.clip(tex, 0.05, 0.95)

    # bump centres kept apart so neighbouring bumps cannot cancel each other
    for _ in range(1000):
        centers = rng.uniform(-0.3 * plane_size, 0.3 * plane_size, (n_bumps, 2))
        gaps = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        np.fill_diagonal(gaps, np.inf)
        if gaps.min() >= min_center_gap * plane_size:
            break
    sigmas = rng.uniform(0.17, 0.25, n_bumps) * plane_size
    # tilt towards y, the axis across the camera arc, so that a change of
    # amplitude also moves points off their epipolar lines
    directions = np.column_stack([
        rng.uniform(-0.5, 0.5, n_bumps),
        rng.choice([-1.0, 1.0], n_bumps) * rng.uniform(0.5, 1.0, n_bumps),
        np.ones(n_bumps),
    ])
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    amplitudes = np.zeros((n_views, n_bumps))
    if not static and n_views > 2:
        lo, hi = amplitude_range
        for _ in range(1000):
            mags = rng.uniform(lo, hi, (n_views - 2, n_bumps))
            signs = rng.choice([-1.0, 1.0], (n_views - 2, n_bumps))
            states = np.vstack([np.zeros((2, n_bumps)), mags * signs])
            gaps = np.abs(states[:, None, :] - states[None, :, :]).max(-1)
            np.fill_diagonal(gaps, np.inf)
            gaps[0, 1] = gaps[1, 0] = np.inf
            if gaps.min() >= min_state_gap:
                break
        amplitudes = states

    f = 0.8 * (height / 2) * distance / half
    K = np.array([[f, 0.0, (width - 1) / 2], [0.0, f, (height - 1) / 2], [0.0, 0.0, 1.0]])
    thetas = np.radians(np.linspace(-arc_degrees / 2, arc_degrees / 2, n_views))
    el = math.radians(elevation_degrees)
    rotations, translations = [], []
    for th in thetas:
        C = distance * np.array([math.cos(el) * math.sin(th), -math.sin(el), math.cos(el) * math.cos(th)])
        fwd = -C / np.linalg.norm(C)
        right = np.cross(fwd, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.vstack([right, down, fwd])
        rotations.append(R)
        translations.append(-R @ C)

    view_frames = [0] + list(range(2, n_views)) + [1] if n_views > 2 else [0, 1]
    landmarks = rng.uniform(-0.85 * half, 0.85 * half, (n_landmarks, 2))
    return SyntheticScene(
        plane_size, tex, centers, sigmas, directions, amplitudes, K,
        np.array(rotations), np.array(translations), width, height, view_frames, landmarks, seed,
    )


def _intersect(scene: SyntheticScene, frame: int, view: int):
    """Ray-surface intersection for every pixel: returns (a, b, depth, hit)."""
    h, w = scene.height, scene.width
    R, t, K = scene.rotations[view], scene.translations[view], scene.K
    C = -R.T @ t
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    rays = np.stack([u, v, np.ones_like(u)], -1) @ np.linalg.inv(K).T @ R
    o = np.broadcast_to(C, rays.shape)
    s = -o[..., 2] / rays[..., 2]
    a = o[..., 0] + s * rays[..., 0]
    b = o[..., 1] + s * rays[..., 1]
    for _ in range(12):
        P, Pa, Pb = scene.surface(frame, a, b)
        F = P - (o + s[..., None] * rays)
        J = np.stack([Pa, Pb, -rays], -1)
        step = np.linalg.solve(J, -F[..., None])[..., 0]
        a = a + step[..., 0]
        b = b + step[..., 1]
        s = s + step[..., 2]
    P, _, _ = scene.surface(frame, a, b)
    resid = np.linalg.norm(P - (o + s[..., None] * rays), axis=-1)
    half = 0.5 * scene.plane_size
    hit = (resid < 1e-8) & (np.abs(a) <= half) & (np.abs(b) <= half) & (s > 0)
    depth = (P @ R.T + t)[..., 2]
    return a, b, np.where(hit, depth, 0.0), hit


def render(scene: SyntheticScene, frame: int, view: int):
    """Lambertian rendering of one frame seen from one view.

    Returns:
        ``(image, depth, landmark_pixels, landmark_visible)``; depth is 0 on
        background pixels, landmark pixels are noise-free projections.
    """
    a, b, depth, hit = _intersect(scene, frame, view)
    albedo = scene.texture_at(a, b)
    n = scene.normal(frame, a, b)
    shade = 0.35 + 0.65 * np.clip(n @ scene.light, 0.0, None)
    image = np.where(hit, albedo * shade, scene.background)
    uv, vis = project_landmarks(scene, frame, view)
    return image, depth, uv, vis


def project_landmarks(scene: SyntheticScene, frame: int, view: int, margin: float = 2.0):
    P, _, _ = scene.surface(frame, scene.landmarks[:, 0], scene.landmarks[:, 1])
    xc = P @ scene.rotations[view].T + scene.translations[view]
    uvw = xc @ scene.K.T
    uv = uvw[:, :2] / uvw[:, 2:3]
    vis = (
        (xc[:, 2] > 0)
        & (uv[:, 0] >= margin) & (uv[:, 0] <= scene.width - 1 - margin)
        & (uv[:, 1] >= margin) & (uv[:, 1] <= scene.height - 1 - margin)
    )
    return uv, vis


def synth_matches(scene: SyntheticScene, noise_px: float = 0.2, outlier_fraction: float = 0.02, seed: int | None = None):
    """Pairwise keypoint matches from landmark projections.

    Every landmark gets one noisy keypoint per view, reused across all pairs
    so matches chain into tracks. A fraction of matches per pair is replaced
    by an outlier: half pair the keypoint with a fresh random pixel, half with
    another landmark's keypoint.

    Returns:
        ``({(a, b): (n, 4) array}, keypoints (n_views, n_landmarks, 2), visible)``
    """
    rng = np.random.default_rng(scene.seed * 7919 + 1 if seed is None else seed)
    nv = scene.n_views
    kp = np.zeros((nv, len(scene.landmarks), 2))
    vis = np.zeros((nv, len(scene.landmarks)), dtype=bool)
    for v in range(nv):
        uv, ok = project_landmarks(scene, scene.view_frames[v], v)
        kp[v] = uv + noise_px * rng.standard_normal(uv.shape)
        vis[v] = ok
    pairwise = {}
    for a in range(nv):
        for b in range(a + 1, nv):
            ids = np.flatnonzero(vis[a] & vis[b])
            pairs = np.hstack([kp[a, ids], kp[b, ids]])
            n_out = int(round(outlier_fraction * len(ids)))
            if n_out:
                which = rng.choice(len(ids), n_out, replace=False)
                for q, i in enumerate(which):
                    if q % 2 == 0:
                        pairs[i, 2:] = rng.uniform([0, 0], [scene.width - 1, scene.height - 1])
                    else:
                        other = ids[(i + 1 + rng.integers(len(ids) - 1)) % len(ids)]
                        pairs[i, 2:] = kp[b, other]
            pairwise[(a, b)] = pairs
    return pairwise, kp, vis


def ground_truth_graph(scene: SyntheticScene, frame: int, num_nodes: int = 40, k: int = 4, samples: int = 40):
    """Deformation graph approximating the map from frame 0 to ``frame``.

    Node transforms are initialised from the local surface frames and then
    fitted to dense surface correspondences by least squares.
    """
    from .optimize import EnergyWeights, JointProblem, SparseMatches, lm_solve

    half = 0.5 * scene.plane_size
    ga = np.linspace(-half, half, samples)
    A, B = np.meshgrid(ga, ga)
    A, B = A.ravel(), B.ravel()
    Pc, Pca, Pcb = scene.surface(0, A, B)
    graph, _, _ = sample_nodes(Pc, num_nodes, k)
    # recover node surface parameters: canonical nodes lie on the frame-0 surface
    node_ab = np.array([(A[i], B[i]) for i in [int(np.argmin(np.linalg.norm(Pc - g, axis=1))) for g in graph.g]])
    Pn, Pna, Pnb = scene.surface(frame, node_ab[:, 0], node_ab[:, 1])
    Pn0, P0a, P0b = scene.surface(0, node_ab[:, 0], node_ab[:, 1])
    n0 = np.cross(P0a, P0b)
    n1 = np.cross(Pna, Pnb)
    F = np.stack([Pna, Pnb, n1], -1) @ np.linalg.inv(np.stack([P0a, P0b, n0], -1))
    u, _, vt = np.linalg.svd(F)
    d = np.sign(np.linalg.det(u @ vt))
    u[:, :, 2] *= d[:, None]
    graph = graph.with_transforms(u @ vt, Pn - Pn0)
    Pf, _, _ = scene.surface(frame, A, B)
    matches = SparseMatches(Pc, Pf, np.arange(len(Pc)))
    problem = JointProblem(graph, matches, EnergyWeights(1000.0, 0.0, 1.0))
    graph, _ = lm_solve(graph, problem, max_iters=100)
    return graph


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass
class EvalResult:
    mre: float
    completeness: float
    mre_unfiltered: float = float("nan")

    def to_dict(self) -> dict:
        return {"mre": self.mre, "completeness": self.completeness, "mre_unfiltered": self.mre_unfiltered}


def _relative_errors(depth, valid, truth):
    depth = np.asarray(depth, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if depth.shape != truth.shape:
        raise ResolutionMismatchError(f"resolution mismatch: {depth.shape} vs {truth.shape}")
    covered = truth > 0
    if valid is None:
        valid = depth > 0
    used = np.asarray(valid, dtype=bool) & covered
    rel = np.abs(depth[used] - truth[used]) / truth[used]
    return rel, int(used.sum()), int(covered.sum())


def evaluate(depth, truth, valid=None, unfiltered_depth=None) -> EvalResult:
    """MRE (%) over valid pixels with ground truth and completeness (%).

    Args:
        depth: estimated depth map, or an object with ``depth``/``valid``.
        truth: ground-truth depth, 0 where the surface is not visible.
        valid: optional validity mask (defaults to ``depth > 0``).
        unfiltered_depth: depth of the same run without the consistency
            filter, for ``mre_unfiltered``.
    """
    if hasattr(depth, "depth"):
        valid = depth.valid if valid is None else valid
        depth = depth.depth
    rel, used, covered = _relative_errors(depth, valid, truth)
    mre = 100.0 * float(rel.mean()) if used else float("nan")
    completeness = 100.0 * used / covered if covered else 0.0
    mre_unf = float("nan")
    if unfiltered_depth is not None:
        if hasattr(unfiltered_depth, "depth"):
            unfiltered_depth = unfiltered_depth.depth
        rel_u, used_u, _ = _relative_errors(unfiltered_depth, None, truth)
        mre_unf = 100.0 * float(rel_u.mean()) if used_u else float("nan")
    return EvalResult(mre, completeness, mre_unf)


def evaluate_many(depths, truths, valids=None, unfiltered=None) -> EvalResult:
    """Pooled metrics over several views (every reconstructed value counts once)."""
    rels, used, covered, rels_u = [], 0, 0, []
    for i, (d, t) in enumerate(zip(depths, truths)):
        v = None if valids is None else valids[i]
        if hasattr(d, "depth"):
            v = d.valid if v is None else v
            d = d.depth
        r, u, c = _relative_errors(d, v, t)
        rels.append(r)
        used += u
        covered += c
        if unfiltered is not None:
            du = unfiltered[i].depth if hasattr(unfiltered[i], "depth") else unfiltered[i]
            rels_u.append(_relative_errors(du, None, t)[0])
    allrel = np.concatenate(rels) if rels else np.zeros(0)
    mre = 100.0 * float(allrel.mean()) if len(allrel) else float("nan")
    mre_u = 100.0 * float(np.concatenate(rels_u).mean()) if rels_u else float("nan")
    return EvalResult(mre, 100.0 * used / covered if covered else 0.0, mre_u)


def render_all(scene: SyntheticScene, levels: int = 3):
    """Camera views with rendered images, and ground-truth depth per view."""
    views, depths = [], []
    for v in range(scene.n_views):
        image, depth, _, _ = render(scene, scene.view_frames[v], v)
        views.append(scene.camera(v, image, levels))
        depths.append(depth)
    return views, depths
