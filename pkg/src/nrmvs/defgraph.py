"""Embedded deformation graph.

Each node ``j`` carries a rest position ``g_j`` and a rigid transform
``(R_j, t_j)`` acting about ``g_j``. A point is deformed by blending the
transforms of its ``k`` nearest nodes with the weights

    w_i(v) ∝ (1 - |v - g_i| / |v - g_{k+1}|)^2,

normalised to sum to one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from . import _kernels as kn
from .errors import (
    DegenerateNormalError,
    DegenerateWeightsError,
    EmptyInputError,
    IncompatibleGraphsError,
    SingularBlendError,
)


@dataclass
class SkinningWeights:
    indices: np.ndarray
    weights: np.ndarray


@dataclass
class DeformationGraph:
    g: np.ndarray
    R: np.ndarray
    t: np.ndarray
    neighbors: list = field(default_factory=list)
    k: int = 4

    def __post_init__(self):
        self.g = np.ascontiguousarray(self.g, dtype=np.float64).reshape(-1, 3)
        m = len(self.g)
        self.R = np.ascontiguousarray(self.R, dtype=np.float64).reshape(m, 3, 3)
        self.t = np.ascontiguousarray(self.t, dtype=np.float64).reshape(m, 3)
        self.neighbors = [np.asarray(nb, dtype=np.int64) for nb in self.neighbors]
        if not self.neighbors:
            self.neighbors = [np.zeros(0, dtype=np.int64) for _ in range(m)]
        if m != 1 and m < self.k + 1:
            raise ValueError(f"graph needs at least k+1 = {self.k + 1} nodes, got {m}")
        if len(self.neighbors) != m:
            raise ValueError("one neighbour list per node required")

    @classmethod
    def identity(cls, g: np.ndarray, neighbors=None, k: int = 4) -> "DeformationGraph":
        g = np.asarray(g, dtype=np.float64).reshape(-1, 3)
        m = len(g)
        return cls(g, np.tile(np.eye(3), (m, 1, 1)), np.zeros((m, 3)), neighbors or [], k)

    @property
    def num_nodes(self) -> int:
        return len(self.g)

    def copy(self) -> "DeformationGraph":
        return DeformationGraph(
            self.g.copy(), self.R.copy(), self.t.copy(), [nb.copy() for nb in self.neighbors], self.k
        )

    def with_transforms(self, R: np.ndarray, t: np.ndarray) -> "DeformationGraph":
        """Same nodes and topology, new transforms (rest positions are shared)."""
        out = DeformationGraph.__new__(DeformationGraph)
        out.g = self.g
        out.R = np.ascontiguousarray(R, dtype=np.float64)
        out.t = np.ascontiguousarray(t, dtype=np.float64)
        out.neighbors = self.neighbors
        out.k = self.k
        return out

    def identity_like(self) -> "DeformationGraph":
        m = self.num_nodes
        return self.with_transforms(np.tile(np.eye(3), (m, 1, 1)), np.zeros((m, 3)))

    def edges(self) -> np.ndarray:
        """Directed regulariser edges (j, k) for k in N(j), shape (E, 2)."""
        pairs = [(j, int(q)) for j, nb in enumerate(self.neighbors) for q in nb]
        return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)

    def is_identity(self) -> bool:
        return bool(np.all(self.t == 0) and np.all(self.R == np.eye(3)))

    def orthonormalize(self) -> None:
        """Project every rotation back onto SO(3) (polar decomposition)."""
        u, _, vt = np.linalg.svd(self.R)
        d = np.sign(np.linalg.det(u @ vt))
        u[:, :, 2] *= d[:, None]
        self.R = np.ascontiguousarray(u @ vt)

    def check_rotations(self, tol: float = 1e-8) -> bool:
        err = np.abs(np.einsum("nij,nkj->nik", self.R, self.R) - np.eye(3)).max(initial=0.0)
        return bool(err <= tol and np.all(np.linalg.det(self.R) > 0))

    def check_symmetric(self) -> bool:
        sets = [set(map(int, nb)) for nb in self.neighbors]
        return all(j in sets[q] for j, s in enumerate(sets) for q in s)

    # serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "k": int(self.k),
            "nodes": [
                {"g": self.g[j].tolist(), "R": self.R[j].ravel().tolist(), "t": self.t[j].tolist()}
                for j in range(self.num_nodes)
            ],
            "neighbors": [nb.tolist() for nb in self.neighbors],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DeformationGraph":
        nodes = data["nodes"]
        g = np.array([n["g"] for n in nodes], dtype=np.float64)
        R = np.array([n["R"] for n in nodes], dtype=np.float64).reshape(-1, 3, 3)
        t = np.array([n["t"] for n in nodes], dtype=np.float64)
        return cls(g, R, t, data.get("neighbors", []), int(data.get("k", 4)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DeformationGraph":
        return cls.from_dict(json.loads(text))


def _knn_graph(g: np.ndarray, k: int) -> list[np.ndarray]:
    m = len(g)
    if m <= 1:
        return [np.zeros(0, dtype=np.int64) for _ in range(m)]
    d = np.linalg.norm(g[:, None, :] - g[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, : min(k, m - 1)]
    sets = [set() for _ in range(m)]
    for j in range(m):
        for q in order[j]:
            sets[j].add(int(q))
            sets[int(q)].add(j)
    return [np.array(sorted(s), dtype=np.int64) for s in sets]


def _thin(points: np.ndarray, radius: float) -> np.ndarray:
    """Greedy radius thinning in input order; returns kept indices."""
    tree = cKDTree(points)
    removed = np.zeros(len(points), dtype=bool)
    keep = []
    for i in range(len(points)):
        if removed[i]:
            continue
        keep.append(i)
        for q in tree.query_ball_point(points[i], radius):
            if q != i and np.linalg.norm(points[q] - points[i]) < radius:
                removed[q] = True
    return np.asarray(keep, dtype=np.int64)


def sample_nodes(points: np.ndarray, target_count: int, k: int = 4, max_iter: int = 1000):
    """Distribute graph nodes over a point cloud.

    Starts from every point as a node, removes neighbours within a radius,
    and repeats with the radius grown by 10% until at most ``target_count``
    nodes remain.

    Returns:
        ``(graph, radius, iterations)``; ``radius`` is the final rejection
        radius (0 when no thinning was needed).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyInputError("empty input")
    nodes = points
    radius = 0.0
    iterations = 0
    if len(nodes) > target_count:
        nn_d, _ = cKDTree(points).query(points, k=2)
        radius = max(float(np.median(nn_d[:, 1])), 1e-12)
        while len(nodes) > target_count and iterations < max_iter:
            nodes = nodes[_thin(nodes, radius)]
            iterations += 1
            if len(nodes) > target_count:
                radius *= 1.1
    if len(nodes) < k + 1 and len(nodes) != 1:
        raise ValueError(f"only {len(nodes)} nodes for k = {k}")
    graph = DeformationGraph.identity(nodes, _knn_graph(nodes, k), k)
    return graph, radius, iterations


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def skinning_weights_batch(points: np.ndarray, graph: DeformationGraph, deformed: bool = False):
    """(idx, w) arrays of shape (n, k). ``deformed`` measures against g + t."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    pos = graph.g + graph.t if deformed else graph.g
    idx, w, status = kn.skin_batch(pts, np.ascontiguousarray(pos), graph.k)
    if np.any(status == kn.DEGENERATE):
        raise DegenerateWeightsError("degenerate weights")
    return idx, w


def skinning_weights(v: np.ndarray, graph: DeformationGraph) -> SkinningWeights:
    idx, w = skinning_weights_batch(v, graph)
    return SkinningWeights(idx[0], w[0])


def deform_points(points: np.ndarray, graph: DeformationGraph, weights=None) -> np.ndarray:
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    if graph.is_identity():
        return pts.copy()
    idx, w = weights if weights is not None else skinning_weights_batch(pts, graph)
    return kn.deform_batch(pts, idx, w, graph.g, graph.R, graph.t)


def deform_point(v: np.ndarray, graph: DeformationGraph) -> np.ndarray:
    return deform_points(v, graph)[0]


def deform_normals(normals: np.ndarray, points: np.ndarray, graph: DeformationGraph, weights=None):
    """Blend node rotations with the anchor points' weights and renormalise."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    nrm = np.ascontiguousarray(np.asarray(normals, dtype=np.float64).reshape(-1, 3))
    if graph.is_identity():
        return nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    idx, w = weights if weights is not None else skinning_weights_batch(pts, graph)
    out, status = kn.normal_batch(nrm, idx, w, graph.R)
    if np.any(status != kn.OK):
        raise DegenerateNormalError("degenerate normal")
    return out


def deform_normal(n: np.ndarray, v: np.ndarray, graph: DeformationGraph) -> np.ndarray:
    return deform_normals(n, v, graph)[0]


def _inverse(vh, idx, w, graph):
    out, status = kn.inverse_batch(vh, idx, w, graph.g, graph.R, graph.t)
    if np.any(status == kn.SINGULAR):
        raise SingularBlendError("singular rotation blend")
    return out


def exact_inverse(vh: np.ndarray, weights, graph: DeformationGraph) -> np.ndarray:
    """Invert the deformation given the weights of the original point.

    ``weights`` is a :class:`SkinningWeights` (single point) or an
    ``(idx, w)`` tuple of batch arrays.
    """
    vh = np.ascontiguousarray(np.asarray(vh, dtype=np.float64).reshape(-1, 3))
    if isinstance(weights, SkinningWeights):
        idx, w = weights.indices[None, :], weights.weights[None, :]
        return _inverse(vh, np.ascontiguousarray(idx), np.ascontiguousarray(w), graph)[0]
    idx, w = weights
    return _inverse(vh, idx, w, graph)


def approx_inverse(vh: np.ndarray, graph: DeformationGraph) -> np.ndarray:
    """Closed-form pre-image using weights against the deformed nodes g + t."""
    single = np.asarray(vh).ndim == 1
    pts = np.ascontiguousarray(np.asarray(vh, dtype=np.float64).reshape(-1, 3))
    if graph.is_identity():
        return pts[0].copy() if single else pts.copy()
    idx, w = skinning_weights_batch(pts, graph, deformed=True)
    out = _inverse(pts, idx, w, graph)
    return out[0] if single else out


def approx_inverse_normals(nh: np.ndarray, vh: np.ndarray, graph: DeformationGraph) -> np.ndarray:
    pts = np.ascontiguousarray(np.asarray(vh, dtype=np.float64).reshape(-1, 3))
    nrm = np.asarray(nh, dtype=np.float64).reshape(-1, 3)
    idx, w = skinning_weights_batch(pts, graph, deformed=True)
    M = np.einsum("nk,nkij->nij", w, graph.R[idx])
    out = np.linalg.solve(M, nrm[..., None])[..., 0]
    norm = np.linalg.norm(out, axis=1)
    if np.any(norm < 1e-9):
        raise DegenerateNormalError("degenerate normal")
    return out / norm[:, None]


def regularizer_residuals(graph: DeformationGraph) -> np.ndarray:
    """One 3-vector per directed edge: R_j (g_k - g_j) + g_j + t_j - (g_k + t_k)."""
    e = graph.edges()
    if len(e) == 0:
        return np.zeros((0, 3))
    j, q = e[:, 0], e[:, 1]
    g, R, t = graph.g, graph.R, graph.t
    return np.einsum("eab,eb->ea", R[j], g[q] - g[j]) + g[j] + t[j] - (g[q] + t[q])


# --------------------------------------------------------------------------
# dual-quaternion interpolation
# --------------------------------------------------------------------------


def _qmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of (..., 4) quaternions stored as (w, x, y, z)."""
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def _conj(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def to_dual_quaternions(R: np.ndarray, trans: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(real, dual) parts for the rigid maps x -> R x + trans."""
    xyzw = Rotation.from_matrix(R).as_quat()
    real = np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)
    tq = np.concatenate([np.zeros(trans.shape[:-1] + (1,)), trans], axis=-1)
    dual = 0.5 * _qmul(tq, real)
    return real, dual


def from_dual_quaternions(real: np.ndarray, dual: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(real, axis=-1, keepdims=True)
    real = real / norm
    dual = dual / norm
    dual = dual - np.sum(real * dual, axis=-1, keepdims=True) * real
    trans = 2.0 * _qmul(dual, _conj(real))[..., 1:]
    xyzw = np.concatenate([real[..., 1:], real[..., :1]], axis=-1)
    return Rotation.from_quat(xyzw).as_matrix(), trans


def interpolate(graph_a: DeformationGraph, graph_b: DeformationGraph, alpha: float) -> DeformationGraph:
    """Blend two graphs node-wise with dual quaternions, weights (1 - alpha, alpha)."""
    if (
        graph_a.num_nodes != graph_b.num_nodes
        or graph_a.k != graph_b.k
        or not np.array_equal(graph_a.g, graph_b.g)
        or len(graph_a.neighbors) != len(graph_b.neighbors)
        or any(not np.array_equal(a, b) for a, b in zip(graph_a.neighbors, graph_b.neighbors))
    ):
        raise IncompatibleGraphsError("incompatible graphs")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 0.0:
        return graph_a.copy()
    if alpha == 1.0:
        return graph_b.copy()
    g = graph_a.g

    def affine_t(gr):
        return g + gr.t - np.einsum("nij,nj->ni", gr.R, g)

    ra, da = to_dual_quaternions(graph_a.R, affine_t(graph_a))
    rb, db = to_dual_quaternions(graph_b.R, affine_t(graph_b))
    sign = np.where(np.sum(ra * rb, axis=-1, keepdims=True) < 0.0, -1.0, 1.0)
    real = (1.0 - alpha) * ra + alpha * sign * rb
    dual = (1.0 - alpha) * da + alpha * sign * db
    R, trans = from_dual_quaternions(real, dual)
    t = trans - g + np.einsum("nij,nj->ni", R, g)
    return DeformationGraph(g.copy(), R, t, [nb.copy() for nb in graph_a.neighbors], graph_a.k)
