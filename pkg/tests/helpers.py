"""Instance generators shared by the test modules."""

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from nrmvs.defgraph import DeformationGraph, deform_points, sample_nodes
from nrmvs.geometry import CameraView
from nrmvs.optimize import SparseMatches


def random_rotations(rng, n, max_angle=np.pi):
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    ang = rng.uniform(0, max_angle, n)
    return Rotation.from_rotvec(axis * ang[:, None]).as_matrix()


def random_graph(rng, n_nodes=12, k=4, max_angle=0.6, trans_scale=0.3, extent=1.0):
    """Nodes uniform in a cube with kNN topology and random transforms."""
    from nrmvs.defgraph import _knn_graph

    g = rng.uniform(-extent, extent, (n_nodes, 3))
    base = DeformationGraph.identity(g, _knn_graph(g, k), k)
    return base.with_transforms(random_rotations(rng, n_nodes, max_angle), rng.normal(size=(n_nodes, 3)) * trans_scale)


def bumpy_surface(rng, n):
    p = rng.uniform(-1, 1, (n, 2))
    z = 0.3 * np.exp(-(p**2).sum(1) / 0.5)
    return np.column_stack([p, z])


def smooth_surface_deformation(rng, n_nodes=50, rel_disp=0.1):
    """Graph on a bumpy surface carrying a low-frequency displacement field.

    Node translations follow ``u(p) = a sin(w d.p + phi)`` with ``|a|`` equal
    to ``rel_disp`` times the median node spacing; rotations are the polar
    factor of ``I + grad u``. Returns ``(graph, surface sampler, diameter)``.
    """
    pts = bumpy_surface(rng, 5000)
    graph, _, _ = sample_nodes(pts, n_nodes, 4)
    spacing = float(np.median(cKDTree(graph.g).query(graph.g, k=2)[0][:, 1]))
    diam = float(np.linalg.norm(pts.max(0) - pts.min(0)))
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    a = rng.normal(size=3)
    a *= rel_disp * spacing / np.linalg.norm(a)
    om = np.pi / diam
    ph = rng.uniform(0, 2 * np.pi)
    arg = om * graph.g @ d + ph
    t = a * np.sin(arg)[:, None]
    grad = om * np.cos(arg)[:, None, None] * a[None, :, None] * d[None, None, :]
    u, _, vt = np.linalg.svd(np.eye(3) + grad)
    return graph.with_transforms(u @ vt, t), (lambda n: bumpy_surface(rng, n)), diam


def plane_graph(rng, n_points=3000, n_nodes=30, half=3.0):
    p = rng.uniform(-half, half, (n_points, 2))
    graph, _, _ = sample_nodes(np.column_stack([p, np.zeros(len(p))]), n_nodes, 4)
    return graph


def bump_deformation(rng, graph):
    """A graph-representable smooth bump of the plane z = 0."""
    c = rng.uniform(-2, 2, 2)
    amp = rng.uniform(0.3, 0.6) * rng.choice([-1, 1])
    u = amp * np.exp(-((graph.g[:, :2] - c) ** 2).sum(1) / 4)
    grad = -(graph.g[:, :2] - c) / 2 * u[:, None]
    F = np.tile(np.eye(3), (graph.num_nodes, 1, 1))
    F[:, 2, 0] = grad[:, 0]
    F[:, 2, 1] = grad[:, 1]
    U, _, Vt = np.linalg.svd(F)
    t = np.column_stack([np.zeros(graph.num_nodes), np.zeros(graph.num_nodes), u])
    return graph.with_transforms(U @ Vt, t)


def outlier_instance(seed, n=200, outlier_fraction=0.05, d_max=0.01, noise=0.001):
    """Matches from a known deformation plus gross outliers at 10 d_max.

    Returns ``(rest graph, matches, outlier ids)``.
    """
    rng = np.random.default_rng(seed)
    graph = plane_graph(rng)
    true = bump_deformation(rng, graph)
    xc = np.column_stack([rng.uniform(-2.8, 2.8, (n, 2)), np.zeros(n)])
    xt = deform_points(xc, true) + rng.normal(scale=noise, size=(n, 3))
    n_out = int(round(outlier_fraction * n))
    out = rng.choice(n, n_out, replace=False)
    dirs = rng.normal(size=(n_out, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    xt[out] += 10 * d_max * dirs
    return graph, SparseMatches(xc, xt, np.arange(n)), out


def look_at_view(center, target=(0.0, 0.0, 0.0), f=100.0, size=(120, 160), image=None):
    """Camera at ``center`` looking at ``target`` with y roughly down."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 1.0, 0.0])
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.vstack([right, down, fwd])
    h, w = size
    K = np.array([[f, 0.0, (w - 1) / 2], [0.0, f, (h - 1) / 2], [0.0, 0.0, 1.0]])
    img = np.zeros(size) if image is None else image
    return CameraView(K, R, -R @ center, img, levels=1)
