"""Joint deformation energy, Levenberg-Marquardt and outlier rejection.

The energy is

    E = w_sparse * sum |D(x_i) - x_j|^2
      + w_dense  * sum_r sum_i C_i (1 - rho_r(D(x_i), D(n_i), x_i, n_i))^2
      + w_reg    * sum_j sum_{k in N(j)} |R_j (g_k - g_j) + g_j + t_j - (g_k + t_k)|^2

and is minimised over per-node axis-angle increments and translations
(6 parameters per node, rotation updated as ``R <- exp(dw) R``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.spatial.transform import Rotation

from . import _kernels as kn
from .defgraph import DeformationGraph, deform_points, skinning_weights_batch
from .errors import DivergedError, NoInliersError
from .geometry import CameraView
from .photometric import PatchSampler, Template

logger = logging.getLogger(__name__)


@dataclass
class EnergyWeights:
    w_sparse: float = 1000.0
    w_dense: float = 0.01
    w_reg: float = 10.0

    def __post_init__(self):
        if min(self.w_sparse, self.w_dense, self.w_reg) < 0:
            raise ValueError("weights must be nonnegative")
        if max(self.w_sparse, self.w_dense, self.w_reg) <= 0:
            raise ValueError("at least one weight must be positive")


@dataclass
class SparseMatches:
    """3D-3D correspondences: canonical point -> target point on a keypoint ray."""

    x_canonical: np.ndarray
    x_target: np.ndarray
    track_id: np.ndarray

    def __post_init__(self):
        self.x_canonical = np.asarray(self.x_canonical, dtype=np.float64).reshape(-1, 3)
        self.x_target = np.asarray(self.x_target, dtype=np.float64).reshape(-1, 3)
        self.track_id = np.asarray(self.track_id, dtype=np.int64).reshape(-1)
        if not (len(self.x_canonical) == len(self.x_target) == len(self.track_id)):
            raise ValueError("match arrays differ in length")
        if not (np.all(np.isfinite(self.x_canonical)) and np.all(np.isfinite(self.x_target))):
            raise ValueError("match points must be finite")
        if len(np.unique(self.track_id)) != len(self.track_id):
            raise ValueError("track ids must be unique")

    def __len__(self):
        return len(self.track_id)

    def subset(self, keep: np.ndarray) -> "SparseMatches":
        return SparseMatches(self.x_canonical[keep], self.x_target[keep], self.track_id[keep])

    @classmethod
    def empty(cls) -> "SparseMatches":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))


@dataclass
class DenseTerm:
    """Photometric term: canonical template seen by reference views vs one source view."""

    template: Template
    refs: list
    src: CameraView
    mask: np.ndarray
    level: int = 0
    sampler: PatchSampler = field(default_factory=PatchSampler)
    # reference windows per (ref index, level); they depend only on the
    # template and the reference views, so rounds of one solve share them
    windows: dict = field(default_factory=dict)


@dataclass
class SolveReport:
    iterations: int = 0
    final_energy: float = 0.0
    energies: dict = field(default_factory=dict)
    rejected_sparse: int = 0
    rejected_dense: int = 0
    trajectories: list = field(default_factory=list)
    cut_sequence: list = field(default_factory=list)
    termination: str = ""

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_energy": self.final_energy,
            "energies": dict(self.energies),
            "rejected_sparse": self.rejected_sparse,
            "rejected_dense": self.rejected_dense,
            "trajectories": [list(map(float, t)) for t in self.trajectories],
            "cut_sequence": [list(map(float, c)) for c in self.cut_sequence],
            "termination": self.termination,
        }


def _skew(v: np.ndarray) -> np.ndarray:
    """Batched cross-product matrices, (..., 3) -> (..., 3, 3)."""
    z = np.zeros(v.shape[:-1])
    return np.stack(
        [
            np.stack([z, -v[..., 2], v[..., 1]], -1),
            np.stack([v[..., 2], z, -v[..., 0]], -1),
            np.stack([-v[..., 1], v[..., 0], z], -1),
        ],
        -2,
    )


def apply_increment(graph: DeformationGraph, delta: np.ndarray) -> DeformationGraph:
    d = delta.reshape(-1, 6)
    R = Rotation.from_rotvec(d[:, :3]).as_matrix() @ graph.R
    out = graph.with_transforms(R, graph.t + d[:, 3:])
    out.orthonormalize()
    return out


class JointProblem:
    """Stacked, weighted residual vector of the joint energy and its Jacobian.

    Skinning weights are fixed at construction (they depend only on the rest
    positions), so any graph sharing the same nodes can be evaluated.
    """

    def __init__(
        self,
        graph: DeformationGraph,
        matches: SparseMatches | None,
        weights: EnergyWeights,
        dense: DenseTerm | None = None,
        fd_step: float = 1e-4,
    ):
        self.weights = weights
        self.matches = matches if matches is not None else SparseMatches.empty()
        self.dense = dense if (dense is not None and weights.w_dense > 0) else None
        self.fd_step = fd_step
        self.n_params = 6 * graph.num_nodes
        self.edges = graph.edges()
        if len(self.matches):
            self.m_idx, self.m_w = skinning_weights_batch(self.matches.x_canonical, graph)
        if self.dense is not None:
            self.t_idx, self.t_w = skinning_weights_batch(self.dense.template.points, graph)

    # residuals -----------------------------------------------------------

    def sparse_residuals(self, graph):
        if not len(self.matches):
            return np.zeros((0, 3))
        xh = deform_points(self.matches.x_canonical, graph, (self.m_idx, self.m_w))
        return xh - self.matches.x_target

    def reg_residuals(self, graph):
        if len(self.edges) == 0:
            return np.zeros((0, 3))
        j, q = self.edges[:, 0], self.edges[:, 1]
        g = graph.g
        return np.einsum("eab,eb->ea", graph.R[j], g[q] - g[j]) + g[j] + graph.t[j] - (g[q] + graph.t[q])

    def _deformed_template(self, graph):
        tpl = self.dense.template
        xh = deform_points(tpl.points, graph, (self.t_idx, self.t_w))
        mh = np.einsum("nk,nkij,nj->ni", self.t_w, graph.R[self.t_idx], tpl.normals)
        return xh, mh

    def _windows(self, r):
        d = self.dense
        key = (r, d.level)
        if key not in d.windows:
            ref = d.refs[r]
            d.windows[key] = kn.ref_windows_batch(
                ref.image_at(d.level), np.ascontiguousarray(ref.K_at(d.level)), ref.R, ref.t,
                d.template.points, d.sampler.radius, d.sampler.sigma_color, d.sampler.sigma_spatial,
            )
        return d.windows[key]

    def _ncc(self, r, xh, mh, with_grad):
        d = self.dense
        lv = d.level
        ref = d.refs[r]
        args = (
            np.ascontiguousarray(ref.K_at(lv)), ref.R, ref.t,
            d.src.image_at(lv), np.ascontiguousarray(d.src.K_at(lv)), d.src.R, d.src.t,
            d.template.points, d.template.normals, np.ascontiguousarray(xh), np.ascontiguousarray(mh),
            d.sampler.radius, *self._windows(r), np.ascontiguousarray(d.mask, dtype=np.bool_),
        )
        if with_grad:
            return kn.ncc_batch_fd_pre(*args, self.fd_step)
        rho, st = kn.ncc_batch_pre(*args)
        return rho, None, st

    def dense_residuals(self, graph, with_grad=False):
        """(n_refs, n_points) residuals C_i (1 - rho), out-of-bounds flags, gradients."""
        xh, mh = self._deformed_template(graph)
        n = len(self.dense.template)
        res = np.zeros((len(self.dense.refs), n))
        oob = np.zeros_like(res, dtype=bool)
        grads = []
        for r in range(len(self.dense.refs)):
            rho, grad, st = self._ncc(r, xh, mh, with_grad)
            bad = (st == kn.OUT_OF_BOUNDS) | (st == kn.DEGENERATE)
            live = self.dense.mask & ~bad
            res[r] = np.where(live, 1.0 - rho, 0.0)
            oob[r] = bad
            if with_grad:
                grads.append(np.where(live[:, None], grad, 0.0))
        return res, oob, grads

    def evaluate(self, graph):
        """Weighted residual vector and unweighted term energies."""
        ws, wd, wr = self.weights.w_sparse, self.weights.w_dense, self.weights.w_reg
        rs = self.sparse_residuals(graph)
        rr = self.reg_residuals(graph)
        parts = [math.sqrt(ws) * rs.ravel(), math.sqrt(wr) * rr.ravel()]
        e_dense = 0.0
        if self.dense is not None:
            rd, _, _ = self.dense_residuals(graph)
            parts.append(math.sqrt(wd) * rd.ravel())
            e_dense = float(np.sum(rd * rd))
        r = np.concatenate(parts)
        terms = {
            "sparse": float(np.sum(rs * rs)),
            "dense": e_dense,
            "reg": float(np.sum(rr * rr)),
        }
        return r, terms

    # jacobian ------------------------------------------------------------

    def jacobian(self, graph) -> sp.csr_matrix:
        blocks_r, blocks_c, blocks_v = [], [], []
        row0 = 0
        ws, wd, wr = self.weights.w_sparse, self.weights.w_dense, self.weights.w_reg

        nm = len(self.matches)
        if nm:
            idx, w = self.m_idx, self.m_w
            local = np.einsum("nkab,nkb->nka", graph.R[idx], self.matches.x_canonical[:, None, :] - graph.g[idx])
            J = np.zeros((nm, idx.shape[1], 3, 6))
            J[..., :3] = -w[..., None, None] * _skew(local)
            J[..., 3:] = w[..., None, None] * np.eye(3)
            J *= math.sqrt(ws)
            self._push(blocks_r, blocks_c, blocks_v, J, idx, row0)
            row0 += 3 * nm

        ne = len(self.edges)
        if ne:
            j, q = self.edges[:, 0], self.edges[:, 1]
            local = np.einsum("eab,eb->ea", graph.R[j], graph.g[q] - graph.g[j])
            J = np.zeros((ne, 2, 3, 6))
            J[:, 0, :, :3] = -_skew(local)
            J[:, 0, :, 3:] = np.eye(3)
            J[:, 1, :, 3:] = -np.eye(3)
            J *= math.sqrt(wr)
            self._push(blocks_r, blocks_c, blocks_v, J, np.stack([j, q], 1), row0)
            row0 += 3 * ne

        if self.dense is not None:
            tpl = self.dense.template
            idx, w = self.t_idx, self.t_w
            xh, mh = self._deformed_template(graph)
            _, _, grads = self.dense_residuals(graph, with_grad=True)
            local_x = np.einsum("nkab,nkb->nka", graph.R[idx], tpl.points[:, None, :] - graph.g[idx])
            local_n = np.einsum("nkab,nb->nka", graph.R[idx], tpl.normals)
            # d xh / d(w, t) and d mh / d(w) per skinning node
            dx = np.zeros((len(tpl), idx.shape[1], 3, 6))
            dx[..., :3] = -w[..., None, None] * _skew(local_x)
            dx[..., 3:] = w[..., None, None] * np.eye(3)
            dm = np.zeros_like(dx)
            dm[..., :3] = -w[..., None, None] * _skew(local_n)
            for grad in grads:
                # residual = sqrt(wd) (1 - rho)  ->  d/dtheta = -sqrt(wd) drho
                gx, gm = grad[:, :3], grad[:, 3:]
                J = -math.sqrt(wd) * (np.einsum("na,nkab->nkb", gx, dx) + np.einsum("na,nkab->nkb", gm, dm))
                self._push(blocks_r, blocks_c, blocks_v, J[:, :, None, :], idx, row0)
                row0 += len(tpl)

        if not blocks_r:
            return sp.csr_matrix((row0, self.n_params))
        rows = np.concatenate(blocks_r)
        cols = np.concatenate(blocks_c)
        vals = np.concatenate(blocks_v)
        return sp.csr_matrix((vals, (rows, cols)), shape=(row0, self.n_params))

    @staticmethod
    def _push(br, bc, bv, J, nodes, row0):
        """Scatter dense blocks J (n, k, d, 6) owned by ``nodes`` (n, k) into COO lists."""
        n, k, d, _ = J.shape
        rows = row0 + np.arange(n)[:, None, None, None] * d + np.arange(d)[None, None, :, None]
        cols = nodes[:, :, None, None] * 6 + np.arange(6)[None, None, None, :]
        rows, cols = np.broadcast_arrays(rows, cols)
        br.append(rows.ravel())
        bc.append(cols.ravel())
        bv.append(J.ravel())


def energy(graph, matches, weights: EnergyWeights, dense: DenseTerm | None = None):
    """``(E, E_sparse, E_dense, E_reg)``; the term energies are unweighted."""
    prob = JointProblem(graph, matches, weights, dense)
    _, terms = prob.evaluate(graph)
    e_dense = terms["dense"] if prob.dense is not None else 0.0
    if dense is not None and prob.dense is None:
        # w_dense == 0: still report the unweighted photometric energy
        probe = JointProblem(graph, None, EnergyWeights(0.0, 1.0, 0.0), dense)
        e_dense = probe.evaluate(graph)[1]["dense"]
    total = weights.w_sparse * terms["sparse"] + weights.w_dense * e_dense + weights.w_reg * terms["reg"]
    return total, terms["sparse"], e_dense, terms["reg"]


def lm_solve(
    graph: DeformationGraph,
    problem: JointProblem,
    max_iters: int = 50,
    rel_tol: float = 1e-6,
    grad_tol: float = 1e-8,
    lambda0: float = 1e-3,
):
    """Levenberg-Marquardt with Marquardt (diagonal) damping.

    Accepted steps never increase the energy. Returns ``(graph, SolveReport)``.
    """
    report = SolveReport()
    r, terms = problem.evaluate(graph)
    e = float(r @ r)
    if not np.isfinite(e):
        raise DivergedError("diverged", graph)
    trajectory = [e]
    lam = lambda0
    report.termination = "max_iters"
    if e == 0.0:
        report.termination = "zero residual"
        max_iters = 0
    it = 0
    while it < max_iters:
        J = problem.jacobian(graph)
        grad = J.T @ r
        if np.max(np.abs(grad), initial=0.0) < grad_tol:
            report.termination = "gradient"
            break
        A = (J.T @ J).toarray()
        diag = np.maximum(np.diag(A).copy(), 1e-9 * max(1.0, np.max(np.diag(A), initial=0.0)))
        accepted = False
        while lam < 1e16:
            try:
                cho = scipy.linalg.cho_factor(A + lam * np.diag(diag))
                step = -scipy.linalg.cho_solve(cho, grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = apply_increment(graph, step)
            r_new, terms_new = problem.evaluate(cand)
            e_new = float(r_new @ r_new)
            if not np.isfinite(e_new):
                raise DivergedError("diverged", graph)
            if e_new < e:
                accepted = True
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
        it += 1
        if not accepted:
            report.termination = "no decrease"
            break
        rel = (e - e_new) / e
        graph, r, e, terms = cand, r_new, e_new, terms_new
        trajectory.append(e)
        if e == 0.0 or rel < rel_tol:
            report.termination = "relative change"
            break
    report.iterations = it
    report.final_energy = e
    report.energies = terms
    report.trajectories = [trajectory]
    return graph, report


def filter_sparse(
    graph: DeformationGraph,
    matches: SparseMatches,
    d_max: float,
    tau: float,
    weights: EnergyWeights | None = None,
    max_iters: int = 50,
):
    """Iterative rejection of sparse matches with the largest residuals.

    Each round solves the sparse + regulariser energy from ``graph``, stops
    when every residual is below ``d_max`` and otherwise keeps only matches
    with residual below ``max(d_max, tau * e_max)``.

    Returns:
        ``(retained matches, solved graph, SolveReport)``.

    Raises:
        NoInliersError: if no match survives.
    """
    if d_max <= 0 or not 0 < tau < 1:
        raise ValueError("need d_max > 0 and tau in (0, 1)")
    weights = weights or EnergyWeights()
    sparse_weights = EnergyWeights(max(weights.w_sparse, 1e-12), 0.0, weights.w_reg)
    n0 = len(matches)
    current = matches
    report = SolveReport()
    cuts = []
    while True:
        if len(current) == 0:
            raise NoInliersError("no inliers")
        problem = JointProblem(graph, current, sparse_weights)
        solved, rep = lm_solve(graph, problem, max_iters=max_iters)
        report.iterations += rep.iterations
        report.trajectories.extend(rep.trajectories)
        resid = np.linalg.norm(problem.sparse_residuals(solved), axis=1)
        e_max = float(resid.max())
        if e_max < d_max:
            break
        d_cut = max(d_max, tau * e_max)
        cuts.append(d_cut)
        current = current.subset(resid < d_cut)
    report.cut_sequence = [cuts]
    report.rejected_sparse = n0 - len(current)
    report.final_energy = rep.final_energy
    report.energies = rep.energies
    return current, solved, report


def solve_joint(
    graph: DeformationGraph,
    matches: SparseMatches | None,
    template: Template,
    refs: list,
    src: CameraView,
    weights: EnergyWeights | None = None,
    rho_max: float = 0.9,
    tau: float = 0.9,
    levels: int = 3,
    sampler: PatchSampler | None = None,
    max_iters: int = 50,
    max_rounds: int = 25,
):
    """Coarse-to-fine joint solve with photometric outlier masking.

    Per pyramid level (coarse to fine) the mask is reset to ones and the cut
    to ``2 tau``; the energy is solved, masked residuals ``r_p`` computed, and
    points with ``r_p`` above the cut are masked until ``max r_p < rho_max``.
    On the finest level the last solution is kept regardless.

    Returns:
        ``(graph, mask, SolveReport)``.
    """
    if not 0 < rho_max < 2 or not 0 < tau < 1 or levels < 1:
        raise ValueError("need rho_max in (0, 2), tau in (0, 1), levels >= 1")
    weights = weights or EnergyWeights()
    sampler = sampler or PatchSampler()
    report = SolveReport()
    mask = np.ones(len(template), dtype=bool)

    if weights.w_dense == 0.0 or len(template) == 0:
        problem = JointProblem(graph, matches, weights)
        out, rep = lm_solve(graph, problem, max_iters=max_iters)
        rep.rejected_dense = 0
        return out, mask, rep

    current = graph
    windows: dict = {}
    for m in range(1, levels + 1):
        level = levels - m
        rho_cut = tau * 2.0  # tau * (1 - NCC_min), NCC_min = -1
        mask = np.ones(len(template), dtype=bool)
        cuts = [rho_cut]
        for rnd in range(max_rounds):
            dense = DenseTerm(template, refs, src, mask, level, sampler, windows)
            problem = JointProblem(current, matches, weights, dense)
            solved, rep = lm_solve(current, problem, max_iters=max_iters)
            report.iterations += rep.iterations
            report.trajectories.extend(rep.trajectories)
            res, oob, _ = problem.dense_residuals(solved)
            r_p = res.max(axis=0)
            e_max = float(r_p.max(initial=0.0))
            if e_max < rho_max:
                current = solved
                break
            if m == levels:
                current = solved
            newly = (r_p > rho_cut) | oob.all(axis=0)
            if not np.any(newly & mask) and rho_cut <= rho_max:
                # nothing left to reject at the floor of the cut
                current = solved
                break
            mask = mask & ~newly
            rho_cut = max(rho_max, tau * rho_cut)
            cuts.append(rho_cut)
        else:
            current = solved
        report.cut_sequence.append(cuts)
        logger.debug("level %d: %d rounds, mask %d/%d", level, rnd + 1, mask.sum(), len(mask))
    final = JointProblem(current, matches, weights, DenseTerm(template, refs, src, mask, 0, sampler, windows))
    r, terms = final.evaluate(current)
    report.final_energy = float(r @ r)
    report.energies = terms
    report.rejected_dense = int((~mask).sum())
    report.termination = "levels"
    return current, mask, report
