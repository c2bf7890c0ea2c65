import math

import numpy as np
import pytest
from helpers import outlier_instance, random_graph, random_rotations

from nrmvs.defgraph import DeformationGraph, deform_points, regularizer_residuals, sample_nodes
from nrmvs.errors import NoInliersError
from nrmvs.geometry import unproject
from nrmvs.optimize import (
    DenseTerm,
    EnergyWeights,
    JointProblem,
    SparseMatches,
    apply_increment,
    energy,
    filter_sparse,
    lm_solve,
    solve_joint,
)
from nrmvs.photometric import PatchSampler, Template
from nrmvs.syntheval import _intersect, make_scene, render_all


def _matches(rng, graph, n=40, noise=0.05):
    xc = rng.uniform(-1, 1, (n, 3))
    return SparseMatches(xc, xc + rng.normal(scale=noise, size=(n, 3)), np.arange(n))


def _fd_jacobian(problem, graph, step=1e-6):
    """Central differences of the weighted residual vector."""
    r0, _ = problem.evaluate(graph)
    J = np.zeros((len(r0), problem.n_params))
    for p in range(problem.n_params):
        d = np.zeros(problem.n_params)
        d[p] = step
        rp, _ = problem.evaluate(apply_increment(graph, d))
        rm, _ = problem.evaluate(apply_increment(graph, -d))
        J[:, p] = (rp - rm) / (2 * step)
    return J


# energy -----------------------------------------------------------------


def test_weights_validation():
    with pytest.raises(ValueError):
        EnergyWeights(-1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        EnergyWeights(0.0, 0.0, 0.0)


def test_match_validation():
    with pytest.raises(ValueError):
        SparseMatches(np.zeros((2, 3)), np.zeros((2, 3)), [1, 1])
    with pytest.raises(ValueError):
        SparseMatches(np.zeros((2, 3)), np.full((2, 3), np.nan), [0, 1])
    with pytest.raises(ValueError):
        SparseMatches(np.zeros((2, 3)), np.zeros((3, 3)), [0, 1])


def test_identity_graph_with_fixed_targets_has_zero_energy():
    rng = np.random.default_rng(0)
    graph = random_graph(rng).identity_like()
    xc = rng.uniform(-1, 1, (30, 3))
    E, Es, Ed, Er = energy(graph, SparseMatches(xc, xc, np.arange(30)), EnergyWeights())
    assert Es == 0.0 and Er == 0.0 and Ed == 0.0 and E == 0.0


def test_energy_is_linear_in_weights():
    rng = np.random.default_rng(1)
    graph = random_graph(rng)
    m = _matches(rng, graph)
    E1, Es1, Ed1, Er1 = energy(graph, m, EnergyWeights(1000.0, 0.01, 10.0))
    E2, Es2, Ed2, Er2 = energy(graph, m, EnergyWeights(2000.0, 0.01, 10.0))
    assert Es1 == Es2 and Er1 == Er2 and Ed1 == Ed2
    assert math.isclose(E2 - E1, 1000.0 * Es1, rel_tol=1e-12)


def test_energy_matches_direct_summation():
    rng = np.random.default_rng(2)
    for _ in range(5):
        graph = random_graph(rng)
        m = _matches(rng, graph)
        w = EnergyWeights(rng.uniform(1, 100), 0.01, rng.uniform(1, 100))
        E, Es, _, Er = energy(graph, m, w)
        es = sum(float(np.sum((deform_points(m.x_canonical[i : i + 1], graph)[0] - m.x_target[i]) ** 2)) for i in range(len(m)))
        er = 0.0
        for j in range(graph.num_nodes):
            for q in graph.neighbors[j]:
                d = graph.R[j] @ (graph.g[q] - graph.g[j]) + graph.g[j] + graph.t[j] - (graph.g[q] + graph.t[q])
                er += float(d @ d)
        assert math.isclose(Es, es, rel_tol=1e-10)
        assert math.isclose(Er, er, rel_tol=1e-10)
        assert math.isclose(E, w.w_sparse * es + w.w_reg * er, rel_tol=1e-10)


def test_regularizer_residuals_agree_with_problem():
    rng = np.random.default_rng(3)
    graph = random_graph(rng)
    prob = JointProblem(graph, None, EnergyWeights())
    assert np.allclose(np.sort(prob.reg_residuals(graph).ravel()), np.sort(regularizer_residuals(graph).ravel()))


def test_energy_terms_invariant_under_global_rigid_transform():
    rng = np.random.default_rng(4)
    graph = random_graph(rng)
    m = _matches(rng, graph)
    _, Es, _, Er = energy(graph, m, EnergyWeights())
    Q = random_rotations(rng, 1)[0]
    tau = rng.normal(size=3)
    # x -> Q x + tau on both frames: g' = Q g + tau, R' = Q R Q^T, t' = Q t
    g2 = graph.g @ Q.T + tau
    R2 = Q @ graph.R @ Q.T
    t2 = graph.t @ Q.T
    moved = DeformationGraph(g2, R2, t2, graph.neighbors, graph.k)
    m2 = SparseMatches(m.x_canonical @ Q.T + tau, m.x_target @ Q.T + tau, m.track_id)
    _, Es2, _, Er2 = energy(moved, m2, EnergyWeights())
    assert math.isclose(Es, Es2, rel_tol=1e-8)
    assert math.isclose(Er, Er2, rel_tol=1e-8)


# jacobian ---------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_sparse_and_reg_jacobian_match_central_differences(seed):
    rng = np.random.default_rng(seed)
    graph = random_graph(rng, n_nodes=8)
    prob = JointProblem(graph, _matches(rng, graph, n=25), EnergyWeights(1.0, 0.0, 1.0))
    J = prob.jacobian(graph).toarray()
    assert np.max(np.abs(J - _fd_jacobian(prob, graph))) < 1e-5


def test_jacobian_columns_of_unused_nodes_are_zero():
    rng = np.random.default_rng(7)
    g = np.vstack([rng.uniform(-1, 1, (6, 3)), 50.0 + rng.uniform(-0.1, 0.1, (1, 3))])
    # node 6 is far away: no match is skinned by it; drop its regularizer edges
    nb = [np.array([q for q in range(6) if q != j]) for j in range(6)] + [np.array([], dtype=np.int64)]
    graph = DeformationGraph.identity(g, nb, 4)
    prob = JointProblem(graph, _matches(rng, graph, n=20), EnergyWeights(1.0, 0.0, 1.0))
    J = prob.jacobian(graph).toarray()
    assert np.all(J[:, 36:42] == 0.0)
    assert np.any(J[:, :36] != 0.0)


def test_jacobian_sparsity_pattern_limited_to_skinning_nodes():
    rng = np.random.default_rng(8)
    graph = random_graph(rng, n_nodes=10)
    m = _matches(rng, graph, n=15)
    prob = JointProblem(graph, m, EnergyWeights(1.0, 0.0, 1e-30))
    J = prob.jacobian(graph).toarray()
    for i in range(len(m)):
        used = set(prob.m_idx[i])
        nz = {c // 6 for c in np.nonzero(np.any(J[3 * i : 3 * i + 3] != 0, axis=0))[0]}
        assert nz <= used


# lm_solve ---------------------------------------------------------------


def test_lm_zero_residual_returns_immediately():
    rng = np.random.default_rng(9)
    graph = random_graph(rng).identity_like()
    xc = rng.uniform(-1, 1, (10, 3))
    prob = JointProblem(graph, SparseMatches(xc, xc, np.arange(10)), EnergyWeights())
    out, rep = lm_solve(graph, prob)
    assert rep.iterations == 0
    assert np.array_equal(out.R, graph.R) and np.array_equal(out.t, graph.t)


@pytest.mark.parametrize("seed", range(3))
def test_lm_recovers_global_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    graph = random_graph(rng, n_nodes=8).identity_like()
    Q = random_rotations(rng, 1, max_angle=0.5)[0]
    tau = rng.normal(size=3) * 0.3
    xc = rng.uniform(-1, 1, (60, 3))
    m = SparseMatches(xc, xc @ Q.T + tau, np.arange(60))
    out, rep = lm_solve(graph, JointProblem(graph, m, EnergyWeights()), max_iters=100)
    assert np.allclose(out.R, Q[None], atol=1e-6)
    assert np.allclose(out.t, graph.g @ Q.T + tau - graph.g, atol=1e-6)
    traj = rep.trajectories[0]
    assert all(b <= a for a, b in zip(traj, traj[1:]))
    assert out.check_rotations(1e-8)


def test_lm_energy_non_increasing_on_noisy_problem():
    rng = np.random.default_rng(11)
    graph = random_graph(rng, n_nodes=12).identity_like()
    prob = JointProblem(graph, _matches(rng, graph, n=80, noise=0.2), EnergyWeights())
    _, rep = lm_solve(graph, prob)
    traj = rep.trajectories[0]
    assert len(traj) > 1 and all(b <= a for a, b in zip(traj, traj[1:]))
    assert rep.final_energy == traj[-1]


# filter_sparse ----------------------------------------------------------


def test_filter_sparse_rejects_bad_parameters():
    rng = np.random.default_rng(0)
    graph = random_graph(rng)
    m = _matches(rng, graph)
    with pytest.raises(ValueError):
        filter_sparse(graph, m, 0.0, 0.9)
    with pytest.raises(ValueError):
        filter_sparse(graph, m, 0.01, 1.0)


def test_filter_sparse_keeps_everything_when_already_consistent():
    rng = np.random.default_rng(12)
    graph = random_graph(rng).identity_like()
    xc = rng.uniform(-1, 1, (30, 3))
    m = SparseMatches(xc, xc + rng.normal(scale=1e-4, size=xc.shape), np.arange(30))
    kept, _, rep = filter_sparse(graph, m, 0.01, 0.9)
    assert np.array_equal(kept.track_id, m.track_id)
    assert rep.cut_sequence == [[]] and rep.rejected_sparse == 0


def test_filter_sparse_removes_single_gross_outlier():
    graph, m, _ = outlier_instance(0, n=21, outlier_fraction=0.0)
    dirs = np.array([0.0, 0.6, 0.8])
    xt = m.x_target.copy()
    xt[7] += 10 * 0.01 * dirs
    kept, solved, rep = filter_sparse(graph, SparseMatches(m.x_canonical, xt, m.track_id), 0.01, 0.9)
    assert 7 not in kept.track_id
    assert len(kept) == 20
    resid = np.linalg.norm(deform_points(kept.x_canonical, solved) - kept.x_target, axis=1)
    assert resid.max() < 0.01


def test_filter_sparse_cut_sequence_monotone_and_floored():
    graph, m, _ = outlier_instance(3, outlier_fraction=0.1)
    _, _, rep = filter_sparse(graph, m, 0.01, 0.9)
    cuts = rep.cut_sequence[0]
    assert cuts and all(c >= 0.01 for c in cuts)
    assert all(b <= a for a, b in zip(cuts, cuts[1:]))
    bound = math.ceil(math.log(cuts[0] / 0.9 / 0.01) / math.log(1 / 0.9)) + 1
    assert len(cuts) <= bound + 1


def test_filter_sparse_no_inliers():
    graph = random_graph(np.random.default_rng(0)).identity_like()
    with pytest.raises(NoInliersError):
        filter_sparse(graph, SparseMatches.empty(), 0.01, 0.9)


# solve_joint ------------------------------------------------------------


@pytest.fixture(scope="module")
def static_setup():
    scene = make_scene(2, width=160, height=120, seed=1, static=True)
    views, depths = render_all(scene, levels=3)
    a, b, _, hit = _intersect(scene, 0, 0)
    rr, cc = np.nonzero(hit)
    sel = (rr % 4 == 0) & (cc % 4 == 0)
    rr, cc = rr[sel], cc[sel]
    pts = np.array([unproject(views[0], np.array([c, r], dtype=float), depths[0][r, c]) for r, c in zip(rr, cc)])
    nrm = scene.normal(0, a[rr, cc], b[rr, cc])
    nrm = np.where(((nrm * (pts - views[0].center)).sum(1) > 0)[:, None], -nrm, nrm)
    tpl = Template(pts, nrm)
    graph, _, _ = sample_nodes(pts, 30, 4)
    return views, tpl, graph


def test_solve_joint_static_pair_stays_at_identity(static_setup):
    views, tpl, graph = static_setup
    rng = np.random.default_rng(0)
    idx = rng.choice(len(tpl), 40, replace=False)
    m = SparseMatches(tpl.points[idx], tpl.points[idx], np.arange(40))
    out, mask, rep = solve_joint(graph, m, tpl, views, views[1], EnergyWeights(), levels=3)
    disp = np.linalg.norm(deform_points(graph.g, out) - graph.g, axis=1)
    assert disp.max() < 1e-3
    assert mask.mean() >= 0.95
    assert len(mask) == len(tpl)
    assert out.check_rotations(1e-8)


def test_solve_joint_cut_schedule(static_setup):
    views, tpl, graph = static_setup
    # a wrong deformation forces rejections on every level
    bumped = graph.with_transforms(graph.R, graph.t + np.array([0.0, 0.0, 0.4]) * (graph.g[:, :1] > 0))
    m = SparseMatches(graph.g, deform_points(graph.g, bumped), np.arange(graph.num_nodes))
    _, mask, rep = solve_joint(graph, m, tpl, views, views[1], EnergyWeights(), rho_max=0.9, tau=0.9, levels=2)
    assert len(rep.cut_sequence) == 2
    for cuts in rep.cut_sequence:
        assert cuts[0] == pytest.approx(1.8)
        assert all(c >= 0.9 for c in cuts)
        assert all(b <= a for a, b in zip(cuts, cuts[1:]))
    # masked points contribute nothing afterwards
    prob = JointProblem(graph, None, EnergyWeights(0.0, 1.0, 0.0), DenseTerm(tpl, views, views[1], mask))
    res, _, _ = prob.dense_residuals(graph)
    assert np.all(res[:, ~mask] == 0.0)


def test_solve_joint_without_dense_equals_lm_solve(static_setup):
    _, tpl, graph = static_setup
    rng = np.random.default_rng(2)
    m = SparseMatches(graph.g, graph.g + rng.normal(scale=0.05, size=graph.g.shape), np.arange(graph.num_nodes))
    w = EnergyWeights(1000.0, 0.0, 10.0)
    a, mask, _ = solve_joint(graph, m, tpl, [], None, w)
    b, _ = lm_solve(graph, JointProblem(graph, m, w))
    assert np.allclose(a.R, b.R, atol=1e-12) and np.allclose(a.t, b.t, atol=1e-12)
    assert mask.all()


def test_solve_joint_parameter_checks(static_setup):
    views, tpl, graph = static_setup
    with pytest.raises(ValueError):
        solve_joint(graph, None, tpl, views, views[1], rho_max=2.5)
    with pytest.raises(ValueError):
        solve_joint(graph, None, tpl, views, views[1], levels=0)


def test_dense_jacobian_tracks_residual_changes(static_setup):
    """Directional derivative of the dense residuals agrees with the Jacobian."""
    views, tpl, graph = static_setup
    rng = np.random.default_rng(4)
    w = EnergyWeights(1e-12, 1.0, 1e-12)
    dense = DenseTerm(tpl, views[:1], views[1], np.ones(len(tpl), dtype=bool), 0, PatchSampler())
    prob = JointProblem(graph, None, w, dense)
    J = prob.jacobian(graph)
    n_reg = 3 * len(prob.edges)
    agree = 0
    for _ in range(5):
        d = rng.normal(size=prob.n_params)
        d *= 2e-3 / np.linalg.norm(d)
        rp, _ = prob.evaluate(apply_increment(graph, d))
        rm, _ = prob.evaluate(apply_increment(graph, -d))
        fd = ((rp - rm) / 2)[n_reg:]
        lin = (J @ d)[n_reg:]
        cos = fd @ lin / (np.linalg.norm(fd) * np.linalg.norm(lin))
        agree += cos > 0.9
    assert agree >= 4
