import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from dmpc.errors import DimensionMismatch, EpsOutOfRange, ValidationError
from dmpc.plant import (
    AgentPlant,
    CoupledConstraint,
    RankDeficient,
    condense_cost,
    condense_coupling,
    local_feasible_polytope,
    polytope_template,
    predict,
    terminal_levels,
    terminal_normals,
    tightened_rhs,
)

from conftest import scalar_plant


def bench_plant(bench_cfg, **kw):
    a = bench_cfg.agents[0]
    return AgentPlant.create(a.A, a.B, a.x_lo, a.x_hi, a.u_lo, a.u_hi, a.Q, a.R, a.P, a.K, **kw)


def test_predict_identity_system():
    pl = AgentPlant.create(np.eye(2), np.zeros((2, 1)), [-1, -1], [1, 1], [-1], [1], np.eye(2), [[1]],
                           np.eye(2), [[0, 0]], check=False)
    traj = predict(pl, [0.3, -0.2], np.arange(5.0))
    np.testing.assert_array_equal(traj, np.tile([0.3, -0.2], (6, 1)))


def test_predict_benchmark_hand_values(bench_cfg):
    pl = bench_plant(bench_cfg)
    np.testing.assert_allclose(predict(pl, [0, 0], [0.1] * 8)[1], [0.03, 0.0], atol=1e-15)
    x0 = np.array([-0.2264, -0.3981])
    np.testing.assert_allclose(predict(pl, x0, np.zeros(8))[1], pl.A @ x0, atol=1e-15)


def test_predict_dimension_errors(bench_cfg):
    pl = bench_plant(bench_cfg)
    with pytest.raises(DimensionMismatch):
        predict(pl, [0.0], [0.0])


def test_benchmark_plant_satisfies_terminal_decrease(bench_cfg):
    pl = bench_plant(bench_cfg)
    ev = np.linalg.eigvalsh(pl.terminal_decrease_matrix())
    assert ev.max() < 0
    # the benchmark P equals twice the Riccati solution (same gain)
    X = sla.solve_discrete_are(pl.A, pl.B, pl.Q, pl.R)
    np.testing.assert_allclose(pl.P, 2 * X, rtol=2e-4)
    K = -np.linalg.solve(pl.R + pl.B.T @ X @ pl.B, pl.B.T @ X @ pl.A)
    np.testing.assert_allclose(pl.K, K, atol=2e-4)


def test_plant_validation():
    with pytest.raises(ValidationError):
        AgentPlant.create([[1.0]], [[1.0]], [1], [-1], [-1], [1], [[1]], [[1]], [[1]], [[0]])
    with pytest.raises(ValidationError):
        AgentPlant.create([[1.0]], [[1.0]], [-1], [1], [-1], [1], [[1]], [[0]], [[1]], [[0]])
    with pytest.raises(DimensionMismatch):
        AgentPlant.create([[1.0]], [[1.0, 2.0]], [-1], [1], [-1], [1], [[1]], [[1]], [[1]], [[0]])


def test_polytope_single_step_input_box():
    pl = AgentPlant.create([[0.9]], [[1.0]], [-np.inf], [np.inf], [-0.3], [0.3], [[1]], [[1]], [[1]], [[0]],
                           check=False)
    poly = local_feasible_polytope(pl, [0.2], 1)
    np.testing.assert_array_equal(poly.E, [[1.0], [-1.0]])
    np.testing.assert_array_equal(poly.e, [0.3, 0.3])


def test_polytope_contains_zero_at_origin(bench_problem):
    for tpl in bench_problem.templates:
        assert tpl.at(np.zeros(2)).contains(np.zeros(8))


def test_polytope_scalar_state_row():
    pl = AgentPlant.create([[0.5]], [[1.0]], [-1], [1], [-np.inf], [np.inf], [[1]], [[1]], [[1]], [[0]],
                           check=False)
    x0 = 0.6
    poly = local_feasible_polytope(pl, [x0], 2)
    # x(1) = 0.5 x0 + u(0); without a terminal set x(2) = 0.25 x0 + 0.5 u(0) + u(1) is boxed too
    np.testing.assert_allclose(poly.E[:2], [[1.0, 0.0], [-1.0, 0.0]])
    np.testing.assert_allclose(poly.e[:2], [1 - 0.5 * x0, 1 + 0.5 * x0])
    np.testing.assert_allclose(poly.E[2:], [[0.5, 1.0], [-0.5, -1.0]])
    np.testing.assert_allclose(poly.e[2:], [1 - 0.25 * x0, 1 + 0.25 * x0])


def test_relaxed_template_bounds_final_state(bench_cfg):
    pl = bench_plant(bench_cfg, eta=0.05, eta_f=0.045)
    full = polytope_template(pl, 8)
    relaxed = polytope_template(pl, 8, terminal=False)
    # 16 inputs, 7 states x 4 rows, then 16 terminal rows vs 4 extra box rows
    assert full.E.shape[0] == 16 + 28 + 16
    assert relaxed.E.shape[0] == 16 + 32


def test_terminal_level_single_halfspace():
    P = np.array([[2.0, 0.3], [0.3, 1.0]])
    c, d = np.array([1.0, -2.0]), 0.7
    eta_oracle = d ** 2 / (c @ np.linalg.solve(P, c))
    pl = AgentPlant.create([[0.5, 0], [0, 0.5]], [[1.0], [0.0]], [-np.inf] * 2, [np.inf] * 2, [-np.inf], [np.inf],
                           np.eye(2), [[1]], P, [[0.0, 0.0]], check=False)
    cc = CoupledConstraint([c.reshape(1, 2)], [np.zeros((1, 1))])
    # one agent, eps tiny: share = (1 - eps N) ~ 1, so scale d in by hand
    eps, N = 1e-3, 1
    eta, eta_f = terminal_levels(pl, cc, eps, N, 1)
    share = 1 - eps * N
    np.testing.assert_allclose(eta, share ** 2 / (c @ np.linalg.solve(P, c)), rtol=1e-12)
    assert eta_f == pytest.approx(0.9 * eta)
    # a support-function check by sampling the boundary
    L = np.linalg.cholesky(P)
    th = np.linspace(0, 2 * np.pi, 20001)
    w = np.vstack([np.cos(th), np.sin(th)])
    xs = np.linalg.solve(L.T, w) * np.sqrt(eta_oracle)
    assert (c @ xs).max() == pytest.approx(d, rel=1e-6)


def test_benchmark_terminal_level_rowwise(bench_cfg):
    pl = bench_plant(bench_cfg)
    l, N, eps = 4, 8, 0.02
    cc = CoupledConstraint([np.zeros((1, 2))] * l, [np.array([[1.25]])] * l)
    eta, eta_f = terminal_levels(pl, cc, eps, N, l)
    Pinv = np.linalg.inv(pl.P)
    K = pl.K[0]
    candidates = [0.3 ** 2 / (K @ Pinv @ K)]
    candidates += [1.0 / Pinv[0, 0], 0.64 ** 2 / Pinv[1, 1]]
    share = (1 - eps * N * l) / l
    c = 1.25 * K
    candidates.append(share ** 2 / (c @ Pinv @ c))
    assert eta == pytest.approx(min(candidates), rel=1e-12)
    assert eta_f / eta == pytest.approx(0.9)


def test_terminal_invariance_random_points(bench_problem, rng):
    pl = bench_problem.plants[0]
    L = np.linalg.cholesky(pl.P)
    for _ in range(100):
        w = rng.standard_normal(2)
        w *= rng.uniform() / np.linalg.norm(w)
        x = np.linalg.solve(L.T, w) * np.sqrt(pl.eta_f)
        assert pl.terminal_cost(x) <= pl.eta_f * (1 + 1e-12)
        assert pl.terminal_cost(pl.A_K @ x) <= pl.eta_f
        assert pl.terminal_cost(pl.A_K @ x) - pl.terminal_cost(x) <= -pl.stage_cost(x, pl.K @ x) + 1e-12


def test_terminal_polygon_inside_outer_level(bench_problem):
    pl = bench_problem.plants[0]
    tpl = polytope_template(pl, 1)
    normals = terminal_normals(pl)
    assert normals.shape == (16, 2)
    # vertices of the tangent polygon sit at level eta_f / cos^2(pi/16)
    L = np.linalg.cholesky(pl.P)
    th = np.pi / 16 + 2 * np.pi * np.arange(16) / 16
    v = np.vstack([np.cos(th), np.sin(th)]) * np.sqrt(pl.eta_f) / np.cos(np.pi / 16)
    verts = np.linalg.solve(L.T, v).T
    levels = np.einsum("ij,jk,ik->i", verts, pl.P, verts)
    np.testing.assert_allclose(levels, pl.eta_f / np.cos(np.pi / 16) ** 2, rtol=1e-10)
    assert levels.max() < pl.eta
    assert tpl.E.shape[0] == 2 + 16


def test_tightened_rhs_layout():
    b = tightened_rhs(0.02, 8, 4, 2)
    assert b.shape == (16,)
    for s in range(8):
        np.testing.assert_array_equal(b[2 * s:2 * s + 2], 1 - 0.02 * 4 * (s + 1))


def test_large_eps_is_out_of_range(bench_problem):
    cc = CoupledConstraint([np.zeros((1, 2))] * 4, [np.array([[1.25]])] * 4)
    with pytest.raises(EpsOutOfRange) as info:
        condense_coupling(bench_problem.plants, cc, 8, 0.1)
    assert "0.03125" in str(info.value)


def test_condense_one_step_scalar():
    pl = scalar_plant()
    cc = CoupledConstraint([np.zeros((1, 1))] * 2, [np.array([[0.7]])] * 2)
    cond = condense_coupling([pl, pl], cc, 1, 0.1)
    np.testing.assert_array_equal(cond.F[0], [[0.0]])
    np.testing.assert_array_equal(cond.G[0], [[0.7]])
    np.testing.assert_allclose(cond.b_eps, [1 - 0.1 * 2])


def test_condense_two_step_chain():
    pl = AgentPlant.create([[1.0]], [[1.0]], [-5], [5], [-1], [1], [[1]], [[1]], [[1]], [[0]], check=False)
    cc = CoupledConstraint([np.array([[1.0]])], [np.zeros((1, 1))])
    with pytest.raises(RankDeficient):
        condense_coupling([pl], cc, 2, 0.1)
    cond = condense_coupling([pl], cc, 2, 0.1, check_rank=False)
    np.testing.assert_array_equal(cond.G[0][1], [1.0, 0.0])
    np.testing.assert_array_equal(cond.F[0].ravel(), [1.0, 1.0])


def test_condensation_matches_rollout(bench_problem, rng):
    cc = CoupledConstraint([np.array([[0.4, -0.2]])] * 4, [np.array([[1.25]])] * 4)
    cond = condense_coupling(bench_problem.plants, cc, 8, 0.02)
    for _ in range(100):
        i = int(rng.integers(4))
        x0 = rng.uniform(-1, 1, 2)
        u = rng.uniform(-1, 1, 8)
        traj = predict(bench_problem.plants[i], x0, u)
        direct = np.array([cc.phi_x[i] @ traj[s] + cc.phi_u[i] @ u[s:s + 1] for s in range(8)]).ravel()
        np.testing.assert_allclose(cond.f(i, x0, u), direct, atol=1e-10)


def test_condensed_cost_matches_direct_sum(bench_problem, rng):
    pl = bench_problem.plants[0]
    cost = condense_cost(pl, 8)
    for _ in range(20):
        x0 = rng.uniform(-1, 1, 2)
        u = rng.uniform(-0.3, 0.3, 8)
        traj = predict(pl, x0, u)
        direct = sum(pl.stage_cost(traj[s], u[s:s + 1]) for s in range(8)) + pl.terminal_cost(traj[8])
        assert cost.value(x0, u) == pytest.approx(direct, rel=1e-12)
    m_J, L_J = cost.bounds
    assert 0 < m_J <= L_J
    assert m_J >= 2 * pl.R[0, 0] - 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.floats(0.1, 0.99), st.floats(0.1, 2.0))
def test_condensed_hessian_bounds_respect_input_weight(N, a, r):
    pl = scalar_plant(a=a, r=r)
    H = condense_cost(pl, N).H
    ev = np.linalg.eigvalsh(H)
    # H = 2 (Su' Qbar Su + R) >= 2 R
    assert ev[0] >= 2 * r - 1e-9
    np.testing.assert_allclose(H, H.T, atol=0)
