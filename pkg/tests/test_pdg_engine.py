import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmpc.contraction_cert import agent_metric
from dmpc.errors import ValidationError
from dmpc.graph import build_graph
from dmpc.oracle import centralized_qp, saddle_point
from dmpc.pdg_engine import (
    DenominatorNonpositive,
    IsolatedAgent,
    NotEpsFeasibleAtKbar,
    PdgParams,
    PdgState,
    ZeroInitialResidual,
    block_metric,
    initialize,
    pdg_iterate,
    run_algorithm1,
    select_stepsizes,
    single_agent_stepsize,
    stepsize_bounds,
    stopping_iteration,
)

from conftest import quad_subproblem

RING4 = [[0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0]]


def test_select_stepsizes_hand_example():
    p = select_stepsizes(1.0, 1.0, [2, 2], 0.5)
    assert p.beta == pytest.approx(0.99 * 1 / 4, rel=1e-14)
    alpha_max = 0.5 * 1 / (2 - 3.5 * p.beta * 2)
    assert p.alpha == pytest.approx(0.99 * alpha_max, rel=1e-14)
    assert p.tau == pytest.approx(math.sqrt(1 - 0.5 * p.alpha * p.beta * 2), rel=1e-14)


def test_select_stepsizes_errors():
    with pytest.raises(IsolatedAgent):
        select_stepsizes(1.0, 1.0, [1, 0], 0.5)
    with pytest.raises(ValidationError):
        select_stepsizes(2.0, 1.0, [1], 0.5)
    with pytest.raises(ValidationError):
        select_stepsizes(1.0, 1.0, [1], 1.0)
    # with margin 1 the denominator 2 s^2 - (3 + rho) s^2 / 2 stays positive; a
    # larger margin pushes beta over its bound and the denominator through zero
    with pytest.raises(DenominatorNonpositive):
        select_stepsizes(1.0, 1.0, [2], 0.5, margin=1.2)


@settings(max_examples=80, deadline=None)
@given(st.floats(0.01, 2.0), st.floats(1.0, 50.0), st.lists(st.integers(1, 6), min_size=1, max_size=6),
       st.floats(0.05, 0.95))
def test_selected_stepsizes_satisfy_bounds(s_lo, ratio, degrees, rho):
    s_hi = s_lo * ratio
    p = select_stepsizes(s_lo, s_hi, degrees, rho)
    for row in stepsize_bounds(p.alpha, p.beta, s_lo, s_hi, degrees, rho):
        assert row["beta_ok"] and row["alpha_ok"]
    assert 0 < p.tau < 1
    assert rho * p.alpha * p.beta * max(degrees) < 1


def test_benchmark_stepsizes(bench_problem):
    p = bench_problem.params
    lo, hi = bench_problem.sigma
    assert lo == pytest.approx(0.02711, abs=5e-5)
    assert hi == pytest.approx(0.6154, abs=5e-4)
    assert p.alpha == pytest.approx(0.018421, rel=1e-3)
    assert p.beta == pytest.approx(0.152305, rel=1e-3)
    assert p.tau == pytest.approx(0.998596, abs=1e-5)


def test_reference_stepsizes_violate_bounds(bench_problem):
    lo, hi = bench_problem.sigma
    rows = stepsize_bounds(0.2, 0.19, lo, hi, bench_problem.graph.degrees, 0.5)
    assert not any(r["beta_ok"] for r in rows)
    assert not any(r["alpha_ok"] for r in rows)


def test_stopping_iteration_examples():
    assert stopping_iteration(0.81, 1, 1, 1.0, 0.9) == 2
    assert stopping_iteration(0.9, 1, 1, 1.0, 0.9) == 1
    assert stopping_iteration(2.0, 1, 1, 1.0, 0.9) == 1
    with pytest.raises(ZeroInitialResidual):
        stopping_iteration(0.1, 1, 1, 0.0, 0.9)
    with pytest.raises(ValidationError):
        stopping_iteration(0.1, 1, 1, 1.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-4, 0.1), st.floats(0.01, 100.0), st.floats(0.5, 0.9999))
def test_stopping_iteration_is_least_sufficient(eps, g0, tau):
    k = stopping_iteration(eps, 2, 8, g0, tau)
    target = eps * 16
    assert tau ** k * g0 <= target * (1 + 1e-8) or k == 1
    if k > 1:
        assert tau ** (k - 1) * g0 > target * (1 - 1e-8)


def test_initialize_centres_residuals():
    subs = [quad_subproblem(1.0, [0.0], [[1.0]], [c], 3) for c in (1.0, 2.0, 6.0)]
    graph = build_graph([[0, 1, 1], [1, 0, 1], [1, 1, 0]])
    st0 = initialize(subs, graph)
    np.testing.assert_allclose(st0.residual.ravel(), [1.0, 2.0, 6.0])
    np.testing.assert_allclose(st0.gamma.ravel(), [-2.0, -1.0, 3.0])
    assert st0.gamma.sum() == 0.0


def test_gamma_sum_is_conserved(bench_problem):
    subs = bench_problem.subproblems([a.x0 for a in bench_problem.config.agents])
    st_ = initialize(subs, bench_problem.graph)
    for _ in range(200):
        st_ = pdg_iterate(st_, bench_problem.params, bench_problem.graph, subs)
        assert np.abs(st_.gamma.sum(axis=0)).max() <= 1e-10


def test_iteration_matches_hand_rolled_linear_map():
    # two agents, scalar multiplier, unconstrained locals: the iteration is linear
    h, g1, g2 = 2.0, np.array([0.5, -1.0]), np.array([0.2])
    G1, G2 = np.array([[1.0, 2.0]]), np.array([[3.0]])
    c1, c2 = 0.4, -0.1
    subs = [quad_subproblem(h, g1, G1, [c1], 2), quad_subproblem(h, g2, G2, [c2], 2)]
    graph = build_graph([[0, 1], [1, 0]])
    params = PdgParams(alpha=0.1, beta=0.3, rho=0.5, tau=0.9)
    th = np.array([(G1 @ G1.T)[0, 0] / h, (G2 @ G2.T)[0, 0] / h])
    off = np.array([c1 - (G1 @ g1)[0] / h, c2 - (G2 @ g2)[0] / h])
    Lap = np.array([[1.0, -1.0], [-1.0, 1.0]])
    lam = np.zeros(2)
    r = off - th * lam
    gam = r - r.mean()
    st_ = initialize(subs, graph)
    for _ in range(50):
        lam, gam = lam - params.alpha * (th * lam - off + gam), gam + params.beta * (Lap @ lam)
        st_ = pdg_iterate(st_, params, graph, subs)
        np.testing.assert_allclose(st_.lam.ravel(), lam, atol=1e-12)
        np.testing.assert_allclose(st_.gamma.ravel(), gam, atol=1e-12)


def test_saddle_point_is_fixed_point():
    subs = [quad_subproblem(1.5, [0.3, -0.4], [[1.0, 0.5]], [0.2], 2),
            quad_subproblem(1.5, [0.1], [[2.0]], [0.7], 2)]
    graph = build_graph([[0, 1], [1, 0]])
    params = PdgParams(alpha=0.1, beta=0.2, rho=0.5, tau=0.9)
    y, _ = saddle_point(subs)
    lam = np.array([y[0], y[2]]).reshape(2, 1)
    gam = np.array([y[1], y[3]]).reshape(2, 1)
    res = np.array([s.residual(np.linalg.solve(s.H_cost, -(s.g_base + s.G.T @ lam[i])))
                    for i, s in enumerate(subs)])
    st_ = PdgState(lam=lam, gamma=gam, u=[None, None], residual=res)
    nxt = pdg_iterate(st_, params, graph, subs)
    np.testing.assert_allclose(nxt.lam, lam, atol=1e-7)
    np.testing.assert_allclose(nxt.gamma, gam, atol=1e-9)


def test_block_metric_matches_agent_metric():
    p = PdgParams(alpha=0.1, beta=0.2, rho=0.5, tau=0.9)
    M = block_metric(p, [2, 3], 2)
    np.testing.assert_array_equal(M[:4, :4], agent_metric(0.1, 0.2, 2, 2))
    np.testing.assert_array_equal(M[4:, 4:], agent_metric(0.1, 0.2, 3, 2))
    assert not M[:4, 4:].any()


def test_single_agent_reaches_oracle():
    sub = quad_subproblem(1.0, [-2.0, 1.0], [[1.0, 0.0], [0.0, 1.0]], [-0.1, -0.1], 1)
    sub.E = np.array([[0.0, -1.0]])
    sub.e = np.array([0.5])
    graph = build_graph([[0]])
    theta = sub.G @ sub.G.T
    assert np.allclose(theta, np.eye(2))
    # without projection the multiplier of an inactive row is pushed negative,
    # so the limit is the equality-constrained problem
    params = single_agent_stepsize(1.0, 1.0, 0.5)
    res = run_algorithm1([sub], graph, params, 1e-3, 2, 1, k_bar=200, exit_test="none", strict=True)
    ref = centralized_qp([sub], equality=True)
    np.testing.assert_allclose(res.u[0], ref.u[0], atol=1e-6)
    np.testing.assert_allclose(res.state.lam[0], ref.lam, atol=1e-6)
    # the projected iteration keeps lam >= 0 and reaches the inequality problem
    params = single_agent_stepsize(1.0, 1.0, 0.5, project_lambda=True)
    res = run_algorithm1([sub], graph, params, 1e-3, 2, 1, k_bar=200, exit_test="none", strict=True)
    ref = centralized_qp([sub])
    np.testing.assert_allclose(res.u[0], ref.u[0], atol=1e-6)
    assert res.max_violation <= 0


def test_zero_initial_residual_stops_at_once():
    subs = [quad_subproblem(1.0, [0.0], [[1.0]], [0.3], 2) for _ in range(2)]
    graph = build_graph([[0, 1], [1, 0]])
    params = PdgParams(alpha=0.1, beta=0.1, rho=0.5, tau=0.9)
    res = run_algorithm1(subs, graph, params, 0.01, 1, 1, strict=False)
    assert res.k_bar == 0 and res.iterations == 0
    assert res.exit_reason == "zero_residual"
    with pytest.raises(NotEpsFeasibleAtKbar) as info:
        run_algorithm1(subs, graph, params, 0.01, 1, 1, strict=True)
    assert info.value.max_violation == pytest.approx(0.6 - 0.02)


def test_trace_layout(bench_problem):
    subs = bench_problem.subproblems([a.x0 for a in bench_problem.config.agents])
    res = run_algorithm1(subs, bench_problem.graph, bench_problem.params, bench_problem.eps,
                         bench_problem.coupling.p, bench_problem.N, k_bar=5, exit_test="none", strict=False)
    assert len(res.trace) == 6 * 4
    assert [row[0] for row in res.trace[:8]] == [0, 0, 0, 0, 1, 1, 1, 1]
    assert res.iterations == 5 and res.exit_reason == "k_bar"


def test_tau_tends_to_one_as_rho_vanishes():
    taus = [select_stepsizes(1.0, 1.0, [2], r).tau for r in (1e-2, 1e-4, 1e-6)]
    assert taus[0] < taus[1] < taus[2] < 1
    assert 1 - taus[2] < 1e-6


def test_initialize_examples(bench_problem):
    graph = build_graph([[0, 1], [1, 0]])
    same = [quad_subproblem(1.0, [0.3], [[1.0]], [0.5], 2) for _ in range(2)]
    assert not initialize(same, graph).gamma.any()
    # r_1 = (1, 0), r_2 = (0, 1) with G = 0
    subs = [quad_subproblem(1.0, [0.0], [[0.0], [0.0]], [1.0, 0.0], 2),
            quad_subproblem(1.0, [0.0], [[0.0], [0.0]], [0.0, 1.0], 2)]
    st0 = initialize(subs, graph)
    np.testing.assert_allclose(st0.gamma, [[0.5, -0.5], [-0.5, 0.5]])
    bsubs = bench_problem.subproblems([a.x0 for a in bench_problem.config.agents])
    assert np.abs(initialize(bsubs, bench_problem.graph).gamma.sum(axis=0)).max() <= 1e-12


def test_single_agent_gamma_is_constant():
    sub = quad_subproblem(1.0, [0.5], [[1.0]], [0.2], 1)
    graph = build_graph([[0]])
    params = single_agent_stepsize(1.0, 1.0, 0.5)
    st_ = initialize([sub], graph)
    st_.gamma = np.array([[0.3]])
    for _ in range(5):
        lam = st_.lam.copy()
        nxt = pdg_iterate(st_, params, graph, [sub])
        assert nxt.gamma[0, 0] == 0.3
        np.testing.assert_allclose(nxt.lam, lam - params.alpha * (st_.grad + 0.3))
        st_ = nxt


def test_slack_coupling_exits_immediately():
    # residuals well below zero: the coupled row is inactive at lam = 0
    subs = [quad_subproblem(1.0, [0.1], [[1.0]], [-0.5], 2), quad_subproblem(1.0, [-0.2], [[1.0]], [-0.9], 2)]
    graph = build_graph([[0, 1], [1, 0]])
    params = PdgParams(alpha=0.1, beta=0.1, rho=0.5, tau=0.9)
    res = run_algorithm1(subs, graph, params, 0.01, 1, 1, strict=True)
    assert res.exit_reason == "early_exit" and res.iterations == 0
    assert not res.state.lam.any()
