import numpy as np
import pytest

from dmpc.config import benchmark_config
from dmpc.dmpc_loop import build_problem


@pytest.fixture(scope="session")
def bench_cfg():
    return benchmark_config()


@pytest.fixture(scope="session")
def bench_problem(bench_cfg):
    return build_problem(bench_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def scalar_plant(a=0.5, b=1.0, x_box=1.0, u_box=1.0, q=1.0, r=1.0):
    """One-state, one-input plant with the DARE terminal weight."""
    import scipy.linalg as sla

    from dmpc.plant import AgentPlant

    A = np.array([[a]])
    B = np.array([[b]])
    Q = np.array([[q]])
    R = np.array([[r]])
    X = sla.solve_discrete_are(A, B, Q, R)
    K = -np.linalg.solve(R + B.T @ X @ B, B.T @ X @ A)
    return AgentPlant.create(A, B, [-x_box], [x_box], [-u_box], [u_box], Q, R, X, K)


def reduced_config(bench):
    """Two agents of the benchmark on one edge, one coupled row per step, N = 2.

    The coupled row ``x1 + 3 u <= 1`` is active at the optimum from the
    benchmark initial states of agents 1 and 3.
    """
    agents = [bench.agents[0], bench.agents[2]]
    return bench.replace(
        adjacency=[[0, 1], [1, 0]],
        agents=agents,
        phi_x=[[[1.0, 0.0]], [[1.0, 0.0]]],
        phi_u=[[[3.0]], [[3.0]]],
        horizon=2,
        eps=0.01,
    )


def quad_subproblem(h, g, G, c, l):
    """Unconstrained local QP ``0.5 h u'u + g'u`` with residual ``c + G u``."""
    from dmpc.local_solver import LocalSubproblem

    nv = len(g)
    G = np.atleast_2d(np.asarray(G, float))
    Np = G.shape[0]
    return LocalSubproblem(
        H_cost=h * np.eye(nv), g_base=np.asarray(g, float), const_term=0.0,
        G=G, F=np.zeros((Np, 1)), b_eps=-l * np.asarray(c, float), l=l, x0=np.zeros(1),
        E=np.zeros((0, nv)), e=np.zeros(0), m_J=h, L_J=h,
    )


@pytest.fixture(scope="session")
def bench_trace(bench_problem):
    from dmpc.dmpc_loop import simulate_closed_loop

    return simulate_closed_loop(bench_problem)


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Record one acceptance line; printed at the end of the session."""

    def emit(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}"
        request.config._acceptance_lines.append(line)
        print(line)
        return ok

    return emit
