"""Receding-horizon closed loop around the distributed solver, with monitors.

At every sampling instant each agent measures its state, the network runs
the primal-dual iteration, and every agent applies the first input of its
sequence.  Alongside, the loop records the eps-feasibility of each solve,
whether the shifted previous solution is feasible now, and the decrease of
the summed MPC cost.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .contraction_cert import build_certificate, theta_bounds, theta_samples
from .errors import SolverError, ValidationError
from .graph import build_graph
from .local_solver import build_subproblem, solve_local
from .pdg_engine import PdgParams, run_algorithm1, select_stepsizes, single_agent_stepsize
from .plant import (
    AgentPlant,
    CoupledConstraint,
    condense_cost,
    condense_coupling,
    polytope_template,
    predict,
    with_terminal_levels,
)

__all__ = [
    "Problem",
    "InfeasibleAtT",
    "ClosedLoopTrace",
    "build_problem",
    "mpc_step",
    "shift_candidate",
    "shift_multipliers",
    "check_eps_feasible",
    "lyapunov_value",
    "simulate_closed_loop",
    "TRACE_TOL",
]

log = logging.getLogger(__name__)

LYAPUNOV_TOL = 1e-6
TRACE_TOL = 1e-8


class InfeasibleAtT(SolverError):
    pass


@dataclass
class Problem:
    """Condensed, validated data for one configuration."""

    config: object
    graph: object
    plants: list
    coupled: CoupledConstraint
    coupling: object
    costs: list
    templates: list
    params: PdgParams
    sigma: tuple
    m_J: float
    L_J: float
    caches: list = field(default_factory=list)
    relaxed_templates: list = field(default_factory=list)
    relaxed_caches: list = field(default_factory=list)
    last_terminal: list = field(default_factory=list)

    @property
    def l(self):
        return len(self.plants)

    @property
    def N(self):
        return self.coupling.horizon

    @property
    def eps(self):
        return self.coupling.eps

    def terminal_enforced(self, i, x0):
        """Whether agent ``i`` keeps the terminal rows at state ``x0``."""
        mode = self.config.terminal_constraint
        if mode == "hard" or self.plants[i].eta_f is None:
            return True
        if mode == "off":
            return False
        return _polytope_nonempty(self.templates[i].at(x0))

    def subproblems(self, xs):
        subs, flags = [], []
        for i in range(self.l):
            keep = self.terminal_enforced(i, xs[i])
            tpl, cache = (self.templates[i], self.caches[i]) if keep else \
                (self.relaxed_templates[i], self.relaxed_caches[i])
            subs.append(build_subproblem(self.costs[i], tpl, self.coupling, i, xs[i], cache=cache))
            flags.append(keep)
        self.last_terminal = flags
        return subs

    def thetas(self):
        return [
            self.coupling.G[i] @ np.linalg.solve(self.costs[i].H, self.coupling.G[i].T)
            for i in range(self.l)
        ]

    def certificates(self, params=None):
        """One contraction certificate per distinct degree."""
        params = params or self.params
        out = []
        G, H = self.coupling.G[0], self.costs[0].H
        rank_def = G.shape[0] > G.shape[1]
        samples = theta_samples(G, H, self.m_J, self.L_J)
        for d in sorted(set(float(x) for x in self.graph.degrees)):
            if d <= 0:
                continue
            out.append(build_certificate(params.alpha, params.beta, d, params.rho,
                                         self.sigma[0], self.sigma[1], samples, rank_deficient=rank_def))
        return out


def _polytope_nonempty(poly):
    if poly.E.shape[0] == 0:
        return True
    res = linprog(np.zeros(poly.E.shape[1]), A_ub=poly.E, b_ub=poly.e, bounds=(None, None), method="highs")
    return res.status == 0


def build_problem(config, alpha=None, beta=None, rho=None, eps=None):
    """Validate a :class:`ProblemConfig` and condense everything needed to run it.

    ``alpha``/``beta``/``rho``/``eps`` override the configured values.
    Without explicit step sizes they come from :func:`select_stepsizes`.
    """
    eps = config.eps if eps is None else eps
    rho = config.rho if rho is None else rho
    alpha = config.alpha if alpha is None else alpha
    beta = config.beta if beta is None else beta
    graph = build_graph(config.adjacency)
    N = config.horizon
    coupled = CoupledConstraint(config.phi_x, config.phi_u)
    plants = [
        AgentPlant.create(a.A, a.B, a.x_lo, a.x_hi, a.u_lo, a.u_hi, a.Q, a.R, a.P, a.K)
        for a in config.agents
    ]
    plants = with_terminal_levels(plants, coupled if coupled.p else None, eps, N)
    coupling = condense_coupling(plants, coupled, N, eps)
    costs = [condense_cost(pl, N) for pl in plants]
    templates = [polytope_template(pl, N) for pl in plants]
    bounds = [c.bounds for c in costs]
    m_J = min(b[0] for b in bounds)
    L_J = max(b[1] for b in bounds)
    if coupling.p:
        sigma = theta_bounds(m_J, L_J, coupling.zeta_lo, coupling.zeta_hi)
    else:
        sigma = (0.0, 0.0)
    project = config.project_lambda
    if not coupling.p:
        params = PdgParams(alpha=0.0, beta=0.0, rho=rho, tau=0.5, project_lambda=project, source="uncoupled")
    elif alpha is not None:
        import math

        dmin = graph.d_min
        tau = math.sqrt(1.0 - rho * alpha * beta * dmin) if dmin > 0 else math.sqrt(max(1 - sigma[0] * alpha, 0.0))
        params = PdgParams(alpha=float(alpha), beta=float(beta), rho=rho, tau=tau,
                           project_lambda=project, source="override")
    elif graph.d_max == 0.0:
        params = single_agent_stepsize(sigma[0], sigma[1], rho, project_lambda=project)
    else:
        params = select_stepsizes(sigma[0], sigma[1], graph.degrees, rho, project_lambda=project)
    problem = Problem(
        config=config,
        graph=graph,
        plants=plants,
        coupled=coupled,
        coupling=coupling,
        costs=costs,
        templates=templates,
        params=params,
        sigma=sigma,
        m_J=m_J,
        L_J=L_J,
        caches=[{} for _ in plants],
        relaxed_templates=[polytope_template(pl, N, terminal=False) for pl in plants],
        relaxed_caches=[{} for _ in plants],
    )
    if params.source == "override" and graph.d_max > 0:
        bad = [c for c in problem.certificates() if not (c.valid and c.direct_ok)]
        if bad:
            log.warning("step-size override (alpha=%g, beta=%g) fails the contraction certificate", alpha, beta)
    return problem


@dataclass
class StepResult:
    u_applied: list
    u_seq: list
    x_pred: list
    algo: object
    eps_ok: bool
    max_violation: float
    lam: np.ndarray = None


def check_eps_feasible(us, xs, coupling):
    """``sum_i f_i(x_i, u_i) - b(eps) <= eps l`` componentwise.

    Returns
    -------
    ok : bool
    max_violation : float
        ``max(sum_i f_i - b(eps) - eps l)``; negative means slack.
    """
    if coupling.p == 0:
        return True, -np.inf
    total = sum(coupling.f(i, xs[i], us[i]) for i in range(coupling.l))
    excess = total - coupling.b_eps - coupling.eps * coupling.l
    worst = float(excess.max())
    return worst <= 0.0, worst


def mpc_step(problem, xs, lambda0=None, strict=False, exit_test=None, k_bar=None):
    """One sampling instant: run the distributed solver and take first inputs."""
    subs = problem.subproblems(xs)
    m = [pl.m for pl in problem.plants]
    exit_test = exit_test or problem.config.exit_test
    algo = None
    lam = None
    if problem.coupling.p == 0:
        u_seq = []
        for sub in subs:
            u, _ = solve_local(sub, np.zeros(0))
            u_seq.append(u)
    else:
        algo = run_algorithm1(subs, problem.graph, problem.params, problem.eps, problem.coupling.p, problem.N,
                              lambda0=lambda0, exit_test=exit_test, k_bar=k_bar, strict=strict)
        u_seq = algo.u
        lam = algo.state.lam
    ok, viol = check_eps_feasible(u_seq, xs, problem.coupling)
    x_pred = [predict(pl, x, u) for pl, x, u in zip(problem.plants, xs, u_seq)]
    u_applied = [u[:mi].copy() for u, mi in zip(u_seq, m)]
    return StepResult(u_applied, u_seq, x_pred, algo, ok, viol, lam)


def shift_candidate(prev_u, prev_x_pred, K):
    """Drop the first input and append the terminal law at ``x(N)``.

    ``prev_u``/``prev_x_pred``/``K`` may be per-agent lists or a single
    agent's arrays.
    """
    if isinstance(prev_u, (list, tuple)):
        Ks = K if isinstance(K, (list, tuple)) else [K] * len(prev_u)
        return [shift_candidate(u, x, k) for u, x, k in zip(prev_u, prev_x_pred, Ks)]
    K = np.atleast_2d(np.asarray(K, float))
    u = np.asarray(prev_u, float).reshape(-1)
    x = np.asarray(prev_x_pred, float)
    m = K.shape[0]
    return np.concatenate([u[m:], K @ x[-1]])


def shift_multipliers(lam, p):
    """Drop the first stage block of each agent's multiplier and repeat the last one."""
    if lam is None or p == 0:
        return None
    lam = np.asarray(lam, float)
    return np.hstack([lam[:, p:], lam[:, -p:]])


def lyapunov_value(problem, xs, us):
    """Summed condensed MPC cost of the sequences actually used."""
    return float(sum(problem.costs[i].value(xs[i], us[i]) for i in range(problem.l)))


def _candidate_feasible(problem, xs, cand):
    local = max(problem.templates[i].at(xs[i]).max_violation(cand[i]) if problem.templates[i].E.shape[0] else -np.inf
                for i in range(problem.l))
    if problem.coupling.p:
        total = sum(problem.coupling.f(i, xs[i], cand[i]) for i in range(problem.l))
        coupled = float((total - problem.coupling.b_eps).max())
    else:
        coupled = -np.inf
    return max(local, coupled) <= TRACE_TOL, local, coupled


@dataclass
class ClosedLoopTrace:
    """Per-instant records of the closed loop; ``rows[t]`` describes time ``t``."""

    l: int
    rows: list = field(default_factory=list)
    terminal_reached_at: int = None
    halted: str = ""

    def states(self):
        return np.array([[r["x"][i] for i in range(self.l)] for r in self.rows])

    def inputs(self):
        return np.array([[r["u"][i] for i in range(self.l)] for r in self.rows])

    def column(self, key):
        return [r[key] for r in self.rows]


def simulate_closed_loop(problem, T=None, warm_start=None, terminal_law_after=None, strict=False,
                         progress=None):
    """Run the closed loop for ``T`` steps (``T+1`` recorded instants).

    Every row carries the applied input, the Lyapunov value, the coupled
    constraint value, eps-feasibility of the solve, the Lyapunov decrease
    relative to the previous row and the feasibility of the shifted
    previous solution.  Monitors are recorded, never asserted.
    """
    cfg = problem.config
    T = cfg.steps if T is None else T
    warm_start = cfg.warm_start if warm_start is None else warm_start
    terminal_law_after = cfg.terminal_law_after if terminal_law_after is None else terminal_law_after
    xs = [np.array(a.x0, float) for a in cfg.agents]
    trace = ClosedLoopTrace(l=problem.l)
    prev = None
    lam_prev = None
    for t in range(T + 1):
        in_terminal = [pl.terminal_cost(x) <= pl.eta_f for pl, x in zip(problem.plants, xs)]
        if all(in_terminal) and trace.terminal_reached_at is None:
            trace.terminal_reached_at = t
        use_law = terminal_law_after and trace.terminal_reached_at is not None
        if use_law:
            u_seq = []
            for pl, x in zip(problem.plants, xs):
                traj_u, xk = [], x
                for _ in range(problem.N):
                    uk = pl.K @ xk
                    traj_u.append(uk)
                    xk = pl.A @ xk + pl.B @ uk
                u_seq.append(np.concatenate(traj_u))
            ok, viol = check_eps_feasible(u_seq, xs, problem.coupling)
            step = StepResult([u[:pl.m] for u, pl in zip(u_seq, problem.plants)], u_seq,
                              [predict(pl, x, u) for pl, x, u in zip(problem.plants, xs, u_seq)],
                              None, ok, viol)
        else:
            try:
                lam0 = shift_multipliers(lam_prev, problem.coupling.p) if warm_start else None
                step = mpc_step(problem, xs, lambda0=lam0, strict=strict)
            except SolverError as exc:
                trace.halted = f"t={t}: {exc}"
                log.error("closed loop stopped at t=%d: %s", t, exc)
                break
        V = lyapunov_value(problem, xs, step.u_seq)
        row = {
            "t": t,
            "x": [x.copy() for x in xs],
            "u": [u.copy() for u in step.u_applied],
            "V": V,
            "iterations": step.algo.iterations if step.algo is not None else 0,
            "k_bar": step.algo.k_bar if step.algo is not None else 0,
            "exit_reason": step.algo.exit_reason if step.algo is not None else ("terminal_law" if use_law else "uncoupled"),
            "coupled_lhs": problem.coupled.lhs(xs, step.u_applied) if problem.coupled.p else np.zeros(0),
            "eps_feasible": step.eps_ok,
            "max_violation": step.max_violation,
            "gamma_test": step.algo.gamma_test if step.algo is not None else True,
            "gamma_max": float(step.algo.state.gamma.max()) if step.algo is not None and step.algo.state.gamma.size else 0.0,
            "in_terminal": all(in_terminal),
            "terminal_rows": list(problem.last_terminal) if not use_law else [True] * problem.l,
            "pre_terminal": trace.terminal_reached_at is None,
            "lyapunov_decrease": None,
            "lyapunov_decrease_ok": None,
            "candidate_cost": None,
            "candidate_feasible": None,
        }
        if prev is not None:
            stage = sum(pl.stage_cost(x, u) for pl, x, u in zip(problem.plants, prev["x"], prev["u"]))
            dec = V - prev["V"] + stage
            row["lyapunov_decrease"] = dec
            row["lyapunov_decrease_ok"] = bool(dec <= LYAPUNOV_TOL)
            feas, _, _ = _candidate_feasible(problem, xs, prev["candidate"])
            row["candidate_feasible"] = bool(feas)
            row["candidate_cost"] = lyapunov_value(problem, xs, prev["candidate"])
            if not feas and prev["eps_feasible"]:
                log.warning("t=%d: shifted candidate infeasible although step t-1 was eps-feasible", t)
        row["candidate"] = shift_candidate(step.u_seq, step.x_pred, [pl.K for pl in problem.plants])
        trace.rows.append(row)
        if progress is not None:
            progress(row)
        prev = row
        lam_prev = step.lam
        if t < T:
            xs = [pl.A @ x + pl.B @ u for pl, x, u in zip(problem.plants, xs, step.u_applied)]
    return trace
