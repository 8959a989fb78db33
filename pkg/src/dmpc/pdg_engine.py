"""Distributed primal-dual gradient iteration with Laplacian consensus.

Each agent keeps a local multiplier copy ``lam_i`` and a consensus variable
``gamma_i`` and performs, synchronously,

    lam_i'   = lam_i - alpha (grad psi_i(lam_i) + gamma_i)
    gamma_i' = gamma_i + beta (d_i lam_i - sum_j a_ij lam_j)

followed by a local QP solve at ``lam_i'``.  All reads of neighbour
multipliers use the iteration-``k`` snapshot.
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SolverError, ValidationError
from .local_solver import solve_local

__all__ = [
    "PdgParams",
    "PdgState",
    "DenominatorNonpositive",
    "IsolatedAgent",
    "ZeroInitialResidual",
    "NotEpsFeasibleAtKbar",
    "Algorithm1Result",
    "select_stepsizes",
    "single_agent_stepsize",
    "stepsize_bounds",
    "initialize",
    "pdg_iterate",
    "stopping_iteration",
    "run_algorithm1",
    "TRACE_COLUMNS",
]

log = logging.getLogger(__name__)

STEP_MARGIN = 0.99
TRACE_COLUMNS = ("k", "agent", "stationarity", "gamma_max", "lambda_disagreement", "m_distance")


class DenominatorNonpositive(ValidationError):
    pass


class IsolatedAgent(ValidationError):
    pass


class ZeroInitialResidual(ValidationError):
    """Initial consensus residual is zero; the stopping iteration is 0."""

    k_bar = 0


class NotEpsFeasibleAtKbar(SolverError):
    def __init__(self, msg, max_violation, result=None):
        super().__init__(msg)
        self.max_violation = max_violation
        self.result = result


@dataclass(frozen=True)
class PdgParams:
    """Step sizes, rate parameter and derived contraction rate.

    ``alpha``/``beta`` are uniform across agents; ``tau`` uses the smallest
    degree, which gives the slowest (largest) rate.
    """

    alpha: float
    beta: float
    rho: float
    tau: float
    k_bar: int = None
    project_lambda: bool = False
    source: str = "bounds"

    def tau_for_degree(self, d):
        return math.sqrt(1.0 - self.rho * self.alpha * self.beta * d)


@dataclass
class PdgState:
    lam: np.ndarray
    gamma: np.ndarray
    u: list
    residual: np.ndarray
    iter: int = 0

    @property
    def grad(self):
        """``grad psi_i(lam_i) = -(f_i - b/l)`` per agent, row-stacked."""
        return -self.residual

    def y(self):
        """Flattened ``(lam_1, gamma_1, ..., lam_l, gamma_l)``."""
        return np.concatenate([np.concatenate([a, g]) for a, g in zip(self.lam, self.gamma)])


def select_stepsizes(sigma_lo, sigma_hi, degrees, rho, margin=STEP_MARGIN, project_lambda=False):
    """Uniform step sizes from the contraction step-size bounds, shrunk by ``margin``.

    ``beta = margin * min_i sigma_hi / (2 d_i)`` and
    ``alpha = margin * min_i (1-rho) sigma_lo / (2 sigma_hi^2 - (3+rho) sigma_lo beta d_i)``.
    """
    if not (0.0 < sigma_lo <= sigma_hi < np.inf):
        raise ValidationError(f"need 0 < sigma_lo <= sigma_hi < inf, got ({sigma_lo}, {sigma_hi})")
    if not (0.0 < rho < 1.0):
        raise ValidationError(f"rho must lie in (0, 1), got {rho}")
    d = np.asarray(degrees, float)
    for i, di in enumerate(d):
        if di <= 0.0:
            raise IsolatedAgent(f"agent {i + 1} has degree 0")
    beta = margin * float(np.min(sigma_hi / (2.0 * d)))
    alphas = []
    for i, di in enumerate(d):
        denom = 2.0 * sigma_hi ** 2 - (3.0 + rho) * sigma_lo * beta * di
        if denom <= 0.0:
            raise DenominatorNonpositive(f"alpha bound denominator {denom:.3e} <= 0 at agent {i + 1} (d_i = {di})")
        alphas.append((1.0 - rho) * sigma_lo / denom)
    alpha = margin * min(alphas)
    if not rho < 1.0 / (alpha * beta * d.max()):
        raise ValidationError("rho >= 1/(alpha beta d_max)")
    tau = math.sqrt(1.0 - rho * alpha * beta * d.min())
    return PdgParams(alpha=alpha, beta=beta, rho=rho, tau=tau, project_lambda=project_lambda)


def stepsize_bounds(alpha, beta, sigma_lo, sigma_hi, degrees, rho):
    """Compare given step sizes with the contraction step-size bounds, agent by agent.

    Returns a list of dicts with keys ``agent``, ``d``, ``beta_max``,
    ``alpha_max`` (evaluated at the given ``beta``; ``nan`` when the
    denominator is not positive), ``beta_ok`` and ``alpha_ok``.
    """
    rows = []
    for i, d in enumerate(np.asarray(degrees, float)):
        beta_max = sigma_hi / (2.0 * d) if d > 0 else np.inf
        denom = 2.0 * sigma_hi ** 2 - (3.0 + rho) * sigma_lo * beta * d
        alpha_max = (1.0 - rho) * sigma_lo / denom if denom > 0 else np.nan
        rows.append({
            "agent": i + 1,
            "d": float(d),
            "beta_max": float(beta_max),
            "alpha_max": float(alpha_max),
            "beta_ok": bool(beta <= beta_max),
            "alpha_ok": bool(np.isfinite(alpha_max) and alpha <= alpha_max),
        })
    return rows


def single_agent_stepsize(sigma_lo, sigma_hi, rho, project_lambda=False):
    """Dual gradient step ``1/sigma_hi`` for a graph without edges.

    ``tau`` is the gradient-descent rate ``sqrt(1 - sigma_lo/sigma_hi)`` on
    the dual; ``beta`` is irrelevant and set to 0.
    """
    alpha = 1.0 / sigma_hi
    tau = math.sqrt(max(1.0 - sigma_lo / sigma_hi, 0.0)) or 0.5
    return PdgParams(alpha=alpha, beta=0.0, rho=rho, tau=tau, project_lambda=project_lambda,
                     source="single-agent")


def initialize(subproblems, graph, lambda0=None):
    """Solve at ``lambda0`` (default 0) and centre the local residuals into ``gamma``.

    ``gamma_i = r_i - mean_j r_j`` with ``r_i = f_i - b/l``, so the
    consensus variables sum to zero.
    """
    l = len(subproblems)
    Np = subproblems[0].b_eps.size
    lam = np.zeros((l, Np)) if lambda0 is None else np.array(lambda0, float).reshape(l, Np)
    us, res = [], np.zeros((l, Np))
    for i, sub in enumerate(subproblems):
        u, _ = solve_local(sub, lam[i])
        us.append(u)
        res[i] = sub.residual(u)
    gamma = res - res.mean(axis=0, keepdims=True)
    # remove the rounding left by the mean so the columns sum to zero exactly
    gamma[-1] = -gamma[:-1].sum(axis=0)
    return PdgState(lam=lam, gamma=gamma, u=us, residual=res, iter=0)


def pdg_iterate(state, params, graph, subproblems):
    """One synchronous round; returns a new state."""
    alpha = np.broadcast_to(np.asarray(params.alpha, float), (graph.l,))[:, None]
    beta = np.broadcast_to(np.asarray(params.beta, float), (graph.l,))[:, None]
    lam_k = state.lam
    # L Lambda: row i is d_i lam_i - sum_j a_ij lam_j
    consensus = graph.laplacian @ lam_k
    lam = lam_k - alpha * (state.grad + state.gamma)
    if params.project_lambda:
        lam = np.maximum(lam, 0.0)
    gamma = state.gamma + beta * consensus
    us, res = [], np.zeros_like(lam)
    for i, sub in enumerate(subproblems):
        u, _ = solve_local(sub, lam[i])
        us.append(u)
        res[i] = sub.residual(u)
    return PdgState(lam=lam, gamma=gamma, u=us, residual=res, iter=state.iter + 1)


def stopping_iteration(eps, p, N, gamma0_norm_max, tau):
    """``ceil(log(eps p N / Gamma0) / log tau)``, at least 1.

    Raises
    ------
    ZeroInitialResidual
        If ``Gamma0 <= 1e-14``; the caller should stop at iteration 0.
    """
    if not (0.0 < tau < 1.0):
        raise ValidationError(f"tau must lie in (0, 1), got {tau}")
    if gamma0_norm_max <= 1e-14:
        raise ZeroInitialResidual("initial consensus residual is zero")
    ratio = eps * p * N / gamma0_norm_max
    k = math.log(ratio) / math.log(tau)
    return max(1, math.ceil(k - 1e-9))


def block_metric(params, degrees, Np):
    """Block-diagonal metric on ``y = (lam_1, gamma_1, ...)``, one block per agent."""
    a, b = params.alpha, params.beta
    blocks = []
    eye = np.eye(Np)
    for d in degrees:
        blocks.append(np.block([[b * d * eye, a * b * d * eye], [a * b * d * eye, a * eye]]))
    out = np.zeros((2 * Np * len(blocks),) * 2)
    for i, blk in enumerate(blocks):
        s = slice(2 * Np * i, 2 * Np * (i + 1))
        out[s, s] = blk
    return out


@dataclass
class Algorithm1Result:
    u: list
    iterations: int
    k_bar: int
    trace: list
    state: PdgState
    gamma0_norm_max: float
    exit_reason: str
    max_violation: float
    gamma_test: bool
    history: dict = field(default_factory=dict)


def _exit_test(state, eps, mode):
    if mode == "gamma":
        return bool(np.all(state.gamma <= eps))
    if mode == "residual":
        return bool(np.all(state.residual <= eps))
    return False


def run_algorithm1(subproblems, graph, params, eps, p, N, lambda0=None, exit_test="residual",
                   k_bar=None, strict=True, oracle=None, record=False, extra_iterations=0):
    """Iterate until the stopping iteration or an early-exit test fires.

    Parameters
    ----------
    exit_test : {"residual", "gamma", "none"}
        ``"residual"``: every agent's local residual ``f_i - b/l <= eps``
        (sufficient for eps-feasibility after summation).  ``"gamma"``:
        every ``gamma_i <= eps``.  ``"none"``: always run to ``k_bar``.
    k_bar : int, optional
        Override for the stopping iteration computed from ``gamma^0``.
    strict : bool
        Raise :class:`NotEpsFeasibleAtKbar` when the summed constraint is
        not eps-feasible at the end.
    oracle : ndarray, optional
        Saddle point ``y*`` in :meth:`PdgState.y` layout; enables the
        M-distance column of the trace.
    record : bool
        Keep ``lam``, ``gamma`` and ``u`` of every iterate in ``history``.
    extra_iterations : int
        Iterations to run past ``k_bar`` (oracle comparisons).
    """
    state = initialize(subproblems, graph, lambda0)
    l, Np = state.lam.shape
    g0 = float(np.linalg.norm(state.gamma, axis=1).max())
    if k_bar is None:
        try:
            k_bar = stopping_iteration(eps, p, N, g0, params.tau)
        except ZeroInitialResidual:
            k_bar = 0
    M = block_metric(params, graph.degrees, Np) if oracle is not None else None
    trace = []
    history = {"lam": [], "gamma": [], "u": []} if record else {}

    def log_row(st):
        lam_bar = st.lam.mean(axis=0)
        mdist = ""
        if M is not None:
            dy = st.y() - oracle
            mdist = float(np.sqrt(max(dy @ M @ dy, 0.0)))
        for i in range(l):
            trace.append((
                st.iter, i + 1,
                float(np.linalg.norm(st.grad[i] + st.gamma[i])),
                float(st.gamma[i].max()),
                float(np.linalg.norm(st.lam[i] - lam_bar)),
                mdist,
            ))
        if record:
            history["lam"].append(st.lam.copy())
            history["gamma"].append(st.gamma.copy())
            history["u"].append([u.copy() for u in st.u])

    log_row(state)
    reason = "k_bar"
    limit = k_bar + extra_iterations
    while state.iter < limit:
        if extra_iterations == 0 and _exit_test(state, eps, exit_test):
            reason = "early_exit"
            break
        state = pdg_iterate(state, params, graph, subproblems)
        log_row(state)
    if state.iter == 0 and k_bar == 0:
        reason = "zero_residual"
    violation = float((state.residual.sum(axis=0) - eps * l).max()) if Np else -np.inf
    g_end = float(np.linalg.norm(state.gamma, axis=1).max()) if Np else 0.0
    if g_end > eps:
        # gamma_i tends to the local residual at the saddle point, which need not vanish per agent
        log.info("max_i |gamma_i| = %.3e > eps after %d iterations", g_end, state.iter)
    result = Algorithm1Result(
        u=state.u,
        iterations=state.iter,
        k_bar=k_bar,
        trace=trace,
        state=state,
        gamma0_norm_max=g0,
        exit_reason=reason,
        max_violation=violation,
        gamma_test=bool(np.all(state.gamma <= eps)),
        history=history,
    )
    if strict and violation > 1e-12:
        raise NotEpsFeasibleAtKbar(
            f"not eps-feasible after {state.iter} iterations (k_bar = {k_bar}): "
            f"max violation {violation:.3e}",
            violation, result,
        )
    return result
