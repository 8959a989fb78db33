"""Per-agent inner problem of the dual decomposition.

For a multiplier ``lam`` the agent solves

    min_u  J(x0, u) + lam' (F x0 + G u - b/l)   s.t.  E u <= e(x0)

which is a strictly convex QP, exactly, with a dual active-set method
(Goldfarb-Idnani).  The optimal active set is remembered and tried first on
the next call, so consecutive solves with slowly varying ``lam`` usually
cost one cached linear solve.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import SolverError

__all__ = [
    "InfeasiblePolytope",
    "MaxIterations",
    "QPResult",
    "LocalSubproblem",
    "build_subproblem",
    "qp_solve",
    "kkt_residual",
    "solve_local",
    "dual_value_and_gradient",
]

KKT_TOL = 1e-8
ACTIVE_SET_MAX_ITER = 500
FALLBACK_MAX_ITER = 50000


class InfeasiblePolytope(SolverError):
    pass


class MaxIterations(SolverError):
    """Raised with the best iterate attached as ``.u`` and ``.residual``."""

    def __init__(self, msg, u=None, residual=np.inf):
        super().__init__(msg)
        self.u = u
        self.residual = residual


@dataclass
class QPResult:
    u: np.ndarray
    mu: np.ndarray
    active: tuple
    residual: float
    iterations: int
    method: str


def kkt_residual(H, q, E, e, u, mu):
    """Max of stationarity, primal/dual feasibility and complementarity errors."""
    stat = H @ u + q
    if E.shape[0] == 0:
        return float(np.abs(stat).max(initial=0.0))
    stat = stat + E.T @ mu
    slack = E @ u - e
    return float(max(
        np.abs(stat).max(initial=0.0),
        max(0.0, slack.max()),
        max(0.0, -mu.min()),
        np.abs(mu * slack).max(),
    ))


def _solve_on_active(H, q, E, e, active, cache):
    """Equality-constrained QP on the working set; ``None`` if singular."""
    nv = H.shape[0]
    key = tuple(active)
    inv = cache.get(key) if cache is not None else None
    if inv is None:
        k = len(active)
        Ea = E[list(active)]
        kkt = np.zeros((nv + k, nv + k))
        kkt[:nv, :nv] = H
        kkt[:nv, nv:] = Ea.T
        kkt[nv:, :nv] = Ea
        try:
            if k and np.linalg.matrix_rank(Ea) < k:
                return None
            inv = np.linalg.inv(kkt)
        except np.linalg.LinAlgError:
            return None
        if cache is not None:
            if len(cache) > 4096:
                cache.clear()
            cache[key] = inv
    rhs = np.concatenate([-q, e[list(active)]])
    sol = inv @ rhs
    mu = np.zeros(E.shape[0])
    mu[list(active)] = sol[nv:]
    return sol[:nv], mu


def _goldfarb_idnani(H, q, E, e, chol, tol=1e-11, max_iter=ACTIVE_SET_MAX_ITER):
    """Dual active-set iterations; returns ``(u, mu, active, iterations)``."""
    Lc = chol
    mcons = E.shape[0]
    # whitened constraint normals: rows of E L^{-T}
    En = sla.solve_triangular(Lc, E.T, lower=True).T if mcons else E
    u = -sla.cho_solve((Lc, True), q)
    mu = np.zeros(mcons)
    active = []
    iters = 0
    scale = 1.0 + np.abs(e)
    while True:
        viol = (E @ u - e) / scale if mcons else np.zeros(0)
        if mcons == 0 or viol.max() <= tol:
            return u, mu, active, iters
        p = int(np.argmax(viol))
        while True:
            iters += 1
            if iters > max_iter:
                raise MaxIterations("active-set iteration limit reached", u=u)
            n_p = En[p]
            if active:
                Na = En[active].T
                r, *_ = np.linalg.lstsq(Na, n_p, rcond=None)
                w = n_p - Na @ r
            else:
                r = np.zeros(0)
                w = n_p
            # primal direction in original coordinates
            z = -sla.solve_triangular(Lc.T, w, lower=False)
            wn = float(w @ w)
            s_p = float(E[p] @ u - e[p])
            t2 = s_p / wn if wn > 1e-14 * max(1.0, float(n_p @ n_p)) else np.inf
            t1, drop = np.inf, None
            for idx, j in enumerate(active):
                if r[idx] > 1e-14 and mu[j] / r[idx] < t1:
                    t1, drop = mu[j] / r[idx], idx
            if not np.isfinite(t1) and not np.isfinite(t2):
                raise InfeasiblePolytope(f"local polytope is empty (constraint {p} cannot be satisfied)")
            t = min(t1, t2)
            if np.isfinite(t2):
                u = u + t * z
            for idx, j in enumerate(active):
                mu[j] -= t * r[idx]
            mu[p] += t
            if t2 <= t1:
                active.append(p)
                break
            j_drop = active.pop(drop)
            mu[j_drop] = 0.0


def _dual_fista(H, q, E, e, mu0=None, tol=KKT_TOL, max_iter=FALLBACK_MAX_ITER):
    """Accelerated projected gradient on the QP dual (projection is ``max(0, .)``)."""
    Hinv_q = np.linalg.solve(H, q)
    Hinv_Et = np.linalg.solve(H, E.T)
    lip = float(np.linalg.eigvalsh(E @ Hinv_Et).max()) or 1.0
    mu = np.zeros(E.shape[0]) if mu0 is None else np.maximum(mu0, 0.0)
    y, t = mu.copy(), 1.0
    best = (np.inf, None, None)
    for _ in range(max_iter):
        u_y = -(Hinv_q + Hinv_Et @ y)
        mu_new = np.maximum(0.0, y + (E @ u_y - e) / lip)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = mu_new + ((t - 1.0) / t_new) * (mu_new - mu)
        mu, t = mu_new, t_new
        u = -(Hinv_q + Hinv_Et @ mu)
        res = kkt_residual(H, q, E, e, u, mu)
        if res < best[0]:
            best = (res, u, mu)
        if res <= tol:
            break
    return best[1], best[2], best[0]


def kkt_tolerance(q, e):
    """``KKT_TOL`` scaled by the data magnitude (never below ``KKT_TOL``)."""
    scale = 1.0
    if np.size(q):
        scale = max(scale, float(np.abs(q).max()))
    if np.size(e):
        scale = max(scale, float(np.abs(e).max()))
    return KKT_TOL * scale


def qp_solve(H, q, E, e, warm_active=None, cache=None, chol=None):
    """Solve ``min 0.5 u'Hu + q'u  s.t.  E u <= e`` for positive definite ``H``.

    ``warm_active`` is a candidate optimal active set; it is accepted only
    if the resulting point passes the KKT test.  Otherwise the dual
    active-set method runs from the unconstrained minimiser, falling back to
    accelerated dual projected gradient if it exceeds its iteration budget.

    Raises
    ------
    InfeasiblePolytope
    MaxIterations
        If neither method reaches the KKT tolerance.
    """
    H = np.asarray(H, float)
    q = np.asarray(q, float)
    tol = kkt_tolerance(q, e)
    if warm_active is not None:
        got = _solve_on_active(H, q, E, e, warm_active, cache)
        if got is not None:
            u, mu = got
            res = kkt_residual(H, q, E, e, u, mu)
            if res <= tol:
                return QPResult(u, mu, tuple(warm_active), res, 0, "warm")
    if chol is None:
        chol = np.linalg.cholesky(H)
    try:
        u, mu, active, iters = _goldfarb_idnani(H, q, E, e, chol)
    except MaxIterations:
        u, mu, res = _dual_fista(H, q, E, e)
        active = tuple(int(j) for j in np.flatnonzero(mu > 0))
        if res > tol:
            raise MaxIterations(f"QP fallback stalled at KKT residual {res:.3e}", u=u, residual=res)
        return QPResult(u, mu, active, res, ACTIVE_SET_MAX_ITER, "fista")
    active = tuple(sorted(active))
    # re-solve on the final active set to remove accumulated drift
    polished = _solve_on_active(H, q, E, e, active, cache)
    if polished is not None:
        pu, pmu = polished
        pres = kkt_residual(H, q, E, e, pu, pmu)
        res = kkt_residual(H, q, E, e, u, mu)
        if pres <= res:
            u, mu, res = pu, pmu, pres
    else:
        res = kkt_residual(H, q, E, e, u, mu)
    if res > tol:
        u2, mu2, res2 = _dual_fista(H, q, E, e, mu0=mu)
        if res2 < res:
            u, mu, res = u2, mu2, res2
        if res > tol:
            raise MaxIterations(f"QP stalled at KKT residual {res:.3e}", u=u, residual=res)
    return QPResult(u, mu, active, res, iters, "active-set")


@dataclass
class LocalSubproblem:
    """Everything agent ``i`` needs for its inner QP at one MPC step."""

    H_cost: np.ndarray
    g_base: np.ndarray
    const_term: float
    G: np.ndarray
    F: np.ndarray
    b_eps: np.ndarray
    l: int
    x0: np.ndarray
    E: np.ndarray
    e: np.ndarray
    m_J: float
    L_J: float
    chol: np.ndarray = None
    cache: dict = field(default_factory=dict, repr=False)
    last_active: tuple = None
    last: QPResult = None

    def __post_init__(self):
        if self.chol is None:
            self.chol = np.linalg.cholesky(self.H_cost)

    @property
    def offset(self):
        """``F x0 - b/l``: the part of the local residual not depending on ``u``."""
        return self.F @ self.x0 - self.b_eps / self.l

    def residual(self, u):
        """``f_i(x0, u) - b/l``."""
        return self.offset + self.G @ u

    def cost(self, u):
        return float(0.5 * u @ self.H_cost @ u + self.g_base @ u + self.const_term)


def build_subproblem(cost, template, coupling, i, x0, cache=None):
    """Assemble agent ``i``'s subproblem from condensed data at state ``x0``.

    ``cache`` (a dict) may be shared between MPC steps of the same agent
    because the KKT matrices depend only on ``H`` and ``E``.
    """
    x0 = np.asarray(x0, float)
    poly = template.at(x0)
    m_J, L_J = cost.bounds
    sub = LocalSubproblem(
        H_cost=cost.H,
        g_base=cost.linear(x0),
        const_term=cost.constant(x0),
        G=coupling.G[i],
        F=coupling.F[i],
        b_eps=coupling.b_eps,
        l=coupling.l,
        x0=x0,
        E=poly.E,
        e=poly.e,
        m_J=m_J,
        L_J=L_J,
    )
    if cache is not None:
        sub.cache = cache
    return sub


def solve_local(sub, lambda_i):
    """Minimiser of the agent Lagrangian over the local polytope.

    Returns
    -------
    u_tilde : ndarray
    kkt_residual : float
    """
    lam = np.asarray(lambda_i, float)
    q = sub.g_base + sub.G.T @ lam if lam.size else sub.g_base
    result = qp_solve(sub.H_cost, q, sub.E, sub.e, warm_active=sub.last_active,
                      cache=sub.cache, chol=sub.chol)
    sub.last_active = result.active
    sub.last = result
    return result.u, result.residual


def dual_value_and_gradient(sub, lambda_i):
    """Local dual function and its gradient.

    ``psi = -J(u(lam)) - lam'(f(u(lam)) - b/l)`` and
    ``grad = -(f(u(lam)) - b/l)``.
    """
    lam = np.asarray(lambda_i, float)
    u, _ = solve_local(sub, lam)
    r = sub.residual(u)
    psi = -sub.cost(u) - float(lam @ r)
    return psi, -r
