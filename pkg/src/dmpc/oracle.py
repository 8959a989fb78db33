"""Centralised reference solutions.

The coupled QP is handed to cvxpy (Clarabel) as one problem over all
agents' input sequences, so it shares no code path with the distributed
iteration or the local active-set solver.
"""

import cvxpy as cp
import numpy as np

from .errors import SolverError

__all__ = ["CentralSolution", "centralized_qp", "saddle_point"]


class CentralSolution:
    def __init__(self, u, lam, status, objective):
        self.u = u
        self.lam = lam
        self.status = status
        self.objective = objective


def centralized_qp(subproblems, equality=False, coupled=True):
    """Solve ``min sum_i J_i`` over local polytopes and the stacked coupled constraint.

    With ``equality=True`` the coupled constraint is imposed as
    ``sum_i f_i = b``, the problem whose multiplier the unprojected
    iteration converges to.  ``coupled=False`` drops it entirely.

    Returns
    -------
    CentralSolution
        ``lam`` is the multiplier of the coupled constraint (oriented so
        that it enters the Lagrangian as ``+lam'(sum f - b)``).
    """
    us = [cp.Variable(sub.H_cost.shape[0]) for sub in subproblems]
    obj = 0
    cons = []
    for sub, u in zip(subproblems, us):
        obj = obj + 0.5 * cp.quad_form(u, cp.psd_wrap(sub.H_cost)) + sub.g_base @ u + sub.const_term
        if sub.E.shape[0]:
            cons.append(sub.E @ u <= sub.e)
    Np = subproblems[0].b_eps.size
    coupling = None
    if coupled and Np:
        lhs = sum(sub.G @ u + sub.F @ sub.x0 for sub, u in zip(subproblems, us))
        b = subproblems[0].b_eps
        coupling = (lhs == b) if equality else (lhs <= b)
        cons.append(coupling)
    prob = cp.Problem(cp.Minimize(obj), cons)
    try:
        prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12,
                   tol_ktratio=1e-10, max_iter=500)
    except cp.error.SolverError as exc:
        raise SolverError(f"centralised QP failed: {exc}") from exc
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise SolverError(f"centralised QP status {prob.status}")
    lam = np.zeros(Np)
    if coupling is not None:
        lam = np.asarray(coupling.dual_value, float).reshape(-1)
    return CentralSolution([np.asarray(u.value, float) for u in us], lam, prob.status, float(prob.value))


def saddle_point(subproblems, project_lambda=False):
    """Fixed point ``y*`` of the iteration, stacked like ``PdgState.y``.

    ``lam_i* = lam*`` for all agents and ``gamma_i* = f_i(u_i*) - b/l``.
    For the projected iteration ``gamma*`` is only unique on the active
    rows; this helper returns the unprojected choice there too.
    """
    sol = centralized_qp(subproblems, equality=not project_lambda)
    parts = []
    for sub, u in zip(subproblems, sol.u):
        parts.append(np.concatenate([sol.lam, sub.residual(u)]))
    return np.concatenate(parts), sol
