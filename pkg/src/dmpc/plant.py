"""Agent models, constraint polytopes, MPC cost and coupled-constraint condensation.

Every agent runs the same kind of LTI model

    x(s+1) = A x(s) + B u(s)

with box constraints on states and inputs, a quadratic stage cost
``x'Qx + u'Ru`` and terminal cost ``x'Px``.  The shared constraint

    sum_i Phi_x[i] x_i + Phi_u[i] u_i <= 1_p

is condensed over the horizon into ``F_i x_i(t) + G_i u_i`` with a tightened
right-hand side ``b(eps)``.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionMismatch, EpsOutOfRange, ValidationError

__all__ = [
    "AgentPlant",
    "CoupledConstraint",
    "CondensedCoupling",
    "CondensedCost",
    "Polytope",
    "RankDeficient",
    "DegenerateTerminal",
    "prediction_matrices",
    "predict",
    "condense_coupling",
    "condense_cost",
    "local_feasible_polytope",
    "polytope_template",
    "terminal_levels",
    "terminal_normals",
    "tightened_rhs",
    "with_terminal_levels",
]

PD_TOL = 1e-10
DECREASE_TOL = 1e-8
ETA_F_RATIO = 0.9
RANK_TOL = 1e-10


class RankDeficient(ValidationError):
    pass


class DegenerateTerminal(ValidationError):
    pass


def _as_matrix(value, name, rows=None, cols=None):
    m = np.atleast_2d(np.array(value, dtype=float))
    if m.ndim != 2:
        raise DimensionMismatch(f"{name} must be a matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise DimensionMismatch(f"{name} has {m.shape[0]} rows, expected {rows}")
    if cols is not None and m.shape[1] != cols:
        raise DimensionMismatch(f"{name} has {m.shape[1]} columns, expected {cols}")
    return m


def _as_vector(value, name, size):
    v = np.array(value, dtype=float).reshape(-1)
    if v.size != size:
        raise DimensionMismatch(f"{name} has {v.size} entries, expected {size}")
    return v


@dataclass(frozen=True)
class AgentPlant:
    """One subsystem: dynamics, local boxes, cost weights and terminal data.

    Bounds may be ``±inf`` to drop the corresponding polytope rows.
    ``eta``/``eta_f`` are filled in by :func:`with_terminal_levels`; while
    they are ``None`` the local polytope has no terminal rows.
    """

    A: np.ndarray
    B: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    K: np.ndarray
    eta: float = None
    eta_f: float = None

    @classmethod
    def create(cls, A, B, x_lo, x_hi, u_lo, u_hi, Q, R, P, K, eta=None, eta_f=None, check=True):
        A = _as_matrix(A, "A")
        n = A.shape[0]
        A = _as_matrix(A, "A", n, n)
        B = _as_matrix(B, "B", n)
        if B.shape[0] != n:
            raise DimensionMismatch(f"B has {B.shape[0]} rows, expected {n}")
        m = B.shape[1]
        plant = cls(
            A=A,
            B=B,
            x_lo=_as_vector(x_lo, "x_lo", n),
            x_hi=_as_vector(x_hi, "x_hi", n),
            u_lo=_as_vector(u_lo, "u_lo", m),
            u_hi=_as_vector(u_hi, "u_hi", m),
            Q=_as_matrix(Q, "Q", n, n),
            R=_as_matrix(R, "R", m, m),
            P=_as_matrix(P, "P", n, n),
            K=_as_matrix(K, "K", m, n),
            eta=eta,
            eta_f=eta_f,
        )
        if check:
            plant.check()
        return plant

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def A_K(self):
        return self.A + self.B @ self.K

    def terminal_decrease_matrix(self):
        """``A_K' P A_K - P + Q + K' R K``; NSD when the terminal cost decreases."""
        AK = self.A_K
        W = AK.T @ self.P @ AK - self.P + self.Q + self.K.T @ self.R @ self.K
        return 0.5 * (W + W.T)

    def check(self):
        """Raise ``ValidationError`` if any weight or terminal invariant fails."""
        for name, w, strict in (("Q", self.Q, False), ("R", self.R, True), ("P", self.P, True)):
            if np.abs(w - w.T).max() > 1e-12:
                raise ValidationError(f"{name} is not symmetric")
            lo = np.linalg.eigvalsh(w).min()
            if (strict and lo <= PD_TOL) or (not strict and lo < -PD_TOL):
                kind = "positive definite" if strict else "positive semidefinite"
                raise ValidationError(f"{name} must be {kind}; min eigenvalue {lo:.3e}")
        if np.any(self.x_lo >= self.x_hi) or np.any(self.u_lo >= self.u_hi):
            raise ValidationError("box bounds must satisfy lo < hi")
        if np.any(self.x_lo >= 0) or np.any(self.x_hi <= 0) or np.any(self.u_lo >= 0) or np.any(self.u_hi <= 0):
            raise ValidationError("state and input boxes must contain the origin in their interior")
        worst = np.linalg.eigvalsh(self.terminal_decrease_matrix()).max()
        if worst > DECREASE_TOL:
            raise ValidationError(
                f"terminal cost does not decrease under u = Kx: max eigenvalue {worst:.3e} > {DECREASE_TOL}"
            )
        if self.eta is not None:
            if not (self.eta_f is not None and 0 < self.eta_f < self.eta):
                raise ValidationError(f"need 0 < eta_f < eta, got eta={self.eta}, eta_f={self.eta_f}")

    def stage_cost(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return float(x @ self.Q @ x + u @ self.R @ u)

    def terminal_cost(self, x):
        x = np.asarray(x, dtype=float)
        return float(x @ self.P @ x)


@dataclass(frozen=True)
class CoupledConstraint:
    """``sum_i Phi_x[i] x_i + Phi_u[i] u_i <= 1_p``."""

    phi_x: list
    phi_u: list

    def __post_init__(self):
        if len(self.phi_x) != len(self.phi_u):
            raise DimensionMismatch("phi_x and phi_u must list one block per agent")
        rows = {np.atleast_2d(b).shape[0] for b in list(self.phi_x) + list(self.phi_u)}
        if len(rows) > 1:
            raise DimensionMismatch(f"coupling blocks disagree on row count: {sorted(rows)}")

    @property
    def p(self):
        return np.atleast_2d(self.phi_x[0]).shape[0]

    @property
    def rhs(self):
        return np.ones(self.p)

    def lhs(self, xs, us):
        """Evaluate ``sum_i Phi_x x_i + Phi_u u_i`` for one time instant."""
        total = np.zeros(self.p)
        for px, pu, x, u in zip(self.phi_x, self.phi_u, xs, us):
            total += np.asarray(px) @ np.asarray(x, float) + np.asarray(pu) @ np.asarray(u, float)
        return total


@dataclass(frozen=True)
class CondensedCoupling:
    """Horizon-stacked coupled constraint ``sum_i F_i x_i + G_i u_i <= b(eps)``."""

    F: list
    G: list
    b_eps: np.ndarray
    eps: float
    horizon: int
    l: int
    p: int
    zeta_lo: float
    zeta_hi: float
    zeta_per_agent: list = field(default_factory=list)

    def f(self, i, x0, useq):
        return self.F[i] @ np.asarray(x0, float) + self.G[i] @ np.asarray(useq, float)


@dataclass(frozen=True)
class Polytope:
    """``{u : E u <= e}``."""

    E: np.ndarray
    e: np.ndarray

    def contains(self, u, tol=1e-8):
        if self.E.shape[0] == 0:
            return True
        return bool(np.all(self.E @ u <= self.e + tol))

    def max_violation(self, u):
        if self.E.shape[0] == 0:
            return 0.0
        return float(np.max(self.E @ u - self.e))


@dataclass(frozen=True)
class PolytopeTemplate:
    """Row data for ``E u <= c + D x0``; ``E`` does not depend on the state."""

    E: np.ndarray
    c: np.ndarray
    D: np.ndarray

    def at(self, x0):
        return Polytope(self.E, self.c + self.D @ np.asarray(x0, float))


@dataclass(frozen=True)
class CondensedCost:
    """``J(x0, u) = 0.5 u'Hu + (Gx x0)'u + x0' Cxx x0``."""

    H: np.ndarray
    Gx: np.ndarray
    Cxx: np.ndarray

    def linear(self, x0):
        return self.Gx @ np.asarray(x0, float)

    def constant(self, x0):
        x0 = np.asarray(x0, float)
        return float(x0 @ self.Cxx @ x0)

    def value(self, x0, u):
        u = np.asarray(u, float)
        return float(0.5 * u @ self.H @ u + self.linear(x0) @ u + self.constant(x0))

    @property
    def bounds(self):
        ev = np.linalg.eigvalsh(self.H)
        return float(ev[0]), float(ev[-1])


def prediction_matrices(plant, N):
    """Return ``(Sx, Su)`` with stacked ``x(0..N) = Sx x0 + Su u``."""
    n, m = plant.n, plant.m
    Sx = np.zeros(((N + 1) * n, n))
    Su = np.zeros(((N + 1) * n, N * m))
    power = np.eye(n)
    powers = [power]
    for _ in range(N):
        power = plant.A @ power
        powers.append(power)
    for s in range(N + 1):
        Sx[s * n:(s + 1) * n] = powers[s]
        for j in range(s):
            Su[s * n:(s + 1) * n, j * m:(j + 1) * m] = powers[s - 1 - j] @ plant.B
    return Sx, Su


def predict(plant, x0, useq):
    """Roll the dynamics forward; returns an ``(N+1, n)`` trajectory."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    useq = np.asarray(useq, dtype=float).reshape(-1)
    if x0.size != plant.n:
        raise DimensionMismatch(f"x0 has {x0.size} entries, expected {plant.n}")
    if useq.size % plant.m:
        raise DimensionMismatch(f"input sequence length {useq.size} is not a multiple of m={plant.m}")
    N = useq.size // plant.m
    traj = np.empty((N + 1, plant.n))
    traj[0] = x0
    for s in range(N):
        traj[s + 1] = plant.A @ traj[s] + plant.B @ useq[s * plant.m:(s + 1) * plant.m]
    return traj


def tightened_rhs(eps, N, l, p):
    """``b(eps)``: block ``s`` equals ``(1 - eps l (s+1)) 1_p``."""
    return np.repeat(1.0 - eps * l * np.arange(1, N + 1), p)


def check_eps(eps, N, l):
    bound = 1.0 / (N * l)
    if not (0.0 < eps < bound):
        raise EpsOutOfRange(
            f"eps = {eps} outside (0, 1/(N*l)) = (0, {bound:.6g}) for N = {N}, l = {l}"
        )


def condense_coupling(plants, coupled, N, eps, check_rank=True):
    """Stack the coupled constraint over the horizon.

    Block row ``s`` of ``F_i x0 + G_i u`` equals
    ``Phi_x[i] x(s) + Phi_u[i] u(s)`` for ``s = 0..N-1``.

    Raises
    ------
    EpsOutOfRange
        Unless ``0 < eps < 1/(N l)``.
    DimensionMismatch
    RankDeficient
        If some ``G_i' G_i`` has smallest eigenvalue ``<= 1e-10`` (only
        checked when ``p > 0`` and ``check_rank`` is set).
    """
    l = len(plants)
    if N < 1:
        raise ValidationError(f"horizon must be >= 1, got {N}")
    if len(coupled.phi_x) != l:
        raise DimensionMismatch(f"coupling lists {len(coupled.phi_x)} agents, plants list {l}")
    check_eps(eps, N, l)
    p = coupled.p
    F, G, zetas = [], [], []
    for i, plant in enumerate(plants):
        px = _as_matrix(coupled.phi_x[i], f"phi_x[{i}]", cols=plant.n) if p else np.zeros((0, plant.n))
        pu = _as_matrix(coupled.phi_u[i], f"phi_u[{i}]", cols=plant.m) if p else np.zeros((0, plant.m))
        Sx, Su = prediction_matrices(plant, N)
        n, m = plant.n, plant.m
        Fi = np.zeros((N * p, n))
        Gi = np.zeros((N * p, N * m))
        for s in range(N):
            rows = slice(s * p, (s + 1) * p)
            Fi[rows] = px @ Sx[s * n:(s + 1) * n]
            Gi[rows] = px @ Su[s * n:(s + 1) * n]
            Gi[rows, s * m:(s + 1) * m] += pu
        if p:
            ev = np.linalg.eigvalsh(Gi.T @ Gi)
            if check_rank and ev[0] <= RANK_TOL:
                raise RankDeficient(
                    f"agent {i + 1}: G_i'G_i has min eigenvalue {ev[0]:.3e}; no positive lower bound"
                )
            zetas.append((float(ev[0]), float(ev[-1])))
        F.append(Fi)
        G.append(Gi)
    zeta_lo = min(z[0] for z in zetas) if zetas else 0.0
    zeta_hi = max(z[1] for z in zetas) if zetas else 0.0
    return CondensedCoupling(
        F=F,
        G=G,
        b_eps=tightened_rhs(eps, N, l, p),
        eps=float(eps),
        horizon=N,
        l=l,
        p=p,
        zeta_lo=zeta_lo,
        zeta_hi=zeta_hi,
        zeta_per_agent=zetas,
    )


def condense_cost(plant, N):
    """Condense the horizon cost in the input sequence.

    Stage costs run over ``s = 0..N-1`` and the terminal weight applies to
    ``x(N)``.
    """
    Sx, Su = prediction_matrices(plant, N)
    n, m = plant.n, plant.m
    Qbar = np.zeros(((N + 1) * n, (N + 1) * n))
    for s in range(N):
        Qbar[s * n:(s + 1) * n, s * n:(s + 1) * n] = plant.Q
    Qbar[N * n:, N * n:] = plant.P
    Rbar = np.kron(np.eye(N), plant.R)
    H = 2.0 * (Su.T @ Qbar @ Su + Rbar)
    return CondensedCost(
        H=0.5 * (H + H.T),
        Gx=2.0 * Su.T @ Qbar @ Sx,
        Cxx=Sx.T @ Qbar @ Sx,
    )


def terminal_normals(plant, count=16):
    """Boundary normals (whitened coordinates) for the terminal polytope.

    Two dimensions: ``count`` equally spaced angles.  One dimension: ``±1``.
    Higher dimensions: ``±e_j`` plus deterministic pseudo-random unit
    vectors up to ``max(count, 2n)`` rows.
    """
    n = plant.n
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        theta = 2.0 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(theta), np.sin(theta)])
    eye = np.eye(n)
    rows = [eye, -eye]
    extra = max(count, 2 * n) - 2 * n
    if extra > 0:
        w = np.random.default_rng(0).standard_normal((extra, n))
        rows.append(w / np.linalg.norm(w, axis=1, keepdims=True))
    return np.vstack(rows)


def polytope_template(plant, N, terminal=True):
    """Row data of the local feasible set as an affine function of ``x0``.

    Rows, in order: input bounds for ``s = 0..N-1``, state bounds for the
    predicted ``x(1..N-1)``, then tangent halfspaces of the terminal
    ellipsoid ``x(N)' P x(N) <= eta_f`` (only once ``eta_f`` is known).
    With ``terminal=False`` the ellipsoid rows are replaced by the state
    bounds on ``x(N)``.  Infinite bounds produce no rows.
    """
    use_terminal = terminal and plant.eta_f is not None
    n, m = plant.n, plant.m
    Sx, Su = prediction_matrices(plant, N)
    E_rows, c_rows, D_rows = [], [], []

    def add(E, c, D):
        E_rows.append(E)
        c_rows.append(c)
        D_rows.append(D)

    for s in range(N):
        for j in range(m):
            row = np.zeros(N * m)
            row[s * m + j] = 1.0
            if np.isfinite(plant.u_hi[j]):
                add(row, plant.u_hi[j], np.zeros(n))
            if np.isfinite(plant.u_lo[j]):
                add(-row, -plant.u_lo[j], np.zeros(n))
    for s in range(1, N if use_terminal else N + 1):
        Su_s = Su[s * n:(s + 1) * n]
        Sx_s = Sx[s * n:(s + 1) * n]
        for j in range(n):
            if np.isfinite(plant.x_hi[j]):
                add(Su_s[j], plant.x_hi[j], -Sx_s[j])
            if np.isfinite(plant.x_lo[j]):
                add(-Su_s[j], -plant.x_lo[j], Sx_s[j])
    if use_terminal:
        # x'Px <= eta_f  <=>  ||L'x|| <= sqrt(eta_f) with P = L L'
        L = np.linalg.cholesky(plant.P)
        Su_N = Su[N * n:]
        Sx_N = Sx[N * n:]
        radius = np.sqrt(plant.eta_f)
        for w in terminal_normals(plant):
            a = L @ w
            add(a @ Su_N, radius, -(a @ Sx_N))
    if not E_rows:
        return PolytopeTemplate(np.zeros((0, N * m)), np.zeros(0), np.zeros((0, n)))
    return PolytopeTemplate(np.array(E_rows), np.array(c_rows, dtype=float), np.array(D_rows))


def local_feasible_polytope(plant, x0, N):
    """Halfspace form ``{u : E u <= e(x0)}`` of the agent's local feasible set."""
    x0 = _as_vector(x0, "x0", plant.n)
    return polytope_template(plant, N).at(x0)


def _ellipsoid_level(c, d, Pinv):
    """Largest ``eta`` with ``c'x <= d`` on all of ``{x'Px <= eta}``."""
    denom = float(c @ Pinv @ c)
    if denom <= 0.0:
        return np.inf
    if d <= 0.0:
        return 0.0
    return d * d / denom


def terminal_levels(plant, coupled, eps, N, l, i=0):
    """Terminal levels ``(eta, eta_f)`` for agent ``i``.

    ``eta`` is the largest level such that on ``{x'Px <= eta}`` the terminal
    law ``Kx`` respects the input box, ``x`` respects the state box, and the
    agent's equal share of the terminal coupled constraint holds:
    ``(Phi_x + Phi_u K) x <= (1 - eps N l) / l``.  ``eta_f = 0.9 eta``.
    """
    Pinv = np.linalg.inv(plant.P)
    rows = []
    for j in range(plant.m):
        rows.append((plant.K[j], plant.u_hi[j]))
        rows.append((-plant.K[j], -plant.u_lo[j]))
    eye = np.eye(plant.n)
    for j in range(plant.n):
        rows.append((eye[j], plant.x_hi[j]))
        rows.append((-eye[j], -plant.x_lo[j]))
    if coupled is not None and coupled.p:
        share = (1.0 - eps * N * l) / l
        Ck = np.atleast_2d(coupled.phi_x[i]) + np.atleast_2d(coupled.phi_u[i]) @ plant.K
        for row in Ck:
            rows.append((row, share))
    eta = min(_ellipsoid_level(c, d, Pinv) for c, d in rows if np.isfinite(d))
    if not (eta > 0.0) or not np.isfinite(eta):
        raise DegenerateTerminal(f"agent {i + 1}: terminal level eta = {eta}")
    return float(eta), float(ETA_F_RATIO * eta)


def with_terminal_levels(plants, coupled, eps, N):
    """Copies of ``plants`` with ``eta``/``eta_f`` filled in."""
    l = len(plants)
    out = []
    for i, plant in enumerate(plants):
        eta, eta_f = terminal_levels(plant, coupled, eps, N, l, i=i)
        out.append(replace(plant, eta=eta, eta_f=eta_f))
    return out
