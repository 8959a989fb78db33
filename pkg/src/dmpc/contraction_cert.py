"""Numerical checks of the contraction claim for the primal-dual iteration.

For one agent with degree ``d`` the linearised update of ``y = (lam, gamma)``
about the saddle point is

    Xi = [[I - alpha Theta, -alpha I],
          [beta d I,         I      ]],      Theta = G H^{-1} G',

and the claim is ``Xi' M Xi <= tau^2 M`` for the metric

    M = [[beta d I,       alpha beta d I],
         [alpha beta d I, alpha I       ]],  tau^2 = 1 - rho alpha beta d.

:func:`build_certificate` evaluates the Schur-complement route and the
direct generalised eigenvalue test for a list of ``Theta`` samples.
:func:`network_spectral_radius` evaluates the full coupled iteration map,
which is what actually governs convergence.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import ValidationError

__all__ = [
    "ContractionCertificate",
    "SampleCheck",
    "MetricNotPD",
    "NonpositiveBounds",
    "theta_bounds",
    "theta_samples",
    "theta_matrix",
    "agent_metric",
    "agent_update_matrix",
    "build_certificate",
    "network_update_matrix",
    "network_spectral_radius",
    "riemannian_energy",
]

PSD_TOL = -1e-9


class MetricNotPD(ValidationError):
    pass


class NonpositiveBounds(ValidationError):
    pass


def theta_bounds(m_J, L_J, zeta_lo, zeta_hi):
    """Eigenvalue interval of ``G H^{-1} G'`` on the row space of ``G``.

    From ``m_J I <= H <= L_J I`` and ``zeta_lo I <= G'G <= zeta_hi I``:
    ``(zeta_lo / L_J, zeta_hi / m_J)``.
    """
    if not (0.0 < m_J <= L_J) or not (0.0 < zeta_lo <= zeta_hi):
        raise NonpositiveBounds(
            f"need 0 < m_J <= L_J and 0 < zeta_lo <= zeta_hi, got m_J={m_J}, L_J={L_J}, "
            f"zeta=({zeta_lo}, {zeta_hi})"
        )
    return zeta_lo / L_J, zeta_hi / m_J


def theta_matrix(G, H):
    T = G @ np.linalg.solve(H, G.T)
    return 0.5 * (T + T.T)


def theta_samples(G, H, m_J, L_J):
    """``Theta`` at ``H = m_J I``, ``H = L_J I`` and the realised Hessian."""
    return [
        ("H=m_J*I", theta_matrix(G, m_J * np.eye(H.shape[0]))),
        ("H=L_J*I", theta_matrix(G, L_J * np.eye(H.shape[0]))),
        ("H=H_cost", theta_matrix(G, H)),
    ]


def agent_metric(alpha, beta, d, dim):
    eye = np.eye(dim)
    return np.block([[beta * d * eye, alpha * beta * d * eye],
                     [alpha * beta * d * eye, alpha * eye]])


def agent_update_matrix(alpha, beta, d, theta):
    dim = theta.shape[0]
    eye = np.eye(dim)
    return np.block([[eye - alpha * theta, -alpha * eye],
                     [beta * d * eye, eye]])


@dataclass
class SampleCheck:
    label: str
    theta_eig_lo: float
    theta_eig_hi: float
    upsilon3_mineig: float
    upsilon3_closed_form_err: float
    schur_mineig: float
    direct_lmax: float
    tau2: float
    symmetry_err: float

    @property
    def schur_ok(self):
        return self.upsilon3_mineig > 0.0 and self.schur_mineig >= PSD_TOL

    @property
    def direct_ok(self):
        return self.direct_lmax <= self.tau2 + 1e-9


@dataclass
class ContractionCertificate:
    """Outcome of the contraction checks for one degree value."""

    alpha: float
    beta: float
    rho: float
    d: float
    tau: float
    sigma_lo: float
    sigma_hi: float
    M: np.ndarray
    samples: list = field(default_factory=list)
    rank_deficient: bool = False

    @property
    def upsilon3_mineig(self):
        return min(s.upsilon3_mineig for s in self.samples)

    @property
    def schur_mineig(self):
        return min(s.schur_mineig for s in self.samples)

    @property
    def direct_lmax(self):
        return max(s.direct_lmax for s in self.samples)

    @property
    def valid(self):
        return all(s.schur_ok for s in self.samples)

    @property
    def direct_ok(self):
        return all(s.direct_ok for s in self.samples)


def build_certificate(alpha, beta, d_i, rho, sigma_lo, sigma_hi, theta_samples, rank_deficient=False):
    """Assemble ``M``, ``Xi``, ``Pi``, ``Upsilon`` per sample and test them.

    ``theta_samples`` is a list of matrices or ``(label, matrix)`` pairs.

    Raises
    ------
    MetricNotPD
        If ``alpha beta d_i >= 1``.
    """
    if alpha <= 0 or beta <= 0 or d_i <= 0 or not (0.0 <= rho < 1.0):
        raise ValidationError("alpha, beta, d_i must be positive and rho in [0, 1)")
    if alpha * beta * d_i >= 1.0:
        raise MetricNotPD(f"alpha*beta*d = {alpha * beta * d_i:.4g} >= 1; metric is not positive definite")
    tau2 = 1.0 - rho * alpha * beta * d_i
    cert = None
    for idx, item in enumerate(theta_samples):
        label, theta = item if isinstance(item, tuple) else (f"sample{idx}", item)
        theta = np.asarray(theta, float)
        if np.abs(theta - theta.T).max() > 1e-10:
            raise ValidationError(f"Theta sample {label} is not symmetric")
        dim = theta.shape[0]
        M = agent_metric(alpha, beta, d_i, dim)
        Xi = agent_update_matrix(alpha, beta, d_i, theta)
        Pi = Xi.T @ M @ Xi - M
        Ups = (tau2 - 1.0) * M - Pi
        sym_err = max(np.abs(Pi - Pi.T).max(), np.abs(Ups - Ups.T).max())
        Ups = 0.5 * (Ups + Ups.T)
        U1, U2, U3 = Ups[:dim, :dim], Ups[dim:, :dim], Ups[dim:, dim:]
        closed = (1.0 - rho) * alpha ** 2 * beta * d_i * np.eye(dim)
        u3_min = float(np.linalg.eigvalsh(U3).min())
        if u3_min > 0.0:
            schur = U1 - U2.T @ np.linalg.solve(U3, U2)
            schur_min = float(np.linalg.eigvalsh(0.5 * (schur + schur.T)).min())
        else:
            schur_min = -np.inf
        lhs = Xi.T @ M @ Xi
        direct = float(sla.eigh(0.5 * (lhs + lhs.T), M, eigvals_only=True).max())
        ev = np.linalg.eigvalsh(theta)
        check = SampleCheck(
            label=label,
            theta_eig_lo=float(ev[0]),
            theta_eig_hi=float(ev[-1]),
            upsilon3_mineig=u3_min,
            upsilon3_closed_form_err=float(np.abs(U3 - closed).max()),
            schur_mineig=schur_min,
            direct_lmax=direct,
            tau2=tau2,
            symmetry_err=float(sym_err),
        )
        if cert is None:
            cert = ContractionCertificate(alpha, beta, rho, d_i, float(np.sqrt(tau2)),
                                          sigma_lo, sigma_hi, M, rank_deficient=rank_deficient)
        cert.samples.append(check)
    return cert


def network_update_matrix(alpha, beta, laplacian, thetas):
    """Linear map of the whole network on ``(Lambda, Gamma)`` (agent-major blocks).

    Rows ``[Lambda; Gamma]``: ``Lambda' = (I - alpha Theta) Lambda - alpha Gamma``,
    ``Gamma' = Gamma + beta (L kron I) Lambda``.
    """
    l = laplacian.shape[0]
    dim = thetas[0].shape[0]
    big_theta = sla.block_diag(*thetas)
    eye = np.eye(l * dim)
    return np.block([[eye - alpha * big_theta, -alpha * eye],
                     [beta * np.kron(laplacian, np.eye(dim)), eye]])


def network_spectral_radius(alpha, beta, laplacian, thetas):
    """Spectral radius of the network map on the invariant subspace ``sum_i gamma_i = 0``."""
    l = laplacian.shape[0]
    dim = thetas[0].shape[0]
    X = network_update_matrix(alpha, beta, laplacian, thetas)
    # constraint rows (1' kron I) Gamma = 0
    C = np.hstack([np.zeros((dim, l * dim)), np.kron(np.ones((1, l)), np.eye(dim))])
    V = sla.null_space(C)
    R = V.T @ X @ V
    return float(np.abs(np.linalg.eigvals(R)).max())


def riemannian_energy(y, y_star, M):
    """Squared ``M``-distance ``(y - y*)' M (y - y*)`` (straight geodesics, constant metric)."""
    dy = np.asarray(y, float) - np.asarray(y_star, float)
    return float(dy @ M @ dy)
