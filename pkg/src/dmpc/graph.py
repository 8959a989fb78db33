"""Weighted undirected communication graphs and their Laplacians."""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

__all__ = [
    "CommGraph",
    "NonSymmetric",
    "NegativeWeight",
    "SelfLoop",
    "build_graph",
    "validate_connectivity",
]

EIG_ZERO_TOL = 1e-10


class NonSymmetric(ValidationError):
    pass


class NegativeWeight(ValidationError):
    pass


class SelfLoop(ValidationError):
    pass


@dataclass(frozen=True)
class CommGraph:
    """Communication topology of ``l`` agents.

    Attributes
    ----------
    adjacency : ndarray, shape (l, l)
        Symmetric nonnegative weights ``a_ij`` with zero diagonal.
    degrees : ndarray, shape (l,)
    laplacian : ndarray, shape (l, l)
        ``D - A``.
    laplacian_sqrt : ndarray, shape (l, l)
        Symmetric PSD square root of the Laplacian.
    eigenvalues : ndarray, shape (l,)
        Laplacian spectrum in ascending order.
    """

    adjacency: np.ndarray
    degrees: np.ndarray
    laplacian: np.ndarray
    laplacian_sqrt: np.ndarray
    eigenvalues: np.ndarray

    @property
    def l(self):
        return self.adjacency.shape[0]

    def neighbors(self, i):
        return [j for j in range(self.l) if self.adjacency[i, j] > 0]

    @property
    def d_max(self):
        return float(self.degrees.max())

    @property
    def d_min(self):
        return float(self.degrees.min())


def build_graph(adjacency):
    """Validate an adjacency matrix and derive degrees, Laplacian and its root.

    Raises
    ------
    NonSymmetric, NegativeWeight, SelfLoop
        The message names the first offending index pair (1-based).
    """
    a = np.array(adjacency, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"adjacency must be square, got shape {a.shape}")
    l = a.shape[0]
    for i in range(l):
        if a[i, i] != 0.0:
            raise SelfLoop(f"self-loop at ({i + 1}, {i + 1}): a_ii = {a[i, i]}")
    for i in range(l):
        for j in range(l):
            if a[i, j] < 0.0:
                raise NegativeWeight(f"negative weight at ({i + 1}, {j + 1}): {a[i, j]}")
            if abs(a[i, j] - a[j, i]) > 1e-12:
                raise NonSymmetric(
                    f"a[{i + 1},{j + 1}] = {a[i, j]} differs from a[{j + 1},{i + 1}] = {a[j, i]}"
                )
    # exact symmetry so downstream eigensolves see a symmetric matrix
    a = 0.5 * (a + a.T)
    degrees = a.sum(axis=1)
    lap = np.diag(degrees) - a
    nu, q = np.linalg.eigh(lap)
    nu_clipped = np.where(nu < EIG_ZERO_TOL, 0.0, nu)
    root = (q * np.sqrt(nu_clipped)) @ q.T
    root = 0.5 * (root + root.T)
    return CommGraph(
        adjacency=a,
        degrees=degrees,
        laplacian=lap,
        laplacian_sqrt=root,
        eigenvalues=nu_clipped,
    )


def validate_connectivity(g):
    """True iff the algebraic connectivity exceeds the zero tolerance."""
    if g.l == 1:
        # a lone agent is trivially in consensus with itself
        return True
    return bool(g.eigenvalues[1] > EIG_ZERO_TOL)
