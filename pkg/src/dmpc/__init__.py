"""Distributed MPC for linear agents sharing coupled constraints.

Agents coordinate through a primal-dual gradient iteration with Laplacian
consensus on local multiplier copies; the constraint tightening lets the
iteration stop early while keeping the closed loop feasible.
"""

from .errors import DmpcError, SolverError, ValidationError
from .graph import CommGraph, build_graph, validate_connectivity

__version__ = "0.1.0"

__all__ = ["DmpcError", "SolverError", "ValidationError", "CommGraph", "build_graph", "validate_connectivity"]
