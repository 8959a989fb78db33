"""Problem configuration files.

The format is TOML with sections ``[graph]``, ``[coupling]``, ``[solver]``,
``[sim]`` and one ``[agent.<k>]`` table per agent (k = 1..l).  Keys placed
directly under ``[agent]`` are defaults shared by every agent.  Matrices are
written as row-major nested arrays.
"""

import re
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import DimensionMismatch, EpsOutOfRange, ValidationError

__all__ = [
    "AgentSpec",
    "ProblemConfig",
    "ParseError",
    "benchmark_config",
    "bundled_config_path",
    "load_config",
    "load_config_text",
    "emit_config",
]

AGENT_KEYS = ("A", "B", "x_lo", "x_hi", "u_lo", "u_hi", "Q", "R", "P", "K", "x0", "u_bar")
MATRIX_KEYS = ("A", "B", "Q", "R", "P", "K")
EXIT_TESTS = ("residual", "gamma", "none")
TERMINAL_MODES = ("hard", "auto", "off")


class ParseError(ValidationError):
    pass


@dataclass
class AgentSpec:
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
    x0: np.ndarray
    # steady-state input, only used to report inputs in physical units
    u_bar: np.ndarray = None

    def __post_init__(self):
        for k in MATRIX_KEYS:
            setattr(self, k, np.atleast_2d(np.array(getattr(self, k), dtype=float)))
        for k in ("x_lo", "x_hi", "u_lo", "u_hi", "x0"):
            setattr(self, k, np.array(getattr(self, k), dtype=float).reshape(-1))
        if self.u_bar is None:
            self.u_bar = np.zeros(self.B.shape[1])
        self.u_bar = np.array(self.u_bar, dtype=float).reshape(-1)

    def __eq__(self, other):
        return isinstance(other, AgentSpec) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in AGENT_KEYS
        )


@dataclass
class ProblemConfig:
    adjacency: np.ndarray
    agents: list
    phi_x: list
    phi_u: list
    horizon: int = 8
    eps: float = 0.02
    rho: float = 0.5
    alpha: float = None
    beta: float = None
    steps: int = 60
    project_lambda: bool = False
    warm_start: bool = False
    terminal_law_after: bool = False
    exit_test: str = "residual"
    terminal_constraint: str = "hard"
    source: str = field(default="<memory>", compare=False)

    def __post_init__(self):
        self.adjacency = np.atleast_2d(np.array(self.adjacency, dtype=float))
        self.phi_x = [np.atleast_2d(np.array(b, dtype=float)) for b in self.phi_x]
        self.phi_u = [np.atleast_2d(np.array(b, dtype=float)) for b in self.phi_u]

    @property
    def l(self):
        return len(self.agents)

    @property
    def p(self):
        return self.phi_x[0].shape[0] if self.phi_x else 0

    def __eq__(self, other):
        if not isinstance(other, ProblemConfig):
            return NotImplemented
        for f in fields(self):
            if not f.compare:
                continue
            a, b = getattr(self, f.name), getattr(other, f.name)
            if f.name in ("phi_x", "phi_u"):
                if len(a) != len(b) or not all(np.array_equal(x, y) for x, y in zip(a, b)):
                    return False
            elif isinstance(a, np.ndarray):
                if not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    def replace(self, **changes):
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return ProblemConfig(**data)


def benchmark_config(**overrides):
    """Four coupled double-tank subsystems on a ring, regulated in shifted coordinates."""
    A = [[0.8750, 0.1250], [0.1250, 0.8047]]
    B = [[0.3], [0.0]]
    P = [[31.7459, 9.8300], [9.8300, 56.3415]]
    K = [[-1.7916, -0.7337]]
    x0s = [
        [-0.2264, -0.3981],
        [0.4520, -0.3689],
        [-0.5311, -0.2828],
        [-0.4397, -0.4897],
    ]
    agents = [
        AgentSpec(A=A, B=B, x_lo=[-1.0, -0.64], x_hi=[1.0, 0.64], u_lo=[-0.3], u_hi=[0.3],
                  Q=10.0 * np.eye(2), R=[[1.0]], P=P, K=K, x0=x0, u_bar=[0.3])
        for x0 in x0s
    ]
    adjacency = [[0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0]]
    cfg = ProblemConfig(
        adjacency=adjacency,
        agents=agents,
        phi_x=[[[0.0, 0.0]]] * 4,
        phi_u=[[[1.25]]] * 4,
        horizon=8,
        eps=0.02,
        rho=0.5,
        steps=60,
        terminal_constraint="auto",
        source="benchmark",
    )
    return cfg.replace(**overrides) if overrides else cfg


def bundled_config_path():
    return Path(str(resources.files("dmpc") / "data" / "watertank.cfg"))


def _line_of(text, section, key=None):
    """1-based line of ``key`` inside ``[section]`` (or of the header), else 0."""
    current = None
    header = re.compile(r"^\s*\[([^\]]+)\]\s*$")
    for no, line in enumerate(text.splitlines(), start=1):
        m = header.match(line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section and re.match(rf"^\s*{re.escape(key)}\s*=", line):
            return no
    return 0


class _Reader:
    def __init__(self, text, path):
        self.text = text
        self.path = path

    def fail(self, section, key, msg, cls=ParseError):
        line = _line_of(self.text, section, key)
        where = f"{self.path}:{line}" if line else str(self.path)
        raise cls(f"{where}: [{section}] {key + ': ' if key else ''}{msg}")

    def get(self, table, section, key, kind, default=None, required=False):
        if key not in table:
            if required:
                self.fail(section, None, f"missing key '{key}'")
            return default
        value = table[key]
        try:
            if kind == "matrix":
                arr = np.array(value, dtype=float)
                if arr.ndim == 0:
                    arr = arr.reshape(1, 1)
                elif arr.ndim == 1:
                    arr = arr.reshape(1, -1)
                if arr.ndim != 2:
                    raise ValueError("expected a matrix")
                return arr
            if kind == "vector":
                arr = np.array(value, dtype=float)
                if arr.ndim > 1:
                    raise ValueError("expected a vector")
                return arr.reshape(-1)
            if kind == "int":
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ValueError("expected an integer")
                return value
            if kind == "float":
                if isinstance(value, bool):
                    raise ValueError("expected a number")
                return float(value)
            if kind == "bool":
                if not isinstance(value, bool):
                    raise ValueError("expected true/false")
                return value
            if kind == "str":
                return str(value)
        except (TypeError, ValueError) as exc:
            self.fail(section, key, f"{exc} (got {value!r})")
        raise AssertionError(kind)


def load_config_text(text, path="<string>"):
    """Parse and validate configuration text; see :func:`load_config`."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    rd = _Reader(text, path)
    for sec in ("graph", "coupling", "solver", "agent"):
        if sec not in data:
            raise ParseError(f"{path}: missing section [{sec}]")
    adjacency = rd.get(data["graph"], "graph", "adjacency", "matrix", required=True)
    l = adjacency.shape[0]

    agent_table = data["agent"]
    defaults = {k: v for k, v in agent_table.items() if not isinstance(v, dict)}
    unknown = set(defaults) - set(AGENT_KEYS)
    if unknown:
        rd.fail("agent", sorted(unknown)[0], "unknown key")
    agents = []
    for k in range(1, l + 1):
        name = str(k)
        if name not in agent_table:
            raise ParseError(f"{path}: adjacency has {l} agents but section [agent.{k}] is missing")
        merged = dict(defaults)
        merged.update(agent_table[name])
        section = f"agent.{k}"
        bad = set(agent_table[name]) - set(AGENT_KEYS)
        if bad:
            rd.fail(section, sorted(bad)[0], "unknown key")
        vals = {}
        for key in AGENT_KEYS:
            sec = section if key in agent_table[name] else "agent"
            kind = "matrix" if key in MATRIX_KEYS else "vector"
            vals[key] = rd.get(merged, sec, key, kind, required=(key != "u_bar"))
        n = vals["A"].shape[0]
        m = vals["B"].shape[1] if vals["B"].shape[0] == n else None
        shape_rules = {
            "A": (n, n), "B": (n, m), "Q": (n, n), "R": (m, m), "P": (n, n), "K": (m, n),
            "x_lo": (n,), "x_hi": (n,), "u_lo": (m,), "u_hi": (m,), "x0": (n,), "u_bar": (m,),
        }
        for key, shape in shape_rules.items():
            if vals[key] is None:
                continue
            if m is None or vals[key].shape != shape:
                sec = section if key in agent_table[name] else "agent"
                rd.fail(sec, key, f"shape {vals[key].shape}, expected {shape}", DimensionMismatch)
        agents.append(AgentSpec(**vals))
    extra = [k for k, v in agent_table.items() if isinstance(v, dict) and k not in {str(i) for i in range(1, l + 1)}]
    if extra:
        rd.fail(f"agent.{extra[0]}", None, f"agent index outside 1..{l}")

    cp_ = data["coupling"]
    phi_x = cp_.get("phi_x", [])
    phi_u = cp_.get("phi_u", [])
    p = cp_.get("p")
    if not isinstance(phi_x, list) or len(phi_x) != l:
        rd.fail("coupling", "phi_x", f"expected one block per agent ({l})", DimensionMismatch)
    if not isinstance(phi_u, list) or len(phi_u) != l:
        rd.fail("coupling", "phi_u", f"expected one block per agent ({l})", DimensionMismatch)
    px_blocks, pu_blocks = [], []
    for i in range(l):
        n, m = agents[i].A.shape[0], agents[i].B.shape[1]
        bx = np.array(phi_x[i], dtype=float)
        bu = np.array(phi_u[i], dtype=float)
        if p == 0:
            bx, bu = np.zeros((0, n)), np.zeros((0, m))
        if bx.ndim != 2 or bx.shape[1] != n:
            rd.fail("coupling", "phi_x", f"block {i + 1} has shape {bx.shape}, expected (p, {n})", DimensionMismatch)
        if bu.ndim != 2 or bu.shape[1] != m:
            rd.fail("coupling", "phi_u", f"block {i + 1} has shape {bu.shape}, expected (p, {m})", DimensionMismatch)
        px_blocks.append(bx)
        pu_blocks.append(bu)
    rows = {b.shape[0] for b in px_blocks + pu_blocks}
    if len(rows) != 1:
        rd.fail("coupling", "phi_u", f"blocks disagree on row count {sorted(rows)}", DimensionMismatch)

    sv = data["solver"]
    horizon = rd.get(sv, "solver", "horizon", "int", required=True)
    if horizon < 1:
        rd.fail("solver", "horizon", f"horizon must be >= 1, got {horizon}")
    eps = rd.get(sv, "solver", "eps", "float", required=True)
    bound = 1.0 / (horizon * l)
    if not (0.0 < eps < bound):
        rd.fail("solver", "eps", f"eps = {eps} must lie in (0, 1/(N*l)) = (0, {bound:.6g}) with N = {horizon}, l = {l}",
                EpsOutOfRange)
    rho = rd.get(sv, "solver", "rho", "float", default=0.5)
    if not (0.0 < rho < 1.0):
        rd.fail("solver", "rho", f"rho must lie in (0, 1), got {rho}")
    alpha = rd.get(sv, "solver", "alpha", "float")
    beta = rd.get(sv, "solver", "beta", "float")
    if (alpha is None) != (beta is None):
        rd.fail("solver", "alpha" if alpha is not None else "beta", "alpha and beta must be overridden together")
    for key, val in (("alpha", alpha), ("beta", beta)):
        if val is not None and val <= 0:
            rd.fail("solver", key, "must be positive")
    exit_test = rd.get(sv, "solver", "exit_test", "str", default="residual")
    if exit_test not in EXIT_TESTS:
        rd.fail("solver", "exit_test", f"must be one of {EXIT_TESTS}")
    terminal = rd.get(sv, "solver", "terminal_constraint", "str", default="hard")
    if terminal not in TERMINAL_MODES:
        rd.fail("solver", "terminal_constraint", f"must be one of {TERMINAL_MODES}")

    sim = data.get("sim", {})
    steps = rd.get(sim, "sim", "steps", "int", default=60)
    if steps < 0:
        rd.fail("sim", "steps", "must be >= 0")

    cfg = ProblemConfig(
        adjacency=adjacency,
        agents=agents,
        phi_x=px_blocks,
        phi_u=pu_blocks,
        horizon=horizon,
        eps=eps,
        rho=rho,
        alpha=alpha,
        beta=beta,
        steps=steps,
        project_lambda=rd.get(sv, "solver", "project_lambda", "bool", default=False),
        warm_start=rd.get(sv, "solver", "warm_start", "bool", default=False),
        terminal_law_after=rd.get(sim, "sim", "terminal_law_after", "bool", default=False),
        exit_test=exit_test,
        terminal_constraint=terminal,
        source=str(path),
    )
    _prevalidate(cfg, rd)
    return cfg


def _prevalidate(cfg, rd):
    """Run the model-level checks early so errors point into the file."""
    from .graph import build_graph
    from .plant import AgentPlant

    try:
        build_graph(cfg.adjacency)
    except ValidationError as exc:
        rd.fail("graph", "adjacency", str(exc), type(exc))
    for k, a in enumerate(cfg.agents, start=1):
        try:
            AgentPlant.create(a.A, a.B, a.x_lo, a.x_hi, a.u_lo, a.u_hi, a.Q, a.R, a.P, a.K)
        except ValidationError as exc:
            rd.fail(f"agent.{k}", None, str(exc), type(exc))
        if np.any(a.x0 < a.x_lo) or np.any(a.x0 > a.x_hi):
            rd.fail(f"agent.{k}", "x0", "initial state violates the state box")


def load_config(path):
    """Read and validate a configuration file.

    Raises
    ------
    ParseError, DimensionMismatch, EpsOutOfRange
        Messages carry ``path:line`` of the offending key when it can be
        located.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return load_config_text(text, path)


def _tolist(a):
    return np.asarray(a, dtype=float).tolist()


def emit_config(cfg):
    """Serialise ``cfg`` to configuration text that :func:`load_config_text` reads back."""
    solver = {
        "horizon": int(cfg.horizon),
        "eps": float(cfg.eps),
        "rho": float(cfg.rho),
        "project_lambda": bool(cfg.project_lambda),
        "warm_start": bool(cfg.warm_start),
        "exit_test": cfg.exit_test,
        "terminal_constraint": cfg.terminal_constraint,
    }
    if cfg.alpha is not None:
        solver["alpha"] = float(cfg.alpha)
        solver["beta"] = float(cfg.beta)
    coupling = {
        "p": int(cfg.p),
        "phi_x": [_tolist(b) if b.size else [[0.0] * b.shape[1]] for b in cfg.phi_x],
        "phi_u": [_tolist(b) if b.size else [[0.0] * b.shape[1]] for b in cfg.phi_u],
    }
    agents = {}
    for k, a in enumerate(cfg.agents, start=1):
        agents[str(k)] = {key: _tolist(getattr(a, key)) for key in AGENT_KEYS}
    doc = {
        "graph": {"adjacency": _tolist(cfg.adjacency)},
        "coupling": coupling,
        "solver": solver,
        "sim": {"steps": int(cfg.steps), "terminal_law_after": bool(cfg.terminal_law_after)},
        "agent": agents,
    }
    return tomli_w.dumps(doc)
