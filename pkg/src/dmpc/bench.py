"""Benchmark report and parameter sweeps: CSV tables plus PNG figures."""

import csv
import logging
from pathlib import Path

import numpy as np

from .contraction_cert import network_spectral_radius
from .dmpc_loop import build_problem, simulate_closed_loop
from .errors import ValidationError
from .oracle import centralized_qp, saddle_point
from .pdg_engine import TRACE_COLUMNS, run_algorithm1, stepsize_bounds

__all__ = [
    "run_benchmark",
    "sweep",
    "first_step_analysis",
    "certificate_rows",
    "trace_rows",
    "total_input",
    "oracle_rows",
    "write_csv",
    "SWEEP_PARAMS",
]

log = logging.getLogger(__name__)

SWEEP_PARAMS = ("rho", "eps")
SETTLE_FRACTION = 0.02


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def total_input(problem, trace):
    """Per-agent inputs and their sum in original units (``q = u + u_bar``)."""
    ubar = [a.u_bar for a in problem.config.agents]
    q = np.array([[float(np.sum(r["u"][i] + ubar[i])) for i in range(problem.l)] for r in trace.rows])
    return q, q.sum(axis=1)


def trace_rows(problem, trace):
    """Rows of the closed-loop trace table, one per (t, agent)."""
    n = problem.plants[0].n
    m = problem.plants[0].m
    p = problem.coupled.p
    header = (["t", "agent"] + [f"x{j + 1}" for j in range(n)] + [f"u{j + 1}" for j in range(m)]
              + [f"q{j + 1}" for j in range(m)] + ["V"] + [f"coupled{j + 1}" for j in range(p)]
              + ["iterations_used", "k_bar", "exit_reason", "eps_feasible", "max_violation",
                 "lyapunov_decrease", "lyapunov_decrease_ok", "candidate_feasible", "terminal_rows",
                 "in_terminal"])
    rows = []
    for r in trace.rows:
        for i in range(problem.l):
            ubar = problem.config.agents[i].u_bar
            rows.append([r["t"], i + 1, *r["x"][i], *r["u"][i], *(r["u"][i] + ubar), r["V"],
                         *r["coupled_lhs"], r["iterations"], r["k_bar"], r["exit_reason"],
                         r["eps_feasible"], r["max_violation"], r["lyapunov_decrease"],
                         r["lyapunov_decrease_ok"], r["candidate_feasible"], r["terminal_rows"][i],
                         r["in_terminal"]])
    return header, rows


def first_step_analysis(problem, extra_iterations=0, exit_test=None, k_bar=None):
    """The distributed iteration at the initial states with the saddle-point oracle attached.

    Returns ``(result, y_star, central)``; the trace carries the
    M-distance to ``y_star``.  ``extra_iterations`` continues past the
    stopping iteration (early exit is then disabled).
    """
    xs = [np.array(a.x0, float) for a in problem.config.agents]
    subs = problem.subproblems(xs)
    y_star, central = saddle_point(subs, project_lambda=problem.params.project_lambda)
    result = run_algorithm1(subs, problem.graph, problem.params, problem.eps, problem.coupling.p, problem.N,
                            exit_test=exit_test or problem.config.exit_test, k_bar=k_bar, strict=False,
                            oracle=y_star, record=True, extra_iterations=extra_iterations)
    return result, y_star, central


def certificate_rows(problem, params=None):
    """Certificate table: one row per (degree, Theta sample) plus bound checks."""
    params = params or problem.params
    header = ["d", "sample", "theta_eig_lo", "theta_eig_hi", "upsilon3_mineig", "upsilon3_closed_form_err",
              "schur_mineig", "direct_lmax", "tau2", "schur_ok", "direct_ok"]
    rows = []
    for cert in problem.certificates(params):
        for s in cert.samples:
            rows.append([cert.d, s.label, s.theta_eig_lo, s.theta_eig_hi, s.upsilon3_mineig,
                         s.upsilon3_closed_form_err, s.schur_mineig, s.direct_lmax, s.tau2, s.schur_ok,
                         s.direct_ok])
    return header, rows


def certificate_summary(problem, params=None):
    """Scalar diagnostics printed by ``certify`` and stored by the report."""
    params = params or problem.params
    certs = problem.certificates(params)
    bounds = stepsize_bounds(params.alpha, params.beta, problem.sigma[0], problem.sigma[1],
                             problem.graph.degrees, params.rho)
    rho_net = network_spectral_radius(params.alpha, params.beta, problem.graph.laplacian, problem.thetas())
    return {
        "alpha": params.alpha,
        "beta": params.beta,
        "rho": params.rho,
        "tau": params.tau,
        "sigma_lo": problem.sigma[0],
        "sigma_hi": problem.sigma[1],
        "m_J": problem.m_J,
        "L_J": problem.L_J,
        "upsilon3_mineig": min(c.upsilon3_mineig for c in certs),
        "schur_mineig": min(c.schur_mineig for c in certs),
        "direct_lmax": max(c.direct_lmax for c in certs),
        "tau2": min(s.tau2 for c in certs for s in c.samples),
        "schur_ok": all(c.valid for c in certs),
        "direct_ok": all(c.direct_ok for c in certs),
        "beta_within_bound": all(b["beta_ok"] for b in bounds),
        "alpha_within_bound": all(b["alpha_ok"] for b in bounds),
        "beta_max": min(b["beta_max"] for b in bounds),
        "alpha_max": min(b["alpha_max"] for b in bounds),
        "network_spectral_radius": rho_net,
    }


def oracle_rows(problem):
    """Centralised solution at the initial states: ``u*`` per agent and ``lam*``."""
    xs = [np.array(a.x0, float) for a in problem.config.agents]
    subs = problem.subproblems(xs)
    sol = centralized_qp(subs)
    rows = []
    for i, u in enumerate(sol.u, start=1):
        for j, v in enumerate(u):
            rows.append(["u", i, j, float(v)])
    for j, v in enumerate(sol.lam):
        rows.append(["lambda", 0, j, float(v)])
    rows.append(["objective", 0, 0, sol.objective])
    return ["quantity", "agent", "index", "value"], rows


def _settling_step(series):
    dev = np.abs(np.asarray(series) - series[-1])
    peak = dev.max()
    if peak == 0.0:
        return 0
    outside = np.flatnonzero(dev > SETTLE_FRACTION * peak)
    return int(outside[-1] + 1) if outside.size else 0


def run_benchmark(config, out_dir, plots=True, trace=None):
    """Simulate ``config`` and write the report files into ``out_dir``.

    Files: ``trace.csv`` (closed loop), ``residual.csv`` (distributed iteration at
    the initial states, with the oracle distance), ``certificate.csv``,
    ``summary.csv``, ``fig_inputs.csv`` and ``fig_states.csv`` plus PNG
    renderings of the two figure tables.

    Returns
    -------
    dict
        Name to path of every written file, plus ``"trace"`` and
        ``"problem"`` entries holding the in-memory objects.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(config)
    if trace is None:
        trace = simulate_closed_loop(problem)
    files = {"problem": problem, "trace": trace}

    header, rows = trace_rows(problem, trace)
    files["trace.csv"] = write_csv(out / "trace.csv", header, rows)

    if problem.coupling.p:
        res, _, _ = first_step_analysis(problem)
        files["residual.csv"] = write_csv(out / "residual.csv", TRACE_COLUMNS, res.trace)
        header, rows = certificate_rows(problem)
        files["certificate.csv"] = write_csv(out / "certificate.csv", header, rows)
        summary = certificate_summary(problem)
    else:
        res, summary = None, {}

    q, total = total_input(problem, trace)
    t = [r["t"] for r in trace.rows]
    files["fig_inputs.csv"] = write_csv(
        out / "fig_inputs.csv",
        ["t"] + [f"q{i + 1}" for i in range(problem.l)] + ["total_q"],
        [[tt, *qq, tot] for tt, qq, tot in zip(t, q, total)],
    )
    n = problem.plants[0].n
    states = trace.states()
    files["fig_states.csv"] = write_csv(
        out / "fig_states.csv",
        ["t"] + [f"x{i + 1}_{j + 1}" for i in range(problem.l) for j in range(n)],
        [[tt, *states[k].reshape(-1)] for k, tt in enumerate(t)],
    )

    monitors = {
        "steps": len(trace.rows) - 1,
        "halted": trace.halted,
        "terminal_reached_at": trace.terminal_reached_at,
        "max_total_q": float(total.max()) if total.size else float("nan"),
        "max_coupled": max((float(r["coupled_lhs"].max()) for r in trace.rows if r["coupled_lhs"].size),
                           default=float("nan")),
        "final_state_norm": float(np.linalg.norm(states[-1], axis=1).max()),
        "eps_feasible_all": all(r["eps_feasible"] for r in trace.rows),
        "lyapunov_ok_all": all(r["lyapunov_decrease_ok"] for r in trace.rows[1:] if r["pre_terminal"]),
        "candidate_ok_all": all(r["candidate_feasible"] for r in trace.rows[1:]),
        "total_iterations": sum(r["iterations"] for r in trace.rows),
    }
    summary = {**summary, **monitors}
    files["summary.csv"] = write_csv(out / "summary.csv", ["key", "value"], sorted(summary.items()))

    if plots:
        from . import plotting

        bound = None
        if problem.coupled.p == 1 and not any(b.any() for b in problem.coupled.phi_x):
            # a single input-only coupled row bounds the total input
            ubar_total = sum(float(a.u_bar.sum()) for a in problem.config.agents)
            c = float(problem.coupled.phi_u[0].reshape(-1)[0])
            if all(np.allclose(b, c) for b in problem.coupled.phi_u):
                bound = 1.0 / c + ubar_total
        files["fig_inputs.png"] = plotting.plot_inputs(out / "fig_inputs.png", t, list(q.T), total, bound)
        x_series = [[states[:, i, j] for j in range(n)] for i in range(problem.l)]
        files["fig_states.png"] = plotting.plot_states(out / "fig_states.png", t, x_series)
        if res is not None:
            ks = sorted({row[0] for row in res.trace})
            stat = [[row[2] for row in res.trace if row[1] == i + 1] for i in range(problem.l)]
            stat = [np.maximum(s, 1e-16) for s in stat]
            files["residual.png"] = plotting.plot_residuals(out / "residual.png", ks, stat,
                                                            "stationarity |grad + gamma|")
    return files


def sweep(config, param, values, out_dir, plots=True):
    """Closed-loop total input for each value of ``param``, aligned on ``t``.

    Writes ``sweep_<param>.csv``: one column per value, then summary rows
    ``peak``, ``max_abs_delta`` and ``settling_step``.

    Returns
    -------
    dict
        ``"path"``, ``"series"`` (value to total-input array), ``"summary"``.
    """
    if param not in SWEEP_PARAMS:
        raise ValidationError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    values = [float(v) for v in values]
    if not values:
        raise ValidationError("sweep needs at least one value")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    series, summary = {}, {}
    for v in values:
        problem = build_problem(config.replace(**{param: v}))
        trace = simulate_closed_loop(problem)
        _, total = total_input(problem, trace)
        series[v] = total
        summary[v] = {
            "peak": float(total.max()),
            "max_abs_delta": float(np.abs(np.diff(total)).max()) if total.size > 1 else 0.0,
            "settling_step": _settling_step(total),
        }
        log.info("%s = %g: peak %.6f, max |delta| %.6f", param, v, summary[v]["peak"], summary[v]["max_abs_delta"])
    T = max(len(s) for s in series.values())
    rows = []
    for t in range(T):
        rows.append([t] + [series[v][t] if t < len(series[v]) else None for v in values])
    for key in ("peak", "max_abs_delta", "settling_step"):
        rows.append([key] + [summary[v][key] for v in values])
    header = ["t"] + [f"{param}={v:g}" for v in values]
    path = write_csv(out / f"sweep_{param}.csv", header, rows)
    result = {"path": path, "series": series, "summary": summary}
    if plots:
        from . import plotting

        result["png"] = plotting.plot_sweep(out / f"sweep_{param}.png", list(range(T)), series, param)
    return result
