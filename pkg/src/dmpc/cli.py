"""Command line entry point: ``dmpc {simulate,certify,sweep,oracle}``.

Exit status is 0 on success, 2 for invalid input and 3 when a solver
fails at run time.
"""

import argparse
import logging
import sys
import time
from pathlib import Path

from .errors import SolverError, ValidationError

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_SOLVER = 3

log = logging.getLogger("dmpc")


def _values(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from exc


def _load(path):
    from .config import benchmark_config, load_config

    if path == "benchmark":
        return benchmark_config()
    return load_config(path)


def cmd_simulate(args):
    from .bench import run_benchmark

    cfg = _load(args.config)
    changes = {}
    if args.steps is not None:
        changes["steps"] = args.steps
    if args.warm_start:
        changes["warm_start"] = True
    if args.project_lambda:
        changes["project_lambda"] = True
    if changes:
        cfg = cfg.replace(**changes)
    t0 = time.perf_counter()
    files = run_benchmark(cfg, args.out, plots=not args.no_plots)
    trace = files["trace"]
    for name, path in files.items():
        if isinstance(path, Path):
            print(path)
    last = trace.rows[-1]
    print(f"steps={len(trace.rows) - 1} iterations={sum(r['iterations'] for r in trace.rows)} "
          f"final_V={last['V']:.3e} elapsed={time.perf_counter() - t0:.2f}s", file=sys.stderr)
    if trace.halted:
        print(f"halted: {trace.halted}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_certify(args):
    from .bench import certificate_rows, certificate_summary
    from .dmpc_loop import build_problem

    cfg = _load(args.config)
    if (args.alpha is None) != (args.beta is None):
        raise ValidationError("--alpha and --beta must be given together")
    t0 = time.perf_counter()
    problem = build_problem(cfg, alpha=args.alpha, beta=args.beta, rho=args.rho)
    if problem.coupling.p == 0:
        print("no coupled constraint: nothing to certify")
        return EXIT_OK
    header, rows = certificate_rows(problem)
    widths = [max(len(h), 12) for h in header]
    print("  ".join(h.rjust(w) for h, w in zip(header, widths)))
    for row in rows:
        cells = [f"{v:.6g}" if isinstance(v, float) else str(v) for v in row]
        print("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    print()
    for key, value in certificate_summary(problem).items():
        print(f"{key:>26} = {value:.6g}" if isinstance(value, float) else f"{key:>26} = {value}")
    print(f"{'elapsed_s':>26} = {time.perf_counter() - t0:.3f}")
    return EXIT_OK


def cmd_sweep(args):
    from .bench import sweep

    cfg = _load(args.config)
    res = sweep(cfg, args.param, args.values, args.out, plots=not args.no_plots)
    print(res["path"])
    for v, s in res["summary"].items():
        print(f"{args.param}={v:g}: peak={s['peak']:.6f} max_abs_delta={s['max_abs_delta']:.6f} "
              f"settling_step={s['settling_step']}")
    return EXIT_OK


def cmd_oracle(args):
    from .bench import oracle_rows, write_csv
    from .dmpc_loop import build_problem

    problem = build_problem(_load(args.config))
    header, rows = oracle_rows(problem)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        print(write_csv(out / "oracle.csv", header, rows))
    else:
        print(",".join(header))
        for row in rows:
            print(",".join(str(v) for v in row))
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="dmpc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    cfg_help = "configuration file, or 'benchmark' for the built-in water-tank set-up"

    p = sub.add_parser("simulate", help="closed-loop run with CSV tables and PNG figures")
    p.add_argument("config", help=cfg_help)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, help="number of closed-loop steps T")
    p.add_argument("--warm-start", action="store_true", help="reuse the previous multipliers")
    p.add_argument("--project-lambda", action="store_true", help="keep multipliers nonnegative")
    p.add_argument("--no-plots", action="store_true", help="skip the PNG figures")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("certify", help="contraction certificate for the step sizes")
    p.add_argument("config", help=cfg_help)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--rho", type=float)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("sweep", help="total input for several values of rho or eps")
    p.add_argument("config", help=cfg_help)
    p.add_argument("--param", required=True, choices=("rho", "eps"))
    p.add_argument("--values", required=True, type=_values, help="comma separated, e.g. 0.2,0.5,0.8")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="centralised QP solution at the initial states")
    p.add_argument("config", help=cfg_help)
    p.add_argument("--out", help="write oracle.csv here instead of printing")
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
