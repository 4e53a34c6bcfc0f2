"""Command-line entry point: ``bilevel-portfolio <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as ex
from .blifp import FORMULATIONS, solve_blifp
from .errors import CertificateFailure, EnumerationCapError, InfeasibleError
from .follower import cvar_by_inspection
from .ilbfp import solve_ilbfp_cutting_plane, solve_ilbfp_lp
from .market import (INSTANCE_CLASSES, InvestorProfile, ParseError, generate_instance, load_instance,
                     load_returns_csv, net_scenario_returns, save_instance, synthetic_panel,
                     write_returns_csv)
from .lp import write_lp_file
from .milp import SolveLimits
from .mswp import solve_mswp_benders, solve_mswp_milp

EXIT_OK, EXIT_INFEASIBLE, EXIT_LIMIT, EXIT_INPUT = 0, 2, 3, 4
LIMIT_STATUSES = {"TimeLimit", "NodeLimit", "IterationLimit", "Stalled"}


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse's own exit code 2 would read as "infeasible"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_panel_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scenario panel (CSV file or synthetic)")
    g.add_argument("--returns", help="scenario returns CSV; synthetic panel when omitted")
    g.add_argument("--n", type=int, default=30, help="synthetic securities (default 30)")
    g.add_argument("--T", type=int, default=60, help="synthetic scenarios (default 60)")
    g.add_argument("--panel-seed", type=int, default=0, help="synthetic panel seed (default 0)")


def _add_profile_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=0.5, help="CVaR level in (0, 1] (default 0.5)")
    p.add_argument("--mu0", type=float, default=0.0, help="minimum expected net return (default 0)")


def _add_solve_args(p: argparse.ArgumentParser) -> None:
    _add_panel_args(p)
    _add_profile_args(p)
    p.add_argument("--instance", required=True, help="instance JSON from generate-instance")
    p.add_argument("--time-limit", type=float, default=3600.0, help="seconds (default 3600)")
    p.add_argument("--tol", type=float, default=1e-9, help="relative MIP gap (default 1e-9)")
    p.add_argument("--backend", choices=("bnb", "highs"), default="highs",
                   help="MILP backend (default highs)")
    p.add_argument("--out", help="write the JSON result record here (stdout otherwise)")
    p.add_argument("--dump-lp", help="write the model in LP text format (debugging)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bilevel-portfolio",
                     description="Broker-dealer / investor bilevel portfolio models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-instance", help="draw a cost structure for one instance class")
    _add_panel_args(p)
    p.add_argument("--class", dest="label", required=True, choices=sorted(INSTANCE_CLASSES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="instance JSON path")
    p.add_argument("--write-returns", help="also save the panel used as CSV")

    p = sub.add_parser("solve-blifp", help="broker leads, investor follows")
    _add_solve_args(p)
    p.add_argument("--formulation", choices=FORMULATIONS, default="blifp2")

    p = sub.add_parser("solve-ilbfp", help="investor leads, broker follows")
    _add_solve_args(p)
    p.add_argument("--method", choices=("closed-form", "cutting-plane"), default="closed-form")

    p = sub.add_parser("solve-mswp", help="maximize broker profit plus investor CVaR")
    _add_solve_args(p)
    p.add_argument("--method", choices=("milp", "benders"), default="milp")
    p.add_argument("--xi", type=float, help="profit weight in [0, 1] (milp only; unweighted when omitted)")

    p = sub.add_parser("compute-cvar", help="CVaR of a fixed portfolio")
    _add_panel_args(p)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--x", type=_floats, required=True, help="portfolio weights, comma-separated")
    p.add_argument("--instance", help="instance JSON (needed with --p)")
    p.add_argument("--p", type=_floats, help="unit costs on the chargeable securities")

    p = sub.add_parser("run-matrix", help="full experiment matrix with CSV aggregation")
    _add_panel_args(p)
    d = ex.ExperimentConfig()
    p.add_argument("--classes", default="".join(d.classes), help="class letters, e.g. ABG (default all)")
    p.add_argument("--replicates", type=int, default=d.replicates)
    p.add_argument("--alphas", type=_floats, default=d.alphas)
    p.add_argument("--mu0s", type=_floats, default=d.mu0s)
    p.add_argument("--methods", default=",".join(d.methods))
    p.add_argument("--time-limit", type=float, default=d.time_limit)
    p.add_argument("--tol", type=float, default=d.mip_gap, help="relative MIP gap")
    p.add_argument("--backend", choices=("bnb", "highs"), default=d.backend)
    p.add_argument("--seed", type=int, default=d.seed, help="master seed")
    p.add_argument("--workers", type=int, help=f"worker processes (default ${ex.WORKERS_ENV} or CPU count)")
    p.add_argument("--out", default=d.out_dir, help="output directory")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("compare", help="cross-model comparison CSVs from a result directory")
    p.add_argument("results", help="directory written by run-matrix")
    p.add_argument("--out", help="output directory (default: the results directory)")
    return parser


def _panel(args):
    if args.returns:
        return load_returns_csv(args.returns)
    return synthetic_panel(args.n, args.T, seed=args.panel_seed)


def _limits(args) -> SolveLimits:
    return SolveLimits(time_limit=args.time_limit, mip_gap=args.tol, backend=args.backend)


def _emit(record: dict, out: str | None) -> None:
    text = json.dumps(record, indent=1) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _status_code(status: str) -> int:
    if status == "Optimal":
        return EXIT_OK
    if status in LIMIT_STATUSES:
        return EXIT_LIMIT
    return EXIT_INFEASIBLE if status == "Infeasible" else EXIT_LIMIT


def _dump_lp(problem, path: str) -> None:
    """LP text file of the model (its relaxation for a MILP; binary indices alongside)."""
    lp = getattr(problem, "lp", problem)
    write_lp_file(lp, path)
    if getattr(problem, "binaries", None):
        Path(path + ".binaries").write_text(" ".join(lp.var_name(j) for j in problem.binaries) + "\n")


def _load(args):
    panel = _panel(args)
    instance = load_instance(args.instance, panel)
    return instance, InvestorProfile(args.alpha, args.mu0)


def cmd_generate(args) -> int:
    panel = _panel(args)
    instance = generate_instance(args.label, panel, args.seed)
    save_instance(instance, args.out)
    if args.write_returns:
        write_returns_csv(panel, args.write_returns)
    print(f"class {args.label}: |B|={instance.costs.size}, cost vectors={instance.costs.product_size()}")
    return EXIT_OK


def cmd_blifp(args) -> int:
    instance, profile = _load(args)
    if args.dump_lp:
        from .blifp import build_blifp1, build_blifp2, initial_big_m
        build = build_blifp1 if args.formulation == "blifp1" else build_blifp2
        _dump_lp(build(instance, profile, initial_big_m(instance, profile)).problem, args.dump_lp)
    sol = solve_blifp(instance, profile, args.formulation, _limits(args))
    _emit(sol.to_record(), args.out)
    return _status_code(sol.status)


def cmd_ilbfp(args) -> int:
    instance, profile = _load(args)
    if args.dump_lp:
        from .ilbfp import build_compact_lp
        _dump_lp(build_compact_lp(instance, profile, [instance.costs.max_costs()]), args.dump_lp)
    limits = _limits(args)
    if args.method == "closed-form":
        sol = solve_ilbfp_lp(instance, profile, limits.lp)
    else:
        sol = solve_ilbfp_cutting_plane(instance, profile, limits=limits)
    record = sol.to_record()
    if "cut_pool" in sol.diagnostics:
        record["cvar_trace"] = sol.diagnostics["cut_pool"].cvar_trace
    _emit(record, args.out)
    return _status_code(sol.status)


def cmd_mswp(args) -> int:
    instance, profile = _load(args)
    if args.method == "benders" and args.xi is not None:
        raise InputError("--xi applies to --method milp only")
    if args.dump_lp:
        from .mswp import _build_welfare
        _dump_lp(_build_welfare(instance, profile, args.xi)[0], args.dump_lp)
    limits = _limits(args)
    if args.method == "milp":
        sol = solve_mswp_milp(instance, profile, args.xi, limits)
    else:
        sol = solve_mswp_benders(instance, profile, limits)
    record = sol.to_record()
    record["master_trace"] = sol.master_trace
    _emit(record, args.out)
    return _status_code(sol.status)


def cmd_cvar(args) -> int:
    panel = _panel(args)
    x = np.array(args.x)
    if args.p is not None:
        if not args.instance:
            raise InputError("--p needs --instance for the chargeable securities")
        costs = load_instance(args.instance, panel).costs
        y = net_scenario_returns(panel, x, np.array(args.p), costs)
    else:
        y = net_scenario_returns(panel, x, np.zeros(panel.n))
    value = cvar_by_inspection(y, panel.probs, args.alpha)
    print(json.dumps({"alpha": args.alpha, "cvar": value, "expected_return": float(panel.probs @ y)}))
    return EXIT_OK


def cmd_matrix(args) -> int:
    config = ex.ExperimentConfig(classes=tuple(args.classes), replicates=args.replicates,
                                 alphas=args.alphas, mu0s=args.mu0s,
                                 methods=tuple(m for m in args.methods.split(",") if m),
                                 time_limit=args.time_limit, seed=args.seed, out_dir=args.out,
                                 backend=args.backend, mip_gap=args.tol)
    panel = _panel(args)
    start = time.perf_counter()

    def progress(done, total, rec):
        if not args.quiet:
            print(f"[{done}/{total}] {ex.Cell(*ex.record_key(rec)).key}: {rec['status']} "
                  f"({rec['time_s']:.2f}s)", flush=True)

    records = ex.run_matrix(config, panel, workers=args.workers, progress=progress)
    rows = ex.compare_models(records)
    violated = sum(r["verdict"] == ex.VIOLATED for r in rows)
    failed = sum(r["status"] == ex.ERROR for r in records)
    print(f"{len(records)} cells in {time.perf_counter() - start:.1f}s; errors {failed}; "
          f"dominance violated in {violated} of {len(rows)} rows; output in {args.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    if not Path(args.results).is_dir():
        raise InputError(f"{args.results} is not a directory")
    records = ex.load_records(args.results)
    rows = ex.compare_models(records, args.out or args.results)
    for verdict in (ex.HOLDS, ex.VIOLATED, ex.INCOMPLETE):
        print(f"{verdict}: {sum(r['verdict'] == verdict for r in rows)}")
    return EXIT_OK


COMMANDS = {
    "generate-instance": cmd_generate, "solve-blifp": cmd_blifp, "solve-ilbfp": cmd_ilbfp,
    "solve-mswp": cmd_mswp, "compute-cvar": cmd_cvar, "run-matrix": cmd_matrix, "compare": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (InputError, ParseError, EnumerationCapError, FileNotFoundError, json.JSONDecodeError,
            KeyError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CertificateFailure as exc:
        print(f"certificate failure: {exc}", file=sys.stderr)
        return EXIT_LIMIT


if __name__ == "__main__":
    sys.exit(main())
