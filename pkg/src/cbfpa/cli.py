"""``cbfpa`` command line: run, compare, validate, fuzz-oracle.

Exit codes: 0 success, 1 failed check, 2 invalid config or arguments.
Diagnostics go to stderr as one JSON object per line.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import cbf_core, experiments

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _diag(**kw):
    print(json.dumps(kw, sort_keys=True), file=sys.stderr)


def _config_failure(err: experiments.ConfigError) -> int:
    for d in err.diagnostics:
        _diag(source=err.source, **d.as_dict())
    return EXIT_CONFIG


def cmd_validate(args) -> int:
    try:
        cfg = experiments.load_config(args.config)
    except experiments.ConfigError as err:
        return _config_failure(err)
    except OSError as err:
        _diag(source=args.config, field="<file>", line=None, error=str(err))
        return EXIT_CONFIG
    sys.stdout.write(cfg.canonical())
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        cfg = experiments.load_config(args.config)
    except experiments.ConfigError as err:
        return _config_failure(err)
    except OSError as err:
        _diag(source=args.config, field="<file>", line=None, error=str(err))
        return EXIT_CONFIG
    out = Path(args.out) if args.out else cfg.resolved_output_dir()
    t0 = time.perf_counter()
    report = experiments.run_experiment(cfg, out, args.jobs)
    diverged = [experiments.cell_label(c) for c, stats, _ in report.rows
                if "diverged" in stats and stats["diverged"][3] > 0]
    for label in diverged:
        _diag(source=args.config, field="cell", line=None, error=f"divergence flagged in {label}")
    print(f"{cfg.name}: {len(report.rows)} cells x {cfg.trials} trials -> {out / 'aggregate.csv'} "
          f"({time.perf_counter() - t0:.1f}s)")
    if cfg.kind is experiments.Kind.ORACLE_FUZZ and report.rows[0][1]["ok"][2] < 1:
        _diag(source=args.config, field="fuzz", line=None, error="closed form disagrees with the KKT oracle")
        return EXIT_FAILED
    return EXIT_OK


def cmd_compare(args) -> int:
    reports = []
    for d in args.dirs:
        path = Path(d) / "aggregate.csv"
        if not path.exists():
            _diag(source=str(path), field="<file>", line=None, error="missing aggregate.csv")
            return EXIT_CONFIG
        reports.append(experiments.read_aggregate(path))
    try:
        rows = experiments.compare_methods(reports)
    except ValueError as err:
        _diag(source=",".join(args.dirs), field="grid", line=None, error=str(err))
        return EXIT_FAILED
    if args.out:
        experiments.write_comparison(rows, args.out)
    else:
        header = list(rows[0])
        print(",".join(header))
        for r in rows:
            print(",".join(experiments._fmt(r[h]) for h in header))
    return EXIT_OK


def cmd_fuzz(args) -> int:
    t0 = time.perf_counter()
    rep = cbf_core.fuzz_oracle(args.instances, args.seed)
    result = {
        "instances": rep.instances, "seed": args.seed, "max_abs_da": rep.max_abs_da, "max_abs_dc": rep.max_abs_dc,
        "min_residual": rep.min_residual, "branch_counts": rep.branch_counts, "infeasible": rep.infeasible,
        "ok": rep.ok(), "seconds": round(time.perf_counter() - t0, 3),
    }
    print(json.dumps(result, sort_keys=True))
    if not rep.ok():
        _diag(field="fuzz", line=None, error="closed form disagrees with the KKT oracle")
        return EXIT_FAILED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbfpa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: config output_dir or $CBFPA_OUTPUT_DIR)")
    r.add_argument("--jobs", type=int, default=None, help="parallel workers (default: $CBFPA_JOBS or 1)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare illustrative-sweep result directories")
    c.add_argument("dirs", nargs="+")
    c.add_argument("--out", help="write the table to this CSV instead of stdout")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("validate", help="check a config and print its canonical form")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)

    f = sub.add_parser("fuzz-oracle", help="closed form vs KKT enumeration on random instances")
    f.add_argument("--instances", type=int, default=10_000)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fuzz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
