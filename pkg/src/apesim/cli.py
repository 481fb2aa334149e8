"""Command-line entry point: ``apesim run|sweep|repro-paper|validate|calibrate``.

Exit status is 0 on success, 2 for configuration errors and 3 when a
reference suite misses its tolerance.
"""

from __future__ import annotations

import argparse
import itertools
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

import yaml

from apesim.errors import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TOLERANCE = 3


def _comment(text: str) -> str:
    return "".join(f"# {line}\n" for line in text.splitlines())


def cmd_run(args) -> int:
    from apesim.config import load_config
    from apesim.harness import compare_report, export_awareness_csv, export_csv, run_scenario

    cfg = load_config(args.config)
    table = run_scenario(cfg)
    out = sys.stdout
    if not args.quiet:
        out.write(_comment(cfg.dump()))
    out.write(table.render())
    if cfg.experiment["kind"] == "latency":
        out.write("\n" + compare_report(table))
    if args.output:
        export_csv(table, args.output)
    if args.traces and table.traces:
        export_awareness_csv(table.traces, args.traces)
    return EXIT_OK


def _parse_param(spec: str) -> tuple[str, list]:
    if "=" not in spec:
        raise ConfigError(f"--param expects path=v1,v2,...; got {spec!r}")
    path, values = spec.split("=", 1)
    if values.strip().startswith("["):
        parsed = yaml.safe_load(values)
    else:
        parsed = [yaml.safe_load(v) for v in values.split(",")]
    if not isinstance(parsed, list) or not parsed:
        raise ConfigError(f"--param {path}: need at least one value")
    return path.strip(), parsed


def _run_point(job):
    from apesim.harness import run_scenario
    cfg, label = job
    return label, run_scenario(cfg)


def cmd_sweep(args) -> int:
    from apesim.config import load_config
    from apesim.harness import MetricsTable, export_csv

    base = load_config(args.config)
    axes = [_parse_param(p) for p in args.param]
    jobs = []
    for combo in itertools.product(*(values for _, values in axes)):
        cfg = base
        labels = []
        for (path, _), value in zip(axes, combo):
            cfg = cfg.with_value(path, value)
            labels.append(f"{path}={value}")
        jobs.append((cfg, ";".join(labels)))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = [_run_point(j) for j in jobs]
    merged = MetricsTable()
    for label, table in results:  # parameter order, whatever finished first
        merged.extend(table, label)
    sys.stdout.write(merged.render())
    if args.output:
        export_csv(merged, args.output)
    return EXIT_OK


def cmd_repro(args) -> int:
    from apesim.calibration import load_calibration
    from apesim.harness import repro_checks, repro_suites, summarize, write_repro

    cal = load_calibration()
    tables = repro_suites(seed=args.seed, samples=args.samples, cal=cal)
    for path in write_repro(tables, args.out):
        print(f"wrote {path}")
    checks = repro_checks(tables, cal)
    sys.stdout.write(summarize(checks))
    return EXIT_OK if all(c.ok for c in checks) else EXIT_TOLERANCE


def cmd_validate(args) -> int:
    from apesim.config import load_config
    cfg = load_config(args.config)
    sys.stdout.write(cfg.dump())
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from apesim.calibration import derive, load_calibration
    cal = load_calibration(args.file)
    derived = derive(cal["targets"], cal["chosen"])
    sys.stdout.write(yaml.safe_dump({"derived": derived}, sort_keys=False))
    if args.check and derived != cal["derived"]:
        stale = sorted(k for k in derived if derived[k] != cal["derived"][k])
        print(f"stored derived values are stale: {', '.join(stale)}", file=sys.stderr)
        return EXIT_TOLERANCE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apesim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario file")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="write the metrics table as CSV")
    p.add_argument("--traces", help="write awareness traces as CSV (fault experiments)")
    p.add_argument("-q", "--quiet", action="store_true", help="omit the normalized config header")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a scenario over a grid of parameter values")
    p.add_argument("config")
    p.add_argument("--param", action="append", required=True, metavar="PATH=V1,V2",
                   help="dotted config path and values, e.g. platform.nic.dma_engines=1,2,4")
    p.add_argument("-j", "--jobs", type=int, default=1, help="scenarios run in parallel")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("repro-paper", help="run the four reference suites and check tolerances")
    p.add_argument("--out", default="repro", help="directory for the CSV files")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=None,
                   help="fault injections per watchdog period (default 1000)")
    p.set_defaults(func=cmd_repro)

    p = sub.add_parser("validate", help="check a scenario and print its normalized form")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("calibrate", help="recompute derived constants from the calibration file")
    p.add_argument("--file", help="calibration file (default: packaged or $APESIM_CALIBRATION)")
    p.add_argument("--check", action="store_true", help="exit 3 if stored values differ")
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
