"""Command-line entry point: ``recallseg {gen-data,run,sweep,report}``.

Every subcommand accepts ``--config``, ``--seed``, ``--out``, ``--offline``
and ``--fast``.  Errors print one diagnostic line to stderr and exit 1;
usage errors exit 2.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from functools import reduce
from typing import Sequence

from .config import METHODS, ConfigError, ExperimentConfig, load_config, save_config
from .core import RecallError
from .protocol import build_partition, save_partition_manifest
from .report import fmt_value, read_report, summary_table
from .synthdata import write_fixture
from .trainer import schedule_for, experiment_data, run_experiment

DEFAULT_RATIOS = ((4, 1), (2, 1), (1, 1), (1, 2), (1, 4))


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config (JSON object; omitted keys take defaults)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--offline", action="store_true", help="never contact an HTTP retrieval endpoint")
    p.add_argument("--fast", action="store_true", help="reduced step counts for quick runs")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="recallseg", description="Replay-based class-incremental segmentation at desk scale.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic dataset as a PNG fixture")
    _common(p)

    p = sub.add_parser("run", help="run one experiment config")
    _common(p)
    p.add_argument("--method", choices=METHODS, help="override the config method")

    p = sub.add_parser("sweep", help="interleave-ratio grid or method x schedule matrix")
    _common(p)
    p.add_argument("--grid", choices=("ratio", "matrix"), default="ratio")
    p.add_argument("--ratios", default=",".join(f"{a}:{b}" for a, b in DEFAULT_RATIOS), help="comma list like 4:1,1:1")
    p.add_argument("--methods", default="joint,recall-gen,recall-retrieval,inpaint-only,replay-only,snr,ft")
    p.add_argument("--schedules", default="5-5,5-1")
    p.add_argument("--seeds", help="comma list of seeds (default: the single config seed)")

    p = sub.add_parser("report", help="collect run directories into one summary table")
    _common(p)
    p.add_argument("runs", nargs="+", help="run directories or folders holding them")
    return ap


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.offline:
        kw["offline"] = True
    if args.fast:
        kw["fast"] = True
    if getattr(args, "method", None):
        kw["method"] = args.method
    return cfg.replace(**kw) if kw else cfg


def _parse_ratios(text: str) -> list[tuple[int, int]]:
    out = []
    for part in text.split(","):
        try:
            a, b = (int(v) for v in part.split(":"))
        except ValueError:
            raise ConfigError(f"bad ratio {part!r}; expected r_new:r_old like 2:1") from None
        if a < 1 or b < 1:
            raise ConfigError(f"ratio {part!r} must use positive integers")
        out.append((a, b))
    return out


def sweep_batch_size(base: int, ratios: Sequence[tuple[int, int]]) -> int:
    """Smallest multiple of every ratio sum that is at least ``base``."""
    m = reduce(lambda x, y: x * y // math.gcd(x, y), (a + b for a, b in ratios), 1)
    return m * max(1, -(-base // m))


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    train, test = experiment_data(cfg)
    write_fixture(train, test, args.out)
    schedule = schedule_for(cfg)
    save_partition_manifest(build_partition(train, schedule, cfg.disjoint_assign), os.path.join(args.out, "partition.json"))
    save_config(cfg, os.path.join(args.out, "config.json"))
    print(f"wrote {len(train)} train and {len(test)} test samples to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    report = run_experiment(cfg, args.out)
    f = report.final
    print(f"{cfg.run_name()}: {len(report.steps)} steps, miou_all={f.miou_all:.4f}, mem_bytes={f.mem_bytes}")
    print(os.path.join(args.out, cfg.run_name()))
    return 0


def _seeds(args, cfg: ExperimentConfig) -> list[int]:
    if not args.seeds:
        return [cfg.seed]
    try:
        return [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise ConfigError(f"bad seed list {args.seeds!r}") from None


def cmd_sweep(args) -> int:
    cfg = _config(args)
    seeds = _seeds(args, cfg)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if args.grid == "ratio":
        ratios = _parse_ratios(args.ratios)
        bs = sweep_batch_size(cfg.batch_size, ratios)
        w.writerow(["ratio", "r_new", "r_old", "batch_size", "seed", "method", "schedule", "miou_old", "miou_new", "miou_all"])
        for seed in seeds:
            for a, b in ratios:
                run = cfg.replace(r_new=a, r_old=b, batch_size=bs, seed=seed)
                f = run_experiment(run, args.out).final
                w.writerow([f"{a}:{b}", a, b, bs, seed, run.method, run.schedule, fmt_value(f.miou_old), fmt_value(f.miou_new), fmt_value(f.miou_all)])
        name = "sweep_ratio.csv"
    else:
        methods = [m for m in args.methods.split(",") if m]
        for m in methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        schedules = [s for s in args.schedules.split(",") if s]
        w.writerow(["method", "schedule", "setup", "seed", "miou_old", "miou_new", "miou_all", "mem_bytes"])
        for seed in seeds:
            for sched in schedules:
                for m in methods:
                    run = cfg.replace(method=m, schedule=sched, seed=seed)
                    f = run_experiment(run, args.out).final
                    w.writerow([m, sched, run.setup, seed, fmt_value(f.miou_old), fmt_value(f.miou_new), fmt_value(f.miou_all), f.mem_bytes])
        name = "sweep_matrix.csv"
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, name)
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return 0


def _run_dirs(paths: Sequence[str]) -> list[str]:
    found = []
    for p in paths:
        if not os.path.isdir(p):
            raise ConfigError(f"{p} is not a directory")
        if os.path.isfile(os.path.join(p, "report.json")):
            found.append(p)
            continue
        for name in sorted(os.listdir(p)):
            if os.path.isfile(os.path.join(p, name, "report.json")):
                found.append(os.path.join(p, name))
    if not found:
        raise ConfigError("no report.json found under the given paths")
    return found


def cmd_report(args) -> int:
    reports = [read_report(d) for d in _run_dirs(args.runs)]
    table = summary_table(reports)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        fh.write(table)
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
    sys.stdout.write(table)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "run": cmd_run, "sweep": cmd_sweep, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (RecallError, OSError, json.JSONDecodeError) as exc:
        print(f"recallseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
