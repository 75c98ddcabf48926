"""Command-line entry point: ``slamsim run|compare|sweep|replay|validate-config``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import metrics
from .config import DETECTOR_CHOICES, REFERENCE_CONFIGS, ConfigError, load_config, reference_config, with_detectors, with_seed
from .detection import MARKER, MARKERLESS
from .sim import IncompleteLog, MissionLog, replay_metrics, run_mission

logger = logging.getLogger("slamsim")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

LOG_NAME = "mission_log.jsonl"
TRAJECTORY_NAME = "trajectory.csv"
METRICS_NAME = "metrics.json"
TRACE_NAME = "message_trace.csv"


class CliError(RuntimeError):
    pass


def _load(spec: str):
    """A config path, or the name of a packaged reference config."""
    path = Path(spec)
    if not path.exists() and spec in REFERENCE_CONFIGS:
        return reference_config(spec)
    if not path.exists():
        raise ConfigError(f"config file not found: {spec}")
    return load_config(path)


def _prepare(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg = with_seed(cfg, args.seed)
    if getattr(args, "detectors", None):
        cfg = with_detectors(cfg, DETECTOR_CHOICES[args.detectors])
    return cfg


def _guard(paths, force):
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise CliError(f"refusing to overwrite {', '.join(existing)} (use --force)")


def _run_one(cfg, out: Path, force: bool, compress=False, trace=False):
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / (LOG_NAME + (".gz" if compress else ""))
    targets = [log_path, out / TRAJECTORY_NAME, out / METRICS_NAME] + ([out / TRACE_NAME] if trace else [])
    _guard(targets, force)
    log, mission = run_mission(cfg, return_state=True)
    log.write(log_path)
    (out / TRAJECTORY_NAME).write_text(log.trajectory_csv())
    report = replay_metrics(log)
    (out / METRICS_NAME).write_text(report.to_json() + "\n")
    if trace:
        (out / TRACE_NAME).write_text(mission.bus.trace_csv())
    return log, report


def cmd_run(args):
    cfg = _prepare(_load(args.config), args)
    _, report = _run_one(cfg, Path(args.out), args.force, args.gzip, args.trace)
    print(report.to_csv(), end="")
    return EXIT_OK


def _paired(cfg):
    if not cfg.uses(MARKERLESS):
        raise CliError("nothing to compare: markerless detection is disabled for every pair")
    if not cfg.uses(MARKER):
        raise CliError("nothing to compare: the tag-only baseline has no detector enabled")
    return with_detectors(cfg, (MARKER,)), cfg


def _compare(cfg, out: Path, force: bool, keep_logs=True):
    base_cfg, new_cfg = _paired(cfg)
    if keep_logs:
        log_tag, _ = _run_one(base_cfg, out / "tag", force)
        log_both, _ = _run_one(new_cfg, out / "tag_markerless", force)
    else:
        log_tag, log_both = run_mission(base_cfg), run_mission(new_cfg)
    table = metrics.compare_missions(log_tag, log_both)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(table.to_csv())
    (out / "comparison.txt").write_text(table.to_text())
    return table


def cmd_compare(args):
    cfg = _prepare(_load(args.config), args)
    out = Path(args.out)
    _guard([out / "comparison.csv", out / "comparison.txt"], args.force)
    table = _compare(cfg, out, args.force)
    print(table.to_text(), end="")
    return EXIT_OK


def _sweep_seed(cfg, seed, seed_dir: Path, keep_logs):
    table = _compare(with_seed(cfg, seed), seed_dir, True, keep_logs)
    return seed, table.to_csv()


def cmd_sweep(args):
    if args.seeds < 1:
        raise CliError("--seeds must be at least 1")
    cfg = _load(args.config)
    _paired(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tables = {}
    todo = []
    for seed in range(args.seeds):
        seed_dir = out / f"seed_{seed:03d}"
        done = seed_dir / "comparison.csv"
        if done.exists() and not args.force:
            logger.info("seed %d already done, skipping", seed)
            tables[seed] = metrics.read_comparison_csv(done.read_text())
        else:
            todo.append((seed, seed_dir))
    if args.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_sweep_seed, cfg, s, d, args.keep_logs) for s, d in todo]
            results = [f.result() for f in futures]
    else:
        results = [_sweep_seed(cfg, s, d, args.keep_logs) for s, d in todo]
    for seed, text in results:
        tables[seed] = metrics.read_comparison_csv(text)
        logger.info("seed %d done", seed)
    rows = metrics.aggregate(tables[s] for s in sorted(tables))
    text = metrics.aggregate_csv(rows)
    (out / "aggregate.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_replay(args):
    path = Path(args.log)
    if not path.exists():
        raise CliError(f"log not found: {path}")
    log = MissionLog.read(path)
    try:
        report = replay_metrics(log)
    except IncompleteLog as e:
        raise CliError(f"{path}: {e}") from None
    text = report.to_json() + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _guard([out / METRICS_NAME], args.force)
        (out / METRICS_NAME).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_validate(args):
    cfg = _load(args.config)
    print(f"ok: {cfg.name} ({len(cfg.robots)} robots, {cfg.duration:g} s)")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="slamsim", description="Multi-robot pose-graph SLAM mission simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True, seed=True):
        sp.add_argument("--config", required=True, help="config path or reference name (mission_a, mission_b)")
        sp.add_argument("--out", required=out_required, help="output directory (created if absent)")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if seed:
            sp.add_argument("--seed", type=int, help="override the master seed")

    r = sub.add_parser("run", help="run one mission")
    common(r)
    r.add_argument("--detectors", choices=sorted(DETECTOR_CHOICES), help="restrict detector models for every pair")
    r.add_argument("--gzip", action="store_true", help="write the mission log gzip-compressed")
    r.add_argument("--trace", action="store_true", help="also write the message trace CSV")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="tag-only vs tag+markerless on the same seed")
    common(c)
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="compare over seeds 0..N-1 and aggregate")
    common(s, seed=False)
    s.add_argument("--seeds", type=int, required=True, help="number of seeds")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.add_argument("--keep-logs", action="store_true", help="keep per-seed mission logs")
    s.set_defaults(func=cmd_sweep)

    rp = sub.add_parser("replay", help="recompute metrics from a mission log")
    rp.add_argument("--log", required=True, help="mission log (.jsonl or .jsonl.gz)")
    rp.add_argument("--out", help="optional directory for metrics.json")
    rp.add_argument("--force", action="store_true")
    rp.set_defaults(func=cmd_replay)

    v = sub.add_parser("validate-config", help="check a config file and exit")
    v.add_argument("--config", required=True)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    level = os.environ.get("SLAMSIM_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CliError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
