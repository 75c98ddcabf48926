"""Localization and detection metrics over mission logs, and paired comparisons."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

HIGHER_BETTER = "higher_better"
LOWER_BETTER = "lower_better"

# metric name -> (label, direction)
METRICS = {
    "n_detections": ("# Detections", HIGHER_BETTER),
    "max_detection_distance": ("Max. Det. Distance [m]", HIGHER_BETTER),
    "max_open_loop_duration": ("Max. Open-Loop Duration [s]", LOWER_BETTER),
    "trajectory_rmse": ("Traj. Error RMSE [m]", LOWER_BETTER),
}

COMPARISON_COLUMNS = ("robot_id", "metric", "baseline", "new", "improvement_pct", "favorable")
AGGREGATE_COLUMNS = (
    "robot_id",
    "metric",
    "n_seeds",
    "baseline_mean",
    "baseline_std",
    "new_mean",
    "new_std",
    "improvement_pct_mean",
    "improvement_pct_std",
    "win_rate",
)


class MetricsError(ValueError):
    pass


def detection_rate(n_detected: int, n_samples: int) -> float:
    if n_samples <= 0:
        raise MetricsError("detection rate needs at least one sample")
    if not 0 <= n_detected <= n_samples:
        raise MetricsError("n_detected must lie in [0, n_samples]")
    return n_detected / n_samples


def max_open_loop_duration(detection_times, t_start: float, t_end: float) -> float:
    """Largest gap in the sequence (t_start, d1, ..., dn, t_end)."""
    if t_start > t_end:
        raise MetricsError("t_start must not exceed t_end")
    times = np.sort(np.asarray(detection_times, dtype=float))
    if times.size and (times[0] < t_start or times[-1] > t_end):
        raise MetricsError("detection times outside the mission interval")
    seq = np.concatenate(([t_start], times, [t_end]))
    return float(np.max(np.diff(seq)))


def rmse(errors) -> float:
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        return 0.0
    return math.sqrt(float(np.sum(e * e)) / e.size)


def position_errors(log, robot_id: int) -> np.ndarray:
    out = []
    for s in log.of_type("step"):
        for r in s["robots"]:
            if r["id"] == robot_id:
                out.append(math.dist(r["gt"][4:], r["est"][4:]))
    return np.array(out)


def trajectory_rmse(log, robot_id: int) -> float:
    return rmse(position_errors(log, robot_id))


class Improvement(NamedTuple):
    percent: float
    favorable: bool


def improvement_pct(baseline: float, new: float, direction: str = HIGHER_BETTER) -> Improvement:
    """Signed relative change 100·(new − baseline)/baseline."""
    if direction not in (HIGHER_BETTER, LOWER_BETTER):
        raise MetricsError(f"unknown direction {direction!r}")
    if baseline == 0:
        raise MetricsError("undefined baseline")
    pct = 100.0 * (new - baseline) / baseline
    favorable = pct > 0 if direction == HIGHER_BETTER else pct < 0
    return Improvement(pct, favorable)


@dataclass(frozen=True)
class RobotMetrics:
    n_detections: int
    max_detection_distance: float
    max_open_loop_duration: float
    trajectory_rmse: float

    def as_dict(self):
        return {k: getattr(self, k) for k in METRICS}


@dataclass(frozen=True)
class MetricsReport:
    duration: float
    robots: dict = field(default_factory=dict)  # robot_id -> RobotMetrics

    def to_dict(self):
        return {"duration": self.duration, "robots": {str(r): m.as_dict() for r, m in sorted(self.robots.items())}}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("robot_id", *METRICS))
        for r, m in sorted(self.robots.items()):
            w.writerow((r, *(m.as_dict()[k] for k in METRICS)))
        return buf.getvalue()


def compute_metrics(log) -> MetricsReport:
    header = log.header
    if header is None or log.footer is None:
        raise MetricsError("incomplete log")
    t_end = float(log.footer["t_end"])
    robots = header["robots"]
    accepted = [d for d in log.of_type("detection") if d["accepted"]]
    out = {}
    for rid in robots:
        mine = [d for d in accepted if d["observer"] == rid]
        touching = [d["t"] for d in accepted if rid in (d["observer"], d["target"])]
        out[rid] = RobotMetrics(
            n_detections=len(mine),
            max_detection_distance=max((d["distance"] for d in mine), default=0.0),
            max_open_loop_duration=max_open_loop_duration(touching, 0.0, t_end),
            trajectory_rmse=trajectory_rmse(log, rid),
        )
    return MetricsReport(t_end, out)


# ------------------------------------------------------------------ comparisons


class ComparisonRow(NamedTuple):
    robot_id: int
    metric: str
    baseline: float
    new: float
    improvement_pct: float  # nan when the baseline is zero
    favorable: bool


@dataclass
class ComparisonTable:
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for r in self.rows:
            w.writerow((r.robot_id, r.metric, repr(float(r.baseline)), repr(float(r.new)), _fmt_pct(r.improvement_pct, 6), int(r.favorable)))
        return buf.getvalue()

    def to_text(self) -> str:
        header = ("Robot", "Metric", "Tag", "Tag + Markerless", "Improvement")
        body = []
        for r in self.rows:
            label = METRICS[r.metric][0]
            pct = "n/a" if math.isnan(r.improvement_pct) else f"{r.improvement_pct:+.0f}%"
            body.append((str(r.robot_id), label, _fmt_val(r.baseline), _fmt_val(r.new), pct))
        widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))).rstrip() for row in [header, *body]]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def value(self, robot_id, metric):
        return next(r for r in self.rows if r.robot_id == robot_id and r.metric == metric)


def _fmt_val(v):
    return str(int(v)) if float(v).is_integer() else f"{v:.2f}"


def _fmt_pct(p, digits):
    return "" if math.isnan(p) else f"{p:.{digits}f}"


def compare_reports(baseline: MetricsReport, new: MetricsReport) -> ComparisonTable:
    if sorted(baseline.robots) != sorted(new.robots):
        raise MetricsError("configs not paired")
    rows = []
    for rid in sorted(baseline.robots):
        b, n = baseline.robots[rid].as_dict(), new.robots[rid].as_dict()
        for metric, (_, direction) in METRICS.items():
            if b[metric] == 0:
                pct, fav = (0.0, False) if n[metric] == 0 else (math.nan, direction == HIGHER_BETTER)
            else:
                pct, fav = improvement_pct(b[metric], n[metric], direction)
            rows.append(ComparisonRow(rid, metric, b[metric], n[metric], pct, fav))
    return ComparisonTable(rows)


def compare_missions(log_tag, log_both) -> ComparisonTable:
    """Paired table of a tag-only log against a tag+markerless log of the same mission."""
    ha, hb = log_tag.header, log_both.header
    if ha is None or hb is None or ha["pair_digest"] != hb["pair_digest"] or ha["seed"] != hb["seed"]:
        raise MetricsError("configs not paired")
    return compare_reports(compute_metrics(log_tag), compute_metrics(log_both))


def aggregate(tables) -> list:
    """Per (robot, metric) mean/std of both sides and of the improvement, plus win rate.

    Win rate is the fraction of seeds where the change was favorable.
    """
    tables = list(tables)
    if not tables:
        raise MetricsError("nothing to aggregate")
    keys = [(r.robot_id, r.metric) for r in tables[0].rows]
    out = []
    for rid, metric in keys:
        rows = [t.value(rid, metric) for t in tables]
        b = np.array([r.baseline for r in rows], dtype=float)
        n = np.array([r.new for r in rows], dtype=float)
        p = np.array([r.improvement_pct for r in rows], dtype=float)
        p = p[~np.isnan(p)]
        out.append(
            {
                "robot_id": rid,
                "metric": metric,
                "n_seeds": len(rows),
                "baseline_mean": float(b.mean()),
                "baseline_std": float(b.std()),
                "new_mean": float(n.mean()),
                "new_std": float(n.std()),
                "improvement_pct_mean": float(p.mean()) if p.size else math.nan,
                "improvement_pct_std": float(p.std()) if p.size else math.nan,
                "win_rate": float(np.mean([r.favorable for r in rows])),
            }
        )
    return out


def aggregate_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_COLUMNS)
    for r in rows:
        w.writerow([r[c] if isinstance(r[c], (int, str)) else repr(float(r[c])) for c in AGGREGATE_COLUMNS])
    return buf.getvalue()


def read_comparison_csv(text: str) -> ComparisonTable:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        pct = float(rec["improvement_pct"]) if rec["improvement_pct"] else math.nan
        rows.append(
            ComparisonRow(int(rec["robot_id"]), rec["metric"], float(rec["baseline"]), float(rec["new"]), pct, rec["favorable"] == "1")
        )
    return ComparisonTable(rows)
