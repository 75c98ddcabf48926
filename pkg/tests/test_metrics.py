import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slamsim.config import parse_config, with_detectors
from slamsim.detection import MARKER
from slamsim.metrics import (
    COMPARISON_COLUMNS,
    HIGHER_BETTER,
    LOWER_BETTER,
    METRICS,
    MetricsError,
    aggregate,
    compare_missions,
    compute_metrics,
    detection_rate,
    improvement_pct,
    max_open_loop_duration,
    read_comparison_csv,
    rmse,
    trajectory_rmse,
)
from slamsim.sim import MissionLog, run_mission

from conftest import small_mission


def test_detection_rate():
    assert detection_rate(396, 500) == pytest.approx(0.792, abs=1e-12)
    assert detection_rate(0, 500) == 0
    assert detection_rate(500, 500) == 1
    with pytest.raises(MetricsError):
        detection_rate(0, 0)


def test_open_loop_examples():
    assert max_open_loop_duration([], 0, 1000) == 1000
    assert max_open_loop_duration([100, 700], 0, 1000) == 600
    assert max_open_loop_duration(np.arange(0.0, 101.0), 0, 100) == 1.0
    with pytest.raises(MetricsError):
        max_open_loop_duration([5], 10, 0)


@given(st.lists(st.floats(0, 1000), max_size=20), st.lists(st.floats(0, 1000), min_size=1, max_size=5))
def test_adding_detections_never_increases_open_loop(times, extra):
    before = max_open_loop_duration(times, 0, 1000)
    after = max_open_loop_duration(times + extra, 0, 1000)
    assert after <= before <= 1000


def _log(errors, offset=None):
    recs = [{"type": "header", "robots": [1], "pair_digest": "x", "seed": 0}]
    for t, e in enumerate(errors):
        gt = [1, 0, 0, 0, 0.0, 0.0, 0.0]
        est = [1, 0, 0, 0, e, 0.0, 0.0]
        recs.append({"type": "step", "t": float(t), "robots": [{"id": 1, "gt": gt, "est": est}]})
    recs.append({"type": "end", "t_end": float(len(errors) - 1)})
    return MissionLog(recs)


def test_rmse_examples():
    assert trajectory_rmse(_log([0, 0, 0]), 1) == 0
    assert trajectory_rmse(_log([1.0] * 7), 1) == pytest.approx(1.0)
    assert trajectory_rmse(_log([3, 4, 5]), 1) == pytest.approx(math.sqrt(50 / 3), rel=1e-12)
    assert rmse([]) == 0


def test_empty_detections_report():
    rep = compute_metrics(_log([0, 1, 2]))
    m = rep.robots[1]
    assert m.n_detections == 0 and m.max_detection_distance == 0
    assert m.max_open_loop_duration == rep.duration == 2.0


def test_improvement_examples():
    imp = improvement_pct(49, 87, HIGHER_BETTER)
    assert imp.percent == pytest.approx(77.55, abs=0.005) and imp.favorable
    imp = improvement_pct(4.94, 16.15, HIGHER_BETTER)
    assert imp.percent == pytest.approx(226.9, abs=0.05) and round(imp.percent) == 227
    assert improvement_pct(3.0, 3.0, LOWER_BETTER).percent == 0
    imp = improvement_pct(10.0, 7.0, LOWER_BETTER)
    assert imp.percent == pytest.approx(-30) and imp.favorable
    with pytest.raises(MetricsError, match="undefined baseline"):
        improvement_pct(0.0, 1.0)


@pytest.fixture(scope="module")
def paired_logs():
    cfg = parse_config(small_mission())
    return run_mission(with_detectors(cfg, (MARKER,))), run_mission(cfg)


def test_self_compare_is_zero(paired_logs):
    _, both = paired_logs
    table = compare_missions(both, both)
    assert all(r.improvement_pct == 0 for r in table.rows)


def test_table_rows_and_csv(paired_logs):
    tag, both = paired_logs
    table = compare_missions(tag, both)
    assert len(table.rows) == 2 * len(METRICS)
    lines = table.to_csv().splitlines()
    assert lines[0] == ",".join(COMPARISON_COLUMNS)
    back = read_comparison_csv(table.to_csv())
    for a, b in zip(table.rows, back.rows):
        assert a.baseline == b.baseline and a.new == b.new and a.favorable == b.favorable
    text = table.to_text()
    assert "Max. Det. Distance [m]" in text and "Tag + Markerless" in text


def test_unpaired_configs_rejected(paired_logs):
    tag, _ = paired_logs
    other = run_mission(parse_config(small_mission(seed=99, duration=5.0)))
    with pytest.raises(MetricsError, match="configs not paired"):
        compare_missions(tag, other)
    shorter = run_mission(parse_config(small_mission(duration=5.0)))
    with pytest.raises(MetricsError, match="configs not paired"):
        compare_missions(tag, shorter)


def test_marker_only_distance_bounded(paired_logs):
    tag, _ = paired_logs
    cap = tag.header["config"]["detectors"]["marker"]["max_range"]
    for m in compute_metrics(tag).robots.values():
        assert m.max_detection_distance <= cap


def test_report_invariants(paired_logs):
    for log in paired_logs:
        rep = compute_metrics(log)
        for m in rep.robots.values():
            assert m.n_detections >= 0 and m.trajectory_rmse >= 0
            assert m.max_open_loop_duration <= rep.duration
        assert json.loads(rep.to_json())["duration"] == rep.duration


def test_rmse_survives_serialization(paired_logs, tmp_path):
    _, both = paired_logs
    both.write(tmp_path / "log.jsonl")
    back = MissionLog.read(tmp_path / "log.jsonl")
    for rid in (1, 2):
        assert abs(trajectory_rmse(back, rid) - trajectory_rmse(both, rid)) <= 1e-12


def test_aggregate_single_table(paired_logs):
    tag, both = paired_logs
    table = compare_missions(tag, both)
    rows = aggregate([table])
    assert len(rows) == len(table.rows)
    for agg, row in zip(rows, table.rows):
        assert agg["baseline_mean"] == row.baseline and agg["new_mean"] == row.new
        assert agg["baseline_std"] == 0 and agg["win_rate"] == float(row.favorable)
        if not math.isnan(row.improvement_pct):
            assert agg["improvement_pct_mean"] == row.improvement_pct
    with pytest.raises(MetricsError):
        aggregate([])
