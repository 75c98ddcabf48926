"""Mission orchestration and the newline-delimited mission log.

One step runs, in this fixed order: propagate every rover; frame switches
and loop closures; detection attempts (at the detection cadence); message
delivery; local optimization. The Lander is robot 0: it is observed but
holds no graph and never observes.
"""

from __future__ import annotations

import gzip
import io
import json
import logging
import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .agent import AgentState, ingest_detection, maybe_frame_switch, maybe_loop_closure, propagate
from .config import MissionConfig, config_digest
from .detection import MARKER, MARKERLESS, DetectionConstraint, attempt_detection
from .geometry import Pose3, between, compose, exp
from .graph import LANDER_ID, LANDER_NODE, NodeId, OptimizationError, PoseGraph, apply_delta, optimize
from .network import GraphDelta, MessageBus, check_consistency

logger = logging.getLogger(__name__)

LOG_VERSION = 1


class IncompleteLog(ValueError):
    pass


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for a labelled subsystem of one mission."""
    key = tuple(zlib.crc32(str(label).encode()) for label in labels)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def generate_trajectory(waypoints, speed: float, dt: float) -> list:
    """Constant-speed poses through 2D waypoints, heading along the direction of travel.

    Heading changes happen in place over one step at each waypoint.
    """
    if len(waypoints) < 2:
        raise ValueError("need at least two waypoints")
    if speed <= 0 or dt <= 0:
        raise ValueError("speed and dt must be positive")
    pts = [np.asarray(waypoints[0], dtype=float)]
    for p in waypoints[1:]:
        p = np.asarray(p, dtype=float)
        if np.linalg.norm(p - pts[-1]) > 1e-9:
            pts.append(p)
    if len(pts) < 2:
        raise ValueError("waypoints are all coincident")

    step = speed * dt
    poses = []
    for i, (a, b) in enumerate(zip(pts, pts[1:])):
        d = b - a
        length = float(np.linalg.norm(d))
        yaw = math.atan2(d[1], d[0])
        if i == 0:
            poses.append(Pose3.planar(a[0], a[1], yaw))
        elif abs(yaw - poses[-1].yaw) > 1e-12:
            poses.append(Pose3.planar(a[0], a[1], yaw))
        u = d / length
        n = int(math.floor(length / step + 1e-9))
        for k in range(1, n + 1):
            p = a + u * (k * step)
            poses.append(Pose3.planar(p[0], p[1], yaw))
        if length - n * step > 1e-9:
            poses.append(Pose3.planar(b[0], b[1], yaw))
    return poses


def _vec(p: Pose3):
    return [float(v) for v in p.to_vector()]


# ------------------------------------------------------------------ mission log


class MissionLog:
    """Ordered list of JSON-serializable event records."""

    def __init__(self, records=None):
        self.records = list(records or [])

    def append(self, record):
        self.records.append(record)

    @property
    def header(self):
        return next((r for r in self.records if r["type"] == "header"), None)

    @property
    def footer(self):
        return self.records[-1] if self.records and self.records[-1]["type"] == "end" else None

    @property
    def complete(self):
        return self.header is not None and self.footer is not None

    def of_type(self, kind):
        return [r for r in self.records if r["type"] == kind]

    def to_text(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n" for r in self.records)

    def to_bytes(self, compress=False) -> bytes:
        raw = self.to_text().encode()
        if not compress:
            return raw
        buf = io.BytesIO()
        with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0, filename="") as f:
            f.write(raw)
        return buf.getvalue()

    def write(self, path):
        path = Path(path)
        path.write_bytes(self.to_bytes(compress=path.suffix == ".gz"))

    @classmethod
    def from_text(cls, text):
        return cls(json.loads(line) for line in text.splitlines() if line.strip())

    @classmethod
    def read(cls, path):
        path = Path(path)
        data = path.read_bytes()
        if data[:2] == b"\x1f\x8b":
            data = gzip.decompress(data)
        return cls.from_text(data.decode())

    def trajectory_csv(self) -> str:
        lines = ["time,robot_id,gt_x,gt_y,gt_z,est_x,est_y,est_z,err_m"]
        for s in self.of_type("step"):
            for r in s["robots"]:
                gt, est = np.array(r["gt"][4:]), np.array(r["est"][4:])
                err = float(np.linalg.norm(gt - est))
                vals = [s["t"], r["id"], *gt, *est, err]
                lines.append(",".join(repr(float(v)) if i != 1 else str(v) for i, v in enumerate(vals)))
        return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ mission loop


@dataclass
class _Lander:
    gt_pose: Pose3
    robot_id: int = LANDER_ID


class _OnlineMetrics:
    """Accumulates the report while the mission runs (cross-checked by replay)."""

    def __init__(self, robot_ids):
        self.n = {r: 0 for r in robot_ids}
        self.max_dist = {r: 0.0 for r in robot_ids}
        self.last_event = {r: 0.0 for r in robot_ids}
        self.max_gap = {r: 0.0 for r in robot_ids}
        self.sq = {r: 0.0 for r in robot_ids}
        self.steps = 0

    def detection(self, t, observer, target, distance):
        self.n[observer] += 1
        self.max_dist[observer] = max(self.max_dist[observer], distance)
        for r in (observer, target):
            if r in self.last_event:
                self.max_gap[r] = max(self.max_gap[r], t - self.last_event[r])
                self.last_event[r] = t

    def step(self, errors):
        self.steps += 1
        for r, e in errors.items():
            self.sq[r] += e * e

    def finish(self, t_end):
        out = {}
        for r in self.n:
            gap = max(self.max_gap[r], t_end - self.last_event[r])
            out[str(r)] = {
                "n_detections": self.n[r],
                "max_detection_distance": self.max_dist[r],
                "max_open_loop_duration": gap,
                "trajectory_rmse": math.sqrt(self.sq[r] / self.steps) if self.steps else 0.0,
            }
        return out


class _Mission:
    def __init__(self, cfg: MissionConfig):
        self.cfg = cfg
        self.rids = tuple(sorted(cfg.robot_ids))
        self.robots = {r.robot_id: r for r in cfg.robots}
        self.log = MissionLog()
        self.traj = {rid: generate_trajectory(r.waypoints, r.speed, cfg.dt) for rid, r in self.robots.items()}
        self.lander = _Lander(cfg.lander_pose)
        self.graphs = {rid: PoseGraph.anchored_at(cfg.lander_pose) for rid in self.rids}
        net = cfg.network
        self.bus = MessageBus(
            self.rids,
            latency=net.latency,
            drop_prob=net.drop_prob,
            retry_interval=net.retry_interval,
            jitter=net.jitter,
            rng=stream(cfg.seed, "bus"),
        )
        self.drift_rng = {rid: stream(cfg.seed, "drift", rid) for rid in self.rids}
        self.loop_rng = {rid: stream(cfg.seed, "loop", rid) for rid in self.rids}
        self.det_rng = {}
        self.online = _OnlineMetrics(self.rids)
        self.reports = {}
        self.n_optimizations = 0
        self.emitted = []  # every delta in emission order, for replication checks
        self.agents = {}
        for rid in self.rids:
            rc = self.robots[rid]
            gt0 = self.traj[rid][0]
            rng = stream(cfg.seed, "init", rid)
            noise = np.zeros(6)
            noise[2] = rc.initial_yaw_std * rng.standard_normal()
            noise[3:5] = rc.initial_xy_std * rng.standard_normal(2)
            self.agents[rid] = AgentState.start(rid, gt0, compose(gt0, exp(noise)), rc.drift)

    def emit(self, origin, t, nodes=(), factors=()):
        delta = GraphDelta(origin, self.bus.next_seq(origin), tuple(nodes), tuple(factors), t)
        self.emitted.append(delta)
        apply_delta(self.graphs[origin], delta)
        self.bus.broadcast(delta)

    def deliver(self, t):
        for receiver, delta in self.bus.step_deliveries(t):
            apply_delta(self.graphs[receiver], delta)
        for rec in self.bus.trace[self._trace_seen :]:
            self.log.append(dict(zip(("emit_time", "deliver_time", "origin", "receiver", "seq", "kind", "n_factors"), rec), type="message"))
        self._trace_seen = len(self.bus.trace)

    def optimize_all(self, t):
        for rid in self.rids:
            g = self.graphs[rid]
            if not g.needs_optimization:
                continue
            try:
                self.reports[rid] = optimize(g, self.cfg.optimizer)
                self.n_optimizations += 1
            except OptimizationError as e:
                g.needs_optimization = False
                self.log.append({"type": "opt_failure", "t": t, "robot": rid, "error": str(e)})

    def estimate(self, rid):
        a = self.agents[rid]
        return compose(self.graphs[rid].nodes[a.current_node], a.local_offset)

    def log_step(self, t):
        entries, errors = [], {}
        for rid in self.rids:
            a = self.agents[rid]
            est = self.estimate(rid)
            errors[rid] = float(np.linalg.norm(a.gt_pose.translation - est.translation))
            entries.append(
                {
                    "id": rid,
                    "gt": _vec(a.gt_pose),
                    "est": _vec(est),
                    "node": list(a.current_node),
                    "anchored": self.graphs[rid].is_anchored(a.current_node),
                }
            )
        self.online.step(errors)
        self.log.append({"type": "step", "t": t, "robots": entries})

    def _rng(self, observer, target, kind):
        key = (observer, target, kind)
        if key not in self.det_rng:
            self.det_rng[key] = stream(self.cfg.seed, "detect", observer, target, kind)
        return self.det_rng[key]

    def detect(self, t):
        cfg = self.cfg
        for obs in self.rids:
            observer = self.agents[obs]
            cam = self.robots[obs].camera
            for tgt in (LANDER_ID,) + self.rids:
                if tgt == obs:
                    continue
                enabled = cfg.enabled_for(obs, tgt)
                if not enabled:
                    continue
                if tgt == LANDER_ID:
                    target, shape = self.lander, cfg.lander_shape
                else:
                    target, shape = self.agents[tgt], self.robots[tgt].shape
                results = {k: attempt_detection(observer, target, cam, cfg.detectors[k], shape, self._rng(obs, tgt, k), t) for k in enabled}
                hits = [k for k in enabled if isinstance(results[k], DetectionConstraint)]
                chosen = None
                if hits:
                    preferred = MARKER if cfg.prefer_marker else MARKERLESS
                    chosen = preferred if preferred in hits else hits[0]
                for k in enabled:
                    res = results[k]
                    rec = {"type": "detection", "t": t, "observer": obs, "target": tgt, "source": k, "distance": res.distance}
                    if k == chosen:
                        rec["accepted"] = True
                        if res.bbox is not None:
                            rec["bbox"] = res.bbox.as_list()
                            rec["border_touch_count"] = res.border_touch_count
                    else:
                        rec["accepted"] = False
                        rec["reason"] = "superseded" if k in hits else res.reason
                    self.log.append(rec)
                if chosen is None:
                    continue
                c = results[chosen]
                if tgt == LANDER_ID:
                    factor = ingest_detection(observer, c, LANDER_NODE)
                else:
                    ta = self.agents[tgt]
                    factor = ingest_detection(observer, c, ta.current_node, ta.local_offset, ta.covariance)
                self.online.detection(t, obs, tgt, c.distance)
                self.emit(obs, t, factors=(factor,))

    def run(self) -> MissionLog:
        cfg = self.cfg
        self._trace_seen = 0
        n_steps = int(round(cfg.duration / cfg.dt))
        period = max(1, int(round(cfg.detection_period / cfg.dt)))
        opt_period = max(1, int(round(cfg.optimization_period / cfg.dt)))
        self.log.append(
            {
                "type": "header",
                "version": LOG_VERSION,
                "name": cfg.name,
                "seed": cfg.seed,
                "config": cfg.raw,
                "config_digest": config_digest(cfg),
                "pair_digest": config_digest(cfg, ignore_detectors=True),
                "robots": list(self.rids),
                "dt": cfg.dt,
                "n_steps": n_steps,
                "t_end": n_steps * cfg.dt,
            }
        )
        for rid in self.rids:
            self.emit(rid, 0.0, nodes=((NodeId(rid, 0), self.agents[rid].est_pose),))
        self.deliver(0.0)
        self.log_step(0.0)

        t = 0.0
        for k in range(1, n_steps + 1):
            t = k * cfg.dt
            for rid in self.rids:
                traj = self.traj[rid]
                motion = between(traj[k - 1], traj[k]) if k < len(traj) else Pose3.identity()
                self.agents[rid] = propagate(self.agents[rid], motion, self.drift_rng[rid], cfg.dt)
            for rid in self.rids:
                rc = self.robots[rid]
                a, f = maybe_frame_switch(self.agents[rid], rc.frame_switch_threshold)
                if f is not None:
                    self.log.append({"type": "frame_switch", "t": t, "robot": rid, "node": list(a.current_node)})
                    self.emit(rid, t, factors=(f,))
                a, lc = maybe_loop_closure(a, a.history, rc.loop_closure, self.loop_rng[rid])
                if lc is not None:
                    self.log.append({"type": "loop_closure", "t": t, "robot": rid, "nodes": [list(e) for e in lc.endpoints]})
                    self.emit(rid, t, factors=(lc,))
                self.agents[rid] = a
            if k % period == 0:
                self.detect(t)
            self.deliver(t)
            if k % opt_period == 0:
                self.optimize_all(t)
            self.log_step(t)

        t_end = t
        while self.bus.in_flight:
            t = max(t, self.bus.next_due())
            self.deliver(t)
        self.optimize_all(t)
        consistency = check_consistency(self.graphs, self.bus)
        pending = {str(r): len(g.pending) for r, g in self.graphs.items()}
        self.log.append(
            {
                "type": "end",
                "t_end": t_end,
                "drained_at": t,
                "messages_sent": self.bus.n_sent,
                "n_optimizations": self.n_optimizations,
                "consistent": consistency.consistent,
                "digests": {str(r): format(d, "016x") for r, d in consistency.digests.items()},
                "pending": pending,
                "final_reports": {str(r): rep.to_dict() for r, rep in sorted(self.reports.items())},
                "metrics": self.online.finish(t_end),
            }
        )
        return self.log


def run_mission(cfg: MissionConfig, return_state=False):
    """Run a mission; the log is a pure function of ``cfg`` (seed included)."""
    mission = _Mission(cfg)
    log = mission.run()
    if return_state:
        return log, mission
    return log


def replay_metrics(log: MissionLog) -> "metrics.MetricsReport":
    if not log.complete:
        raise IncompleteLog("incomplete log")
    return metrics.compute_metrics(log)
