"""Mission configuration: JSON schema, defaults and the single shared validator.

The schema is documented in ``docs/config.md``. Every subcommand goes through
:func:`parse_config`, so whatever ``validate-config`` accepts the others
accept too.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .agent import DriftModel, LoopClosureModel
from .camera import CameraIntrinsics, RobotShapePrior
from .detection import MARKER, MARKERLESS, SOURCES, DetectorModel, default_marker_model, default_markerless_model
from .geometry import Pose3
from .graph import LANDER_ID, OptOptions

REFERENCE_CONFIGS = ("mission_a", "mission_b")


class ConfigError(ValueError):
    def __init__(self, message, path="", line=None):
        self.path = path
        self.line = line
        where = f" (line {line})" if line else ""
        super().__init__(f"{path}: {message}{where}" if path else f"{message}{where}")


@dataclass(frozen=True)
class NetworkConfig:
    latency: float = 0.5
    drop_prob: float = 0.0
    retry_interval: float = 1.0
    jitter: float = 0.0


@dataclass(frozen=True, eq=False)
class RobotConfig:
    robot_id: int
    waypoints: tuple
    speed: float
    shape: RobotShapePrior
    camera: CameraIntrinsics
    drift: DriftModel
    loop_closure: LoopClosureModel
    frame_switch_threshold: float
    initial_yaw_std: float = 0.0
    initial_xy_std: float = 0.0


@dataclass(frozen=True, eq=False)
class MissionConfig:
    name: str
    seed: int
    arena_half_extent: float
    duration: float
    dt: float
    detection_period: float
    optimization_period: float
    lander_pose: Pose3
    lander_shape: RobotShapePrior
    detectors: dict
    enabled_detectors: tuple
    pair_overrides: dict
    prefer_marker: bool
    network: NetworkConfig
    optimizer: OptOptions
    robots: tuple
    raw: dict = field(default_factory=dict, repr=False)

    def enabled_for(self, observer, target):
        return self.pair_overrides.get((observer, target), self.enabled_detectors)

    @property
    def robot_ids(self):
        return tuple(r.robot_id for r in self.robots)

    def uses(self, source):
        if source in self.enabled_detectors:
            return True
        return any(source in v for v in self.pair_overrides.values())


# ------------------------------------------------------------------ reading


class _Reader:
    """Walks a JSON object, tracking the field path and rejecting unknown keys."""

    def __init__(self, data, path, text):
        if not isinstance(data, dict):
            raise ConfigError("expected an object", path, None)
        self.data = dict(data)
        self.path = path
        self.text = text
        self.used = set()

    def _sub(self, key):
        return f"{self.path}.{key}" if self.path else key

    def error(self, key, message):
        return ConfigError(message, self._sub(key), _line_of(self.text, key))

    def get(self, key, default=..., kind=float):
        self.used.add(key)
        if key not in self.data:
            if default is ...:
                raise self.error(key, "missing required key")
            return default
        value = self.data[key]
        try:
            if kind is float:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise TypeError
                return float(value)
            if kind is int:
                if isinstance(value, bool) or not isinstance(value, int):
                    raise TypeError
                return value
            if kind is bool:
                if not isinstance(value, bool):
                    raise TypeError
                return value
            if kind is str:
                if not isinstance(value, str):
                    raise TypeError
                return value
            if kind is list:
                if not isinstance(value, list):
                    raise TypeError
                return value
        except TypeError:
            raise self.error(key, f"expected {kind.__name__}, got {type(value).__name__}") from None
        return value

    def child(self, key, required=False):
        self.used.add(key)
        if key not in self.data:
            if required:
                raise self.error(key, "missing required section")
            return _Reader({}, self._sub(key), self.text)
        return _Reader(self.data[key], self._sub(key), self.text)

    def finish(self):
        for key in self.data:
            if key not in self.used:
                raise self.error(key, f"unknown key {key!r}")


def _line_of(text, key):
    if not text:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(str(key)), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _check(cond, reader, key, message):
    if not cond:
        raise reader.error(key, message)


def _vector(reader, key, n, default=...):
    value = reader.get(key, default, kind=list)
    if value is default:
        return default
    if len(value) != n or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise reader.error(key, f"expected a list of {n} numbers")
    return [float(v) for v in value]


def _shape(r: _Reader, type_default):
    type_id = r.get("type", type_default, kind=str)
    size = _vector(r, "size", 3)
    _check(all(s > 0 for s in size), r, "size", "sizes must be positive")
    normals = r.get("marker_normals", None, kind=list)
    if normals is not None:
        _check(
            normals and all(isinstance(n, list) and len(n) == 3 and np.linalg.norm(n) > 0 for n in normals),
            r,
            "marker_normals",
            "expected a list of nonzero 3-vectors",
        )
    r.finish()
    return RobotShapePrior.box(type_id, *size, marker_normals=normals)


def _detector(r: _Reader, kind):
    base = default_marker_model() if kind == MARKER else default_markerless_model()
    kwargs = dict(
        kind=kind,
        max_range=r.get("max_range", base.max_range),
        base_detect_prob=r.get("base_detect_prob", base.base_detect_prob),
        error_curve=tuple(tuple(k) for k in r.get("error_curve", [list(k) for k in base.error_curve], kind=list)),
    )
    if kind == MARKER:
        kwargs["max_view_angle"] = np.deg2rad(r.get("max_view_angle_deg", float(np.rad2deg(base.max_view_angle))))
    else:
        kwargs["aspect_ratio_limit"] = r.get("aspect_ratio_limit", base.aspect_ratio_limit)
        kwargs["min_confidence"] = r.get("min_confidence", base.min_confidence)
    r.finish()
    try:
        return DetectorModel(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e), r.path) from None


def _sources(reader, key, default):
    value = reader.get(key, default, kind=list)
    for s in value:
        _check(s in SOURCES, reader, key, f"unknown detector {s!r}; expected one of {list(SOURCES)}")
    return tuple(s for s in SOURCES if s in value)


def _robot(r: _Reader, half_extent):
    rid = r.get("robot_id", kind=int)
    _check(rid != LANDER_ID and rid > 0, r, "robot_id", f"robot ids must be positive ({LANDER_ID} is the lander)")
    wps = r.get("waypoints", kind=list)
    _check(len(wps) >= 2, r, "waypoints", "need at least two waypoints")
    pts = []
    for p in wps:
        _check(isinstance(p, list) and len(p) == 2 and all(isinstance(v, (int, float)) for v in p), r, "waypoints", "waypoints are [x, y] pairs")
        _check(abs(p[0]) <= half_extent and abs(p[1]) <= half_extent, r, "waypoints", f"waypoint {p} outside the arena")
        pts.append((float(p[0]), float(p[1])))
    speed = r.get("speed")
    _check(speed > 0, r, "speed", "speed must be positive")
    shape = _shape(r.child("shape", required=True), "rover")
    c = r.child("camera")
    cam_kwargs = dict(
        fx=c.get("fx", 500.0),
        fy=c.get("fy", 500.0),
        cx=c.get("cx", 320.0),
        cy=c.get("cy", 240.0),
        width=c.get("width", 640, kind=int),
        height=c.get("height", 480, kind=int),
    )
    c.finish()
    try:
        camera = CameraIntrinsics(**cam_kwargs)
    except ValueError as e:
        raise ConfigError(str(e), c.path) from None
    d = r.child("drift")
    drift_kwargs = dict(
        trans_std=d.get("trans_std", 0.0),
        rot_std=d.get("rot_std", 0.0),
        yaw_std_per_m=d.get("yaw_std_per_m", 0.0),
    )
    d.finish()
    lc = r.child("loop_closure")
    lc_kwargs = dict(
        recall=lc.get("recall", 0.0),
        radius=lc.get("radius", 2.0),
        trans_std=lc.get("trans_std", 0.05),
        rot_std=lc.get("rot_std", 0.01),
    )
    lc.finish()
    try:
        drift = DriftModel(**drift_kwargs)
        loop = LoopClosureModel(**lc_kwargs)
    except ValueError as e:
        raise ConfigError(str(e), r.path) from None
    threshold = r.get("frame_switch_threshold")
    _check(threshold > 0, r, "frame_switch_threshold", "threshold must be positive")
    init = r.child("initial_pose_std")
    yaw_std = init.get("yaw", 0.0)
    xy_std = init.get("xy", 0.0)
    init.finish()
    _check(yaw_std >= 0 and xy_std >= 0, r, "initial_pose_std", "stds must be non-negative")
    r.finish()
    return RobotConfig(rid, tuple(pts), speed, shape, camera, drift, loop, threshold, yaw_std, xy_std)


def parse_config(data: dict, text: str = "") -> MissionConfig:
    root = _Reader(data, "", text)
    name = root.get("name", "mission", kind=str)
    seed = root.get("seed", 0, kind=int)
    _check(seed >= 0, root, "seed", "seed must be non-negative")
    half = root.get("arena_half_extent", 20.0)
    _check(half > 0, root, "arena_half_extent", "must be positive")
    duration = root.get("duration")
    _check(duration > 0, root, "duration", "duration must be positive")
    dt = root.get("dt", 1.0)
    _check(dt > 0, root, "dt", "dt must be positive")
    period = root.get("detection_period", 1.0)
    _check(period > 0, root, "detection_period", "detection_period must be positive")
    opt_period = root.get("optimization_period", dt)
    _check(opt_period > 0, root, "optimization_period", "optimization_period must be positive")

    lander = root.child("lander")
    pos = _vector(lander, "position", 3, [0.0, 0.0, 0.0])
    yaw = lander.get("yaw", 0.0)
    lshape = lander.child("shape")
    lander_shape = _shape(lshape, "lander") if lshape.data else RobotShapePrior.box("lander", 3.0, 3.0, 2.5)
    lander.finish()

    det = root.child("detectors")
    detectors = {k: _detector(det.child(k), k) for k in SOURCES}
    det.finish()
    enabled = _sources(root, "enabled_detectors", list(SOURCES))
    overrides = {}
    for i, item in enumerate(root.get("pair_overrides", [], kind=list)):
        o = _Reader(item, f"pair_overrides[{i}]", text)
        pair = (o.get("observer", kind=int), o.get("target", kind=int))
        _check(pair[0] != pair[1], o, "target", "observer and target must differ")
        overrides[pair] = _sources(o, "enabled", [])
        o.finish()
    prefer_marker = root.get("prefer_marker", True, kind=bool)

    n = root.child("network")
    network = NetworkConfig(
        latency=n.get("latency", 0.5),
        drop_prob=n.get("drop_prob", 0.0),
        retry_interval=n.get("retry_interval", 1.0),
        jitter=n.get("jitter", 0.0),
    )
    n.finish()
    _check(network.latency >= 0 and network.jitter >= 0, root, "network", "latency and jitter must be non-negative")
    _check(0 <= network.drop_prob < 1, root, "network", "drop_prob must be in [0, 1)")
    _check(network.drop_prob == 0 or network.retry_interval > 0, root, "network", "retry_interval must be positive")

    o = root.child("optimizer")
    optimizer = OptOptions(
        max_iters=o.get("max_iters", 20, kind=int),
        cost_tol=o.get("cost_tol", 1e-10),
        step_tol=o.get("step_tol", 1e-10),
        lambda_init=o.get("lambda_init", 1e-4),
    )
    o.finish()

    robots_raw = root.get("robots", kind=list)
    _check(len(robots_raw) >= 1, root, "robots", "need at least one robot")
    robots = tuple(_robot(_Reader(r, f"robots[{i}]", text), half) for i, r in enumerate(robots_raw))
    ids = [r.robot_id for r in robots]
    _check(len(set(ids)) == len(ids), root, "robots", "robot ids must be unique")
    known = set(ids) | {LANDER_ID}
    for (a, b) in overrides:
        _check(a in ids and b in known, root, "pair_overrides", f"override ({a}, {b}) names an unknown robot")
    root.finish()

    cfg = MissionConfig(
        name=name,
        seed=seed,
        arena_half_extent=half,
        duration=duration,
        dt=dt,
        detection_period=period,
        optimization_period=opt_period,
        lander_pose=Pose3.planar(pos[0], pos[1], yaw, pos[2]),
        lander_shape=lander_shape,
        detectors=detectors,
        enabled_detectors=enabled,
        pair_overrides=overrides,
        prefer_marker=prefer_marker,
        network=network,
        optimizer=optimizer,
        robots=robots,
    )
    return replace(cfg, raw=to_dict(cfg))


def load_config(path) -> MissionConfig:
    text = Path(path).read_text()
    return loads_config(text)


def loads_config(text: str) -> MissionConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg} (column {e.colno})", line=e.lineno) from None
    return parse_config(data, text)


def reference_config(name: str) -> MissionConfig:
    if name not in REFERENCE_CONFIGS:
        raise KeyError(name)
    return loads_config(reference_config_text(name))


def reference_config_text(name: str) -> str:
    return resources.files("slamsim").joinpath("configs", f"{name}.json").read_text()


# ------------------------------------------------------------------ writing


def _shape_dict(s: RobotShapePrior):
    return {"type": s.type_id, "size": [float(v) for v in s.size], "marker_normals": [list(n) for n in s.marker_normals]}


def to_dict(cfg: MissionConfig) -> dict:
    """Normalized, fully explicit form; ``parse_config(to_dict(c))`` round-trips."""
    lp = cfg.lander_pose
    out = {
        "name": cfg.name,
        "seed": cfg.seed,
        "arena_half_extent": cfg.arena_half_extent,
        "duration": cfg.duration,
        "dt": cfg.dt,
        "detection_period": cfg.detection_period,
        "optimization_period": cfg.optimization_period,
        "lander": {"position": [float(v) for v in lp.translation], "yaw": lp.yaw, "shape": _shape_dict(cfg.lander_shape)},
        "detectors": {},
        "enabled_detectors": list(cfg.enabled_detectors),
        "pair_overrides": [
            {"observer": a, "target": b, "enabled": list(v)} for (a, b), v in sorted(cfg.pair_overrides.items())
        ],
        "prefer_marker": cfg.prefer_marker,
        "network": {
            "latency": cfg.network.latency,
            "drop_prob": cfg.network.drop_prob,
            "retry_interval": cfg.network.retry_interval,
            "jitter": cfg.network.jitter,
        },
        "optimizer": {
            "max_iters": cfg.optimizer.max_iters,
            "cost_tol": cfg.optimizer.cost_tol,
            "step_tol": cfg.optimizer.step_tol,
            "lambda_init": cfg.optimizer.lambda_init,
        },
        "robots": [],
    }
    for kind, m in cfg.detectors.items():
        d = {"max_range": m.max_range, "base_detect_prob": m.base_detect_prob, "error_curve": [list(k) for k in m.error_curve]}
        if kind == MARKER:
            d["max_view_angle_deg"] = float(np.rad2deg(m.max_view_angle))
        else:
            d["aspect_ratio_limit"] = m.aspect_ratio_limit
            d["min_confidence"] = m.min_confidence
        out["detectors"][kind] = d
    for r in cfg.robots:
        c = r.camera
        out["robots"].append(
            {
                "robot_id": r.robot_id,
                "waypoints": [list(p) for p in r.waypoints],
                "speed": r.speed,
                "shape": _shape_dict(r.shape),
                "camera": {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height},
                "drift": {"trans_std": r.drift.trans_std, "rot_std": r.drift.rot_std, "yaw_std_per_m": r.drift.yaw_std_per_m},
                "loop_closure": {
                    "recall": r.loop_closure.recall,
                    "radius": r.loop_closure.radius,
                    "trans_std": r.loop_closure.trans_std,
                    "rot_std": r.loop_closure.rot_std,
                },
                "frame_switch_threshold": r.frame_switch_threshold,
                "initial_pose_std": {"yaw": r.initial_yaw_std, "xy": r.initial_xy_std},
            }
        )
    return out


def config_digest(cfg: MissionConfig, ignore_detectors=False) -> str:
    d = dict(cfg.raw or to_dict(cfg))
    if ignore_detectors:
        d.pop("enabled_detectors", None)
        d.pop("pair_overrides", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def with_detectors(cfg: MissionConfig, sources) -> MissionConfig:
    """Restrict detector enablement everywhere to ``sources``."""
    allowed = set(sources)
    enabled = tuple(s for s in SOURCES if s in allowed)
    overrides = {k: tuple(s for s in v if s in allowed) for k, v in cfg.pair_overrides.items()}
    new = replace(cfg, enabled_detectors=enabled, pair_overrides=overrides)
    return replace(new, raw=to_dict(new))


def with_seed(cfg: MissionConfig, seed: int) -> MissionConfig:
    new = replace(cfg, seed=int(seed))
    return replace(new, raw=to_dict(new))


DETECTOR_CHOICES = {"marker": (MARKER,), "markerless": (MARKERLESS,), "both": (MARKER, MARKERLESS)}
