"""Mutual robot detection: fiducial-marker and markerless sensor models.

Both models turn a ground-truth relative pose into a noisy
:class:`DetectionConstraint`. The markerless model additionally runs the
instance filter over a synthesized 2D bounding box, the same way the
real pipeline screens detector output before pose estimation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .camera import BoundingBox, CameraIntrinsics, RobotShapePrior, project_robot_bbox
from .geometry import Pose3, between, check_information, compose, diagonal_information, exp, sample_twist_noise

MARKER = "marker"
MARKERLESS = "markerless"
SOURCES = (MARKER, MARKERLESS)

CONFIDENCE_JITTER = 0.05


@dataclass(frozen=True)
class DetectorModel:
    kind: str
    max_range: float
    error_curve: tuple  # ((distance, trans_std, rot_std), ...)
    base_detect_prob: float = 1.0
    max_view_angle: float = np.deg2rad(60.0)  # marker only
    aspect_ratio_limit: float = 2.0  # markerless only
    min_confidence: float = 0.05  # markerless only

    def __post_init__(self):
        if self.kind not in SOURCES:
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if not 0.0 <= self.base_detect_prob <= 1.0:
            raise ValueError("base_detect_prob must be in [0, 1]")
        if self.aspect_ratio_limit <= 1.0:
            raise ValueError("aspect_ratio_limit must be > 1")
        if not 0.0 <= self.min_confidence <= 1.0:
            raise ValueError("min_confidence must be in [0, 1]")
        curve = tuple(tuple(float(v) for v in knot) for knot in self.error_curve)
        if not curve or any(len(k) != 3 for k in curve):
            raise ValueError("error_curve needs (distance, trans_std, rot_std) knots")
        d = [k[0] for k in curve]
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError("error_curve distances must be strictly increasing")
        if any(k[1] <= 0 or k[2] <= 0 for k in curve):
            raise ValueError("error_curve stds must be positive")
        object.__setattr__(self, "error_curve", curve)


def default_marker_model() -> DetectorModel:
    return DetectorModel(
        kind=MARKER,
        max_range=5.0,
        max_view_angle=np.deg2rad(60.0),
        base_detect_prob=0.9,
        error_curve=((0.0, 0.03, 0.02),),
    )


def default_markerless_model() -> DetectorModel:
    return DetectorModel(
        kind=MARKERLESS,
        max_range=17.0,
        base_detect_prob=0.95,
        aspect_ratio_limit=2.0,
        min_confidence=0.05,
        error_curve=((1.0, 0.08, 0.25), (5.0, 0.10, 0.10), (17.0, 0.20, 0.06)),
    )


def error_at_distance(model: DetectorModel, d: float) -> tuple:
    """Piecewise-linear (trans_std, rot_std) at distance ``d``, clamped at the ends."""
    if d < 0:
        raise ValueError("distance must be non-negative")
    knots = np.array(model.error_curve)
    return float(np.interp(d, knots[:, 0], knots[:, 1])), float(np.interp(d, knots[:, 0], knots[:, 2]))


@dataclass(frozen=True, eq=False)
class DetectionConstraint:
    observer_id: int
    target_id: int
    time: float
    measured_relative_pose: Pose3
    information: np.ndarray
    source: str
    distance: float = float("nan")
    bbox: Optional[BoundingBox] = None
    border_touch_count: Optional[int] = None

    def __post_init__(self):
        if self.observer_id == self.target_id:
            raise ValueError("observer and target must differ")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        check_information(self.information)


@dataclass(frozen=True)
class Miss:
    reason: str
    distance: float
    source: str


@dataclass(frozen=True)
class CandidateDetection:
    bbox: BoundingBox  # clamped to the image
    border_touch_count: int
    confidence: float
    target_id: int

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be in [0, 1]")


class FilterOutcome(NamedTuple):
    accepted: Optional[CandidateDetection]
    reason: Optional[str]


def aspect_ratio_ok(bbox: BoundingBox, r: float) -> bool:
    if bbox.width <= 0:
        return False
    ratio = bbox.height / bbox.width
    return 1.0 / r <= ratio <= r


def filter_instances(candidates: Sequence[CandidateDetection], r: float) -> FilterOutcome:
    """Keep the most confident candidate if it passes the box checks."""
    if r <= 1.0:
        raise ValueError("aspect ratio limit must be > 1")
    if not candidates:
        return FilterOutcome(None, "empty")
    best = max(candidates, key=lambda c: c.confidence)
    if not aspect_ratio_ok(best.bbox, r):
        return FilterOutcome(None, "aspect_ratio")
    if best.border_touch_count > 1:
        return FilterOutcome(None, "borders")
    return FilterOutcome(best, None)


def _marker_faces_observer(observer_pose: Pose3, target_pose: Pose3, shape: RobotShapePrior, max_angle: float) -> bool:
    los = target_pose.rotation.inverse().apply(observer_pose.translation - target_pose.translation)
    n = np.linalg.norm(los)
    if n == 0:
        return False
    los /= n
    normals = np.asarray(shape.marker_normals, dtype=float)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    angles = np.arccos(np.clip(normals @ los, -1.0, 1.0))
    return bool(angles.min() <= max_angle)


def attempt_detection(
    observer,
    target,
    cam: CameraIntrinsics,
    model: DetectorModel,
    shape: RobotShapePrior,
    rng: np.random.Generator,
    time: float = 0.0,
) -> Union[DetectionConstraint, Miss]:
    """One detection attempt of ``target`` by ``observer``.

    ``observer`` and ``target`` only need ``robot_id`` and ``gt_pose``.
    ``shape`` is the target's shape prior.
    """
    gt_o, gt_t = observer.gt_pose, target.gt_pose
    distance = float(np.linalg.norm(gt_t.translation - gt_o.translation))
    if distance > model.max_range:
        return Miss("range", distance, model.kind)

    projected = project_robot_bbox(cam, gt_o, gt_t, shape)
    bbox = touches = None
    if model.kind == MARKER:
        if not _marker_faces_observer(gt_o, gt_t, shape, model.max_view_angle):
            return Miss("view_angle", distance, model.kind)
        if projected is None:
            return Miss("not_visible", distance, model.kind)
        if rng.random() >= model.base_detect_prob:
            return Miss("random", distance, model.kind)
        trans_std, rot_std = model.error_curve[0][1], model.error_curve[0][2]
    else:
        if projected is None:
            return Miss("not_visible", distance, model.kind)
        box, touches = projected
        decay = min(max(1.0 - distance / model.max_range, 0.0), 1.0)
        jitter = rng.uniform(-CONFIDENCE_JITTER, CONFIDENCE_JITTER)
        confidence = min(max(model.base_detect_prob * decay + jitter, 0.0), 1.0)
        if confidence < model.min_confidence:
            return Miss("confidence", distance, model.kind)
        bbox = box.clamped(cam.width, cam.height)
        outcome = filter_instances([CandidateDetection(bbox, touches, confidence, target.robot_id)], model.aspect_ratio_limit)
        if outcome.accepted is None:
            return Miss(outcome.reason, distance, model.kind)
        trans_std, rot_std = error_at_distance(model, distance)

    info = diagonal_information(rot_std, trans_std)
    noise = sample_twist_noise(info, rng)
    measured = compose(between(gt_o, gt_t), exp(noise))
    return DetectionConstraint(
        observer_id=observer.robot_id,
        target_id=target.robot_id,
        time=time,
        measured_relative_pose=measured,
        information=info,
        source=model.kind,
        distance=distance,
        bbox=bbox,
        border_touch_count=touches,
    )
