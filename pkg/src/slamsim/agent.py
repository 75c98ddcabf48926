"""Per-robot front-end stand-in: drifting odometry, submaps, loop closures.

Noise is planar (x, y, yaw), the way a wheeled rover with a gravity-aligned
IMU drifts; roll, pitch and height are taken as observable and stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .detection import DetectionConstraint
from .geometry import (
    Pose3,
    between,
    compose,
    diagonal_information,
    exp,
    inverse,
    rotation_angle,
    sample_twist_noise,
    translation_norm,
)
from .graph import FRAME_SWITCH, LOOP_CLOSURE, ROBOT_DETECTION, Factor, NodeId

COVARIANCE_FLOOR = 1e-6

# twist component indices
_YAW, _TX, _TY = 2, 3, 4


@dataclass(frozen=True)
class DriftModel:
    """Odometry noise.

    trans_std: m/√m on x and y, per meter driven.
    rot_std: rad/√rad on yaw, per radian turned.
    yaw_std_per_m: rad/√m on yaw, per meter driven.
    growth: 6×6 covariance increment per meter; defaults to the variance the
    noise above injects per meter.
    """

    trans_std: float = 0.0
    rot_std: float = 0.0
    yaw_std_per_m: float = 0.0
    growth: Optional[np.ndarray] = None

    def __post_init__(self):
        if min(self.trans_std, self.rot_std, self.yaw_std_per_m) < 0:
            raise ValueError("drift stds must be non-negative")
        if self.growth is None:
            g = np.zeros((6, 6))
            g[_YAW, _YAW] = self.yaw_std_per_m**2
            g[_TX, _TX] = g[_TY, _TY] = self.trans_std**2
        else:
            g = np.array(self.growth, dtype=float).reshape(6, 6)
            if not np.allclose(g, g.T) or np.linalg.eigvalsh(g).min() < -1e-15:
                raise ValueError("growth must be symmetric PSD")
        g.setflags(write=False)
        object.__setattr__(self, "growth", g)

    @property
    def noiseless(self):
        return self.trans_std == 0 and self.rot_std == 0 and self.yaw_std_per_m == 0


@dataclass(frozen=True)
class LoopClosureModel:
    recall: float = 0.0
    radius: float = 2.0
    trans_std: float = 0.05
    rot_std: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.recall <= 1.0:
            raise ValueError("recall must be in [0, 1]")
        if self.radius < 0 or self.trans_std <= 0 or self.rot_std <= 0:
            raise ValueError("loop-closure radius/stds must be positive")


@dataclass(frozen=True, eq=False)
class AgentState:
    robot_id: int
    gt_pose: Pose3
    est_pose: Pose3  # dead-reckoned world pose
    local_offset: Pose3  # estimated motion since current_node was created
    covariance: np.ndarray
    current_node: NodeId
    drift: DriftModel = field(default_factory=DriftModel)
    clock: float = 0.0
    node_gt: tuple = ()  # ((NodeId, gt pose at creation), ...)
    closed_pairs: frozenset = frozenset()

    def __post_init__(self):
        if self.current_node.robot != self.robot_id:
            raise ValueError("current_node must belong to this robot")

    @classmethod
    def start(cls, robot_id, gt_pose, est_pose=None, drift=None):
        node = NodeId(robot_id, 0)
        return cls(
            robot_id=robot_id,
            gt_pose=gt_pose,
            est_pose=gt_pose if est_pose is None else est_pose,
            local_offset=Pose3.identity(),
            covariance=np.eye(6) * COVARIANCE_FLOOR,
            current_node=node,
            drift=drift or DriftModel(),
            node_gt=((node, gt_pose),),
        )

    @property
    def history(self):
        return list(self.node_gt)


def _motion_noise(drift: DriftModel, dist: float, turn: float, rng):
    var = np.zeros(6)
    var[_YAW] = drift.yaw_std_per_m**2 * dist + drift.rot_std**2 * turn
    var[_TX] = var[_TY] = drift.trans_std**2 * dist
    noise = np.zeros(6)
    idx = np.flatnonzero(var > 0)
    if idx.size:
        noise[idx] = rng.standard_normal(idx.size) * np.sqrt(var[idx])
    return noise


def propagate(a: AgentState, gt_motion: Pose3, rng, dt: float = 0.0) -> AgentState:
    """Advance ground truth by ``gt_motion`` and dead reckoning by a noisy copy of it."""
    dist = translation_norm(gt_motion)
    turn = rotation_angle(gt_motion)
    if dist == 0.0 and turn == 0.0:
        return replace(a, clock=a.clock + dt)
    noisy = compose(gt_motion, exp(_motion_noise(a.drift, dist, turn, rng)))
    cov = a.covariance + a.drift.growth * dist
    if a.drift.rot_std > 0:
        cov = cov.copy()
        cov[_YAW, _YAW] += a.drift.rot_std**2 * turn
    return replace(
        a,
        gt_pose=compose(a.gt_pose, gt_motion),
        est_pose=compose(a.est_pose, noisy),
        local_offset=compose(a.local_offset, noisy),
        covariance=cov,
        clock=a.clock + dt,
    )


def maybe_frame_switch(a: AgentState, threshold: float):
    """Start a new submap once the local covariance trace exceeds ``threshold``.

    Returns ``(state, factor)``; ``factor`` is None when no switch happens.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if np.trace(a.covariance) <= threshold:
        return a, None
    new_node = NodeId(a.robot_id, a.current_node.submap + 1)
    factor = Factor(
        FRAME_SWITCH,
        (a.current_node, new_node),
        a.local_offset,
        np.linalg.inv(a.covariance),
        a.clock,
    )
    state = replace(
        a,
        local_offset=Pose3.identity(),
        covariance=np.eye(6) * COVARIANCE_FLOOR,
        current_node=new_node,
        node_gt=a.node_gt + ((new_node, a.gt_pose),),
    )
    return state, factor


def maybe_loop_closure(a: AgentState, history, model: LoopClosureModel, rng):
    """Try to close a loop from the current node to an earlier, nearby one.

    ``history`` lists ``(NodeId, gt_pose)`` of this robot's nodes. The current
    node and its predecessor are never candidates. A submap is registered at
    most once: after one closure from the current node no further attempt is
    made until the next frame switch. Returns ``(state, factor or None)``.
    """
    if not history or model.recall <= 0.0:
        return a, None
    gt_of = dict(history)
    current = a.current_node
    if current not in gt_of or any(pair[1] == current for pair in a.closed_pairs):
        return a, None
    here = a.gt_pose.translation
    candidate = None
    for node, gt in sorted(history):
        if node.robot != a.robot_id or node.submap >= current.submap - 1:
            continue
        if np.linalg.norm(gt.translation - here) <= model.radius:
            candidate = node
            break
    if candidate is None:
        return a, None
    if rng.random() >= model.recall:
        return a, None
    info = diagonal_information(model.rot_std, model.trans_std)
    meas = compose(between(gt_of[candidate], gt_of[current]), exp(sample_twist_noise(info, rng)))
    factor = Factor(LOOP_CLOSURE, (candidate, current), meas, info, a.clock)
    return replace(a, closed_pairs=a.closed_pairs | {(candidate, current)}), factor


def ingest_detection(
    a: AgentState,
    c: DetectionConstraint,
    target_node: NodeId,
    target_offset: Pose3 | None = None,
    target_covariance=None,
) -> Factor:
    """Turn a body-to-body detection into a factor between the two current nodes.

    The target reports its current node and its local offset from it. The
    offsets' accumulated covariances are added to the detection covariance.
    """
    if c.observer_id != a.robot_id:
        raise ValueError("detection was not made by this robot")
    if target_node.robot != c.target_id:
        raise ValueError("target node does not belong to the detected robot")
    target_offset = Pose3.identity() if target_offset is None else target_offset
    meas = compose(compose(a.local_offset, c.measured_relative_pose), inverse(target_offset))
    cov = np.linalg.inv(c.information) + a.covariance
    if target_covariance is not None:
        cov = cov + target_covariance
    info = np.linalg.inv(cov)
    info = 0.5 * (info + info.T)
    return Factor(ROBOT_DETECTION, (a.current_node, target_node), meas, info, c.time)
