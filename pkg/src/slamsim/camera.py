"""Pinhole camera, robot shape priors, and bounding-box synthesis."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Pose3, Rotation, compose, inverse

MIN_DEPTH = 1e-6

# Body frame: x forward, y left, z up. Camera frame: z forward, x right, y down.
BODY_T_CAMERA = Pose3(
    Rotation.from_matrix(np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])),
    np.zeros(3),
)


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if int(self.width) != self.width or int(self.height) != self.height or self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive integers")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def horizontal_fov(self):
        return 2.0 * np.arctan2(self.width / 2.0, self.fx)


@dataclass(frozen=True)
class BoundingBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise ValueError("inverted bounding box")

    @property
    def width(self):
        return self.xmax - self.xmin

    @property
    def height(self):
        return self.ymax - self.ymin

    def clamped(self, width, height) -> "BoundingBox":
        xmin = min(max(self.xmin, 0.0), width)
        xmax = min(max(self.xmax, 0.0), width)
        ymin = min(max(self.ymin, 0.0), height)
        ymax = min(max(self.ymax, 0.0), height)
        return BoundingBox(xmin, ymin, xmax, ymax)

    def as_list(self):
        return [self.xmin, self.ymin, self.xmax, self.ymax]


def _default_marker_normals():
    return ((1.0, 0.0, 0.0), (-1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, -1.0, 0.0))


@dataclass(frozen=True)
class RobotShapePrior:
    """Axis-aligned body-frame box around the body center.

    ``marker_normals`` are the outward normals of the fiducial arrays mounted
    on the body; a marker detection needs one of them facing the observer.
    """

    type_id: str
    corners: np.ndarray
    marker_normals: tuple = field(default_factory=_default_marker_normals)

    def __post_init__(self):
        c = np.array(self.corners, dtype=float).reshape(8, 3)
        extent = c.max(axis=0) - c.min(axis=0)
        if np.any(extent <= 0):
            raise ValueError("shape prior must have nonzero volume")
        if not np.allclose(c.mean(axis=0), 0.0, atol=1e-9):
            raise ValueError("corners must be symmetric about the body center")
        c.setflags(write=False)
        object.__setattr__(self, "corners", c)

    @classmethod
    def box(cls, type_id, length, width, height, marker_normals=None):
        hx, hy, hz = length / 2.0, width / 2.0, height / 2.0
        corners = np.array([[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        if marker_normals is None:
            return cls(type_id, corners)
        return cls(type_id, corners, tuple(tuple(map(float, n)) for n in marker_normals))

    @property
    def size(self):
        return self.corners.max(axis=0) - self.corners.min(axis=0)


def project_point(cam: CameraIntrinsics, p_cam) -> np.ndarray:
    x, y, z = np.asarray(p_cam, dtype=float)
    if z <= MIN_DEPTH:
        raise CameraError("behind camera")
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])


def target_in_camera(observer_pose: Pose3, target_pose: Pose3) -> Pose3:
    """Pose of the target body expressed in the observer's camera frame."""
    world_T_cam = compose(observer_pose, BODY_T_CAMERA)
    return compose(inverse(world_T_cam), target_pose)


def project_robot_bbox(cam, observer_pose, target_pose, shape) -> Optional[tuple]:
    """Project the target's shape box into the observer camera.

    Returns ``(unclamped_box, border_touch_count)`` or ``None`` when the target
    is not visible (a corner behind the camera or an empty clamped box).
    """
    cam_T_target = target_in_camera(observer_pose, target_pose)
    pts = shape.corners @ cam_T_target.rotation.matrix.T + cam_T_target.translation
    if np.any(pts[:, 2] <= MIN_DEPTH):
        return None
    u = cam.fx * pts[:, 0] / pts[:, 2] + cam.cx
    v = cam.fy * pts[:, 1] / pts[:, 2] + cam.cy
    box = BoundingBox(float(u.min()), float(v.min()), float(u.max()), float(v.max()))
    clamped = box.clamped(cam.width, cam.height)
    if clamped.width <= 0 or clamped.height <= 0:
        return None
    touches = (
        int(box.xmin <= 0.0)
        + int(box.xmax >= cam.width)
        + int(box.ymin <= 0.0)
        + int(box.ymax >= cam.height)
    )
    return box, touches
