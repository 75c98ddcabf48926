"""SE(3) rigid transforms and their Lie-group machinery.

Conventions used throughout the package:

* Quaternions are stored as ``(w, x, y, z)``.
* Twists are plain 6-vectors ordered ``(rotation, translation)``:
  ``xi[:3]`` is an axis-angle rotation vector in radians and ``xi[3:]``
  the translational part in meters. Information matrices, residuals and
  Jacobians all use this ordering.
* Perturbations are applied on the right: ``T_perturbed = T @ exp(delta)``.

Single poses use the quaternion path (``Pose3``); the optimizer uses the
batched rotation-matrix helpers at the bottom of this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular

LOG_BRANCH_LIMIT = np.pi - 1e-6
_SERIES_CUTOFF = 0.25


class GeometryError(ValueError):
    """Raised for undefined Lie-group operations."""


def hat(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _poly(t2, coeffs):
    out = np.zeros_like(t2)
    for c in reversed(coeffs):
        out = out * t2 + c
    return out


# Taylor coefficients in powers of theta**2, used below _SERIES_CUTOFF.
_A = (1.0, -1 / 6, 1 / 120, -1 / 5040, 1 / 362880, -1 / 39916800)
_B = (1 / 2, -1 / 24, 1 / 720, -1 / 40320, 1 / 3628800, -1 / 479001600)
_C = (1 / 6, -1 / 120, 1 / 5040, -1 / 362880, 1 / 39916800, -1 / 6227020800)
_D = (1 / 12, 1 / 720, 1 / 30240, 1 / 1209600, 1 / 47900160, 691 / 1307674368000)
_Q2 = (1 / 24, -1 / 720, 1 / 40320, -1 / 3628800, 1 / 479001600, -1 / 87178291200)
_Q3 = (1 / 120, -1 / 2520, 1 / 120960, -1 / 9979200, 1 / 1245404160, -1 / 217945728000)


def _coefficients(theta):
    """sin/cos coefficient functions of the rotation angle (array in, dict out)."""
    theta = np.asarray(theta, dtype=float)
    small = theta < _SERIES_CUTOFF
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    s, c = np.sin(t), np.cos(t)
    a = np.where(small, _poly(t2, _A), s / t)
    b = np.where(small, _poly(t2, _B), (1.0 - c) / t**2)
    cc = np.where(small, _poly(t2, _C), (t - s) / t**3)
    d = np.where(small, _poly(t2, _D), (1.0 - s * t / (2.0 * (1.0 - c))) / t**2)
    q2 = np.where(small, _poly(t2, _Q2), (t * t + 2.0 * c - 2.0) / (2.0 * t**4))
    q3 = np.where(small, _poly(t2, _Q3), (2.0 * t - 3.0 * s + t * c) / (2.0 * t**5))
    return {"A": a, "B": b, "C": cc, "D": d, "Q2": q2, "Q3": q3}


_CLOSED = {
    "A": lambda t, s, c: s / t,
    "B": lambda t, s, c: (1.0 - c) / t**2,
    "C": lambda t, s, c: (t - s) / t**3,
    "D": lambda t, s, c: (1.0 - s * t / (2.0 * (1.0 - c))) / t**2,
}
_SERIES = {"A": _A, "B": _B, "C": _C, "D": _D}


def _coefficient(name, theta):
    """Scalar version of one entry of :func:`_coefficients` (plain floats, no arrays)."""
    theta = float(theta)
    if theta < _SERIES_CUTOFF:
        t2 = theta * theta
        out = 0.0
        for c in reversed(_SERIES[name]):
            out = out * t2 + c
        return out
    return _CLOSED[name](theta, math.sin(theta), math.cos(theta))


# ---------------------------------------------------------------- quaternions


def quat_multiply(a, b):
    aw, ax, ay, az = np.asarray(a, dtype=float).tolist()
    bw, bx, by, bz = np.asarray(b, dtype=float).tolist()
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q):
    w, x, y, z = np.asarray(q, dtype=float).tolist()
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    return matrices_to_quats(np.asarray(R, dtype=float)[None])[0]


def matrices_to_quats(R):
    """Shepperd's method, vectorized over a stack of rotation matrices."""
    R = np.asarray(R, dtype=float)
    n = R.shape[0]
    tr = R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2]
    diag = np.stack([tr, R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=1)
    k = np.argmax(diag, axis=1)
    q = np.empty((n, 4))

    m = k == 0
    s = 2.0 * np.sqrt(1.0 + tr[m])
    q[m, 0] = 0.25 * s
    q[m, 1] = (R[m, 2, 1] - R[m, 1, 2]) / s
    q[m, 2] = (R[m, 0, 2] - R[m, 2, 0]) / s
    q[m, 3] = (R[m, 1, 0] - R[m, 0, 1]) / s

    m = k == 1
    s = 2.0 * np.sqrt(1.0 + R[m, 0, 0] - R[m, 1, 1] - R[m, 2, 2])
    q[m, 0] = (R[m, 2, 1] - R[m, 1, 2]) / s
    q[m, 1] = 0.25 * s
    q[m, 2] = (R[m, 0, 1] + R[m, 1, 0]) / s
    q[m, 3] = (R[m, 0, 2] + R[m, 2, 0]) / s

    m = k == 2
    s = 2.0 * np.sqrt(1.0 + R[m, 1, 1] - R[m, 0, 0] - R[m, 2, 2])
    q[m, 0] = (R[m, 0, 2] - R[m, 2, 0]) / s
    q[m, 1] = (R[m, 0, 1] + R[m, 1, 0]) / s
    q[m, 2] = 0.25 * s
    q[m, 3] = (R[m, 1, 2] + R[m, 2, 1]) / s

    m = k == 3
    s = 2.0 * np.sqrt(1.0 + R[m, 2, 2] - R[m, 0, 0] - R[m, 1, 1])
    q[m, 0] = (R[m, 1, 0] - R[m, 0, 1]) / s
    q[m, 1] = (R[m, 0, 2] + R[m, 2, 0]) / s
    q[m, 2] = (R[m, 1, 2] + R[m, 2, 1]) / s
    q[m, 3] = 0.25 * s

    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1.0
    return q


def quats_to_rotvecs(q):
    """Principal-branch rotation vectors for a stack of quaternions."""
    q = np.array(q, dtype=float)
    q[q[:, 0] < 0] *= -1.0
    v = q[:, 1:]
    n = np.linalg.norm(v, axis=1)
    theta = 2.0 * np.arctan2(n, q[:, 0])
    tiny = n < 1e-12
    scale = np.where(tiny, 2.0 / np.where(tiny, q[:, 0], 1.0), theta / np.where(tiny, 1.0, n))
    return v * scale[:, None]


def rotvec_to_quat(w):
    w = np.asarray(w, dtype=float)
    half = 0.5 * math.sqrt(float(w @ w))
    k = _coefficient("A", half) * 0.5  # sin(theta/2) / theta
    return np.array([math.cos(half), k * w[0], k * w[1], k * w[2]])


# ------------------------------------------------------------------ rotations


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit-quaternion rotation. ``quat`` is always normalized."""

    quat: np.ndarray

    def __post_init__(self):
        w, x, y, z = np.asarray(self.quat, dtype=float).reshape(4).tolist()
        n = math.sqrt(w * w + x * x + y * y + z * z)
        q = np.array([w / n, x / n, y / n, z / n])
        q.setflags(write=False)
        object.__setattr__(self, "quat", q)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_rotvec(cls, w):
        return cls(rotvec_to_quat(w))

    @classmethod
    def from_matrix(cls, R):
        return cls(matrix_to_quat(R))

    @classmethod
    def about_z(cls, angle):
        return cls(np.array([np.cos(angle / 2), 0.0, 0.0, np.sin(angle / 2)]))

    @cached_property
    def matrix(self):
        R = quat_to_matrix(self.quat)
        R.setflags(write=False)
        return R

    @property
    def angle(self):
        v = self.quat[1:]
        return 2.0 * math.atan2(math.sqrt(float(v @ v)), abs(float(self.quat[0])))

    def rotvec(self):
        w, v = self.quat[0], self.quat[1:]
        if w < 0:
            w, v = -w, -v
        n = math.sqrt(float(v @ v))
        if n < 1e-12:
            return v * (2.0 / w)
        return v * (2.0 * math.atan2(n, w) / n)

    def canonical_quat(self):
        return self.quat if self.quat[0] >= 0 else -self.quat

    def inverse(self):
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def apply(self, v):
        return self.matrix @ np.asarray(v, dtype=float)

    def __matmul__(self, other):
        return Rotation(quat_multiply(self.quat, other.quat))

    def __repr__(self):
        return f"Rotation(quat={np.array2string(self.quat, precision=6)})"


@dataclass(frozen=True, eq=False)
class Pose3:
    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(Rotation.from_matrix(T[:3, :3]), T[:3, 3])

    @classmethod
    def planar(cls, x, y, yaw, z=0.0):
        return cls(Rotation.about_z(yaw), np.array([x, y, z], dtype=float))

    @classmethod
    def from_vector(cls, v):
        """Inverse of :meth:`to_vector` (``qw qx qy qz tx ty tz``)."""
        v = np.asarray(v, dtype=float)
        return cls(Rotation(v[:4]), v[4:7])

    def to_vector(self):
        return np.concatenate([self.rotation.canonical_quat(), self.translation])

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix
        T[:3, 3] = self.translation
        return T

    @property
    def yaw(self):
        R = self.rotation.matrix
        return float(np.arctan2(R[1, 0], R[0, 0]))

    def transform_point(self, p):
        return self.rotation.apply(p) + self.translation

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        return f"Pose3(q={np.array2string(self.rotation.canonical_quat(), precision=6)}, t={np.array2string(self.translation, precision=6)})"


def compose(a: Pose3, b: Pose3) -> Pose3:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    return Pose3(a.rotation @ b.rotation, a.rotation.apply(b.translation) + a.translation)


def inverse(p: Pose3) -> Pose3:
    rinv = p.rotation.inverse()
    return Pose3(rinv, -rinv.apply(p.translation))


def between(a: Pose3, b: Pose3) -> Pose3:
    """Relative pose ``a⁻¹ ∘ b``."""
    return compose(inverse(a), b)


def exp(xi) -> Pose3:
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[:3], xi[3:]
    return Pose3(Rotation.from_rotvec(phi), so3_left_jacobian(phi) @ rho)


def log(p: Pose3) -> np.ndarray:
    if p.rotation.angle >= LOG_BRANCH_LIMIT:
        raise GeometryError("log branch singularity")
    phi = p.rotation.rotvec()
    rho = so3_left_jacobian_inv(phi) @ p.translation
    return np.concatenate([phi, rho])


def rotation_angle(p: Pose3) -> float:
    return p.rotation.angle


def translation_norm(p: Pose3) -> float:
    return float(np.linalg.norm(p.translation))


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    theta = math.sqrt(float(phi @ phi))
    W = hat(phi)
    return np.eye(3) + _coefficient("B", theta) * W + _coefficient("C", theta) * (W @ W)


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    W = hat(phi)
    return np.eye(3) - 0.5 * W + _coefficient("D", math.sqrt(float(phi @ phi))) * (W @ W)


def check_information(info):
    """Return the lower Cholesky factor of an information matrix or raise."""
    info = np.asarray(info, dtype=float)
    if info.shape != (6, 6) or not np.allclose(info, info.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(info).max())):
        raise GeometryError("non-SPD information")
    try:
        return np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise GeometryError("non-SPD information") from None


def diagonal_information(rot_std, trans_std):
    return np.diag([rot_std**-2.0] * 3 + [trans_std**-2.0] * 3)


def sample_twist_noise(info, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian twist with covariance ``info⁻¹``."""
    L = check_information(info)
    z = rng.standard_normal(6)
    # info = L Lᵀ, so x = L⁻ᵀ z has covariance L⁻ᵀ L⁻¹ = info⁻¹
    return solve_triangular(L.T, z, lower=False)


# ------------------------------------------------------------- batched (N, ...)


def hat_batch(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp_batch(phi):
    phi = np.asarray(phi, dtype=float)
    co = _coefficients(np.linalg.norm(phi, axis=-1))
    W = hat_batch(phi)
    return np.eye(3) + co["A"][..., None, None] * W + co["B"][..., None, None] * (W @ W)


def so3_log_batch(R):
    return quats_to_rotvecs(matrices_to_quats(R))


def se3_exp_batch(xi):
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[:, :3], xi[:, 3:]
    co = _coefficients(np.linalg.norm(phi, axis=1))
    W = hat_batch(phi)
    WW = W @ W
    R = np.eye(3) + co["A"][:, None, None] * W + co["B"][:, None, None] * WW
    V = np.eye(3) + co["B"][:, None, None] * W + co["C"][:, None, None] * WW
    return R, np.einsum("nij,nj->ni", V, rho)


def se3_log_batch(R, t):
    phi = so3_log_batch(R)
    co = _coefficients(np.linalg.norm(phi, axis=1))
    W = hat_batch(phi)
    Vinv = np.eye(3) - 0.5 * W + co["D"][:, None, None] * (W @ W)
    return np.concatenate([phi, np.einsum("nij,nj->ni", Vinv, t)], axis=1)


def adjoint_batch(R, t):
    """Adjoint matrices in (rotation, translation) ordering: [[R, 0], [t^R, R]]."""
    n = R.shape[0]
    Ad = np.zeros((n, 6, 6))
    Ad[:, :3, :3] = R
    Ad[:, 3:, 3:] = R
    Ad[:, 3:, :3] = hat_batch(t) @ R
    return Ad


def se3_right_jacobian_inv_batch(xi):
    """Inverse right Jacobian of SE(3) at each twist, (rotation, translation) order."""
    xi = -np.asarray(xi, dtype=float)  # Jr(xi) = Jl(-xi)
    phi, rho = xi[:, :3], xi[:, 3:]
    co = _coefficients(np.linalg.norm(phi, axis=1))
    P = hat_batch(phi)
    Pr = hat_batch(rho)
    PP = P @ P
    PrP = Pr @ P
    PPr = P @ Pr
    PPrP = PPr @ P
    c1 = co["C"][:, None, None]
    c2 = co["Q2"][:, None, None]
    c3 = co["Q3"][:, None, None]
    Q = (
        0.5 * Pr
        + c1 * (PPr + PrP + PPrP)
        + c2 * (P @ PPr + PrP @ P - 3.0 * PPrP)
        + c3 * (PPrP @ P + P @ PPrP)
    )
    Jinv = np.eye(3) - 0.5 * P + co["D"][:, None, None] * PP
    out = np.zeros((xi.shape[0], 6, 6))
    out[:, :3, :3] = Jinv
    out[:, 3:, 3:] = Jinv
    out[:, 3:, :3] = -Jinv @ Q @ Jinv
    return out
