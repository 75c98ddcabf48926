"""Reference implementations that share no code with the package's SE(3) kernels."""

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.spatial.transform import Rotation as SciRot

ROBUST = {"loop_closure", "robot_detection"}


def hom(pose):
    """4×4 matrix from a package Pose3 (only its public fields are read)."""
    T = np.eye(4)
    T[:3, :3] = SciRot.from_quat(np.roll(pose.rotation.quat, -1)).as_matrix()
    T[:3, 3] = pose.translation
    return T


def skew(w):
    return np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])


def se3_exp(xi):
    X = np.zeros((4, 4))
    X[:3, :3] = skew(xi[:3])
    X[:3, 3] = xi[3:]
    return scipy.linalg.expm(X)


def se3_log(T):
    phi = SciRot.from_matrix(T[:3, :3]).as_rotvec()
    th = np.linalg.norm(phi)
    W = skew(phi)
    if th < 1e-5:
        V = np.eye(3) + W / 2 + W @ W / 6
    else:
        V = np.eye(3) + (1 - np.cos(th)) / th**2 * W + (th - np.sin(th)) / th**3 * W @ W
    return np.concatenate([phi, np.linalg.solve(V, T[:3, 3])])


def factor_residual(f, mats):
    M = hom(f.measurement)
    if len(f.endpoints) == 1:
        rel = mats[f.endpoints[0]]
    else:
        rel = np.linalg.inv(mats[f.endpoints[0]]) @ mats[f.endpoints[1]]
    return se3_log(np.linalg.inv(M) @ rel)


def factor_cost(f, mats):
    r = factor_residual(f, mats)
    s = float(r @ f.information @ r)
    if f.kind in ROBUST and s > 1.0:
        return 2.0 * np.sqrt(s) - 1.0
    return s


def graph_cost(factors, mats):
    return sum(factor_cost(f, mats) for f in factors)


def _whitened(f, mats):
    e = np.linalg.cholesky(f.information).T @ factor_residual(f, mats)
    if f.kind in ROBUST:
        s = float(e @ e)
        if s > 1.0:
            e = e * np.sqrt((2.0 * np.sqrt(s) - 1.0) / s)
    return e


def brute_force_minimize(nodes, factors, fixed=()):
    """Minimize the graph cost with a derivative-free-Jacobian trust-region solver.

    Each free node is T0·exp(δ); the residual vector is chosen so that its
    squared norm equals the robust cost.
    """
    free = [n for n in sorted(nodes) if n not in fixed]
    base = {n: hom(p) for n, p in nodes.items()}

    def mats_of(x):
        mats = dict(base)
        for i, n in enumerate(free):
            mats[n] = base[n] @ se3_exp(x[6 * i : 6 * i + 6])
        return mats

    def fun(x):
        mats = mats_of(x)
        return np.concatenate([_whitened(f, mats) for f in factors])

    res = scipy.optimize.least_squares(fun, np.zeros(6 * len(free)), jac="3-point", method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-12, max_nfev=2000)
    mats = mats_of(res.x)
    return graph_cost(factors, mats), mats
