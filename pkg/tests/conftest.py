import numpy as np
import pytest
from hypothesis import settings

from slamsim.geometry import Pose3, Rotation

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_rotvec(rng, max_angle=np.pi - 1e-3):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


def random_pose(rng, max_angle=np.pi - 1e-3, scale=5.0):
    return Pose3(Rotation.from_rotvec(random_rotvec(rng, max_angle)), rng.uniform(-scale, scale, size=3))


def twist_matrix(xi):
    """4×4 matrix of a (rotation, translation) twist."""
    w, v = xi[:3], xi[3:]
    X = np.zeros((4, 4))
    X[:3, :3] = [[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]]
    X[:3, 3] = v
    return X


def series_expm(X, terms=20):
    """Truncated power series of the matrix exponential."""
    out = np.eye(X.shape[0])
    term = np.eye(X.shape[0])
    for k in range(1, terms):
        term = term @ X / k
        out = out + term
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_mission(**top):
    """Two rovers that glance at the Lander, then drive apart; about a minute long."""
    def rover(rid, sign):
        return {
            "robot_id": rid,
            "waypoints": [[sign * 4.0, 0.0], [sign * 3.0, 0.0], [sign * 3.0, 0.5], [sign * 14.0, sign * 6.0]],
            "speed": 0.5,
            "shape": {"type": "rover", "size": [1.1, 0.8, 0.9]},
            "drift": {"trans_std": 0.03, "rot_std": 0.01, "yaw_std_per_m": 0.005},
            "loop_closure": {"recall": 0.5, "radius": 1.5},
            "frame_switch_threshold": 0.01,
            "initial_pose_std": {"yaw": 0.02, "xy": 0.1},
        }

    cfg = {
        "name": "small",
        "seed": 3,
        "duration": 40.0,
        "dt": 1.0,
        "detection_period": 1.0,
        "robots": [rover(1, 1.0), rover(2, -1.0)],
    }
    cfg.update(top)
    return cfg


def noiseless(cfg):
    for r in cfg["robots"]:
        r["drift"] = {}
        r["loop_closure"] = {}
        r["initial_pose_std"] = {}
    cfg["enabled_detectors"] = []
    return cfg


# acceptance criteria report: one line per criterion, printed after the run
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
