import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from shapepose.geometry import CameraView, default_skeleton
from shapepose.synth import SceneConfig, ring_cameras

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def topology():
    return default_skeleton()


@pytest.fixture(scope="session")
def ring():
    return ring_cameras(SceneConfig(n_cameras=6))


def stereo_pair(baseline=1.0, focal=1000.0, width=1280, height=960):
    K = np.array([[focal, 0, width / 2], [0, focal, height / 2], [0, 0, 1.0]])
    a = CameraView.from_krt(K, np.eye(3), np.zeros(3), width, height, 0)
    b = CameraView.from_krt(K, np.eye(3), np.array([-baseline, 0.0, 0.0]), width, height, 1)
    return a, b


def random_camera(rng, view_id=0):
    """A camera 3-6 m from the origin looking roughly at it."""
    from scipy.spatial.transform import Rotation

    C = rng.normal(size=3)
    C = C / np.linalg.norm(C) * rng.uniform(3, 6)
    z = -C / np.linalg.norm(C)
    up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = Rotation.from_rotvec(rng.normal(scale=0.05, size=3)).as_matrix() @ np.stack([x, y, z])
    f = rng.uniform(500, 1500)
    K = np.array([[f, 0, 640], [0, f, 480], [0, 0, 1.0]])
    return CameraView.from_krt(K, R, -R @ C, 1280, 960, view_id)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance criteria verdicts recorded via ``record_property``."""
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) != "call":
                continue
            lines += [v for k, v in getattr(rep, "user_properties", ()) if k == "criterion"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
