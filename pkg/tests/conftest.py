import numpy as np
import pytest

from flightcap.ballistics import BallisticParams, DEFAULT_GRAVITY
from flightcap.camera import CameraIntrinsics
from flightcap.config import GRAVITY_MAGNITUDE

ACCEPTANCE_LINES = []


def record_acceptance(number: int, passed: bool, detail: str) -> str:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture
def camera():
    return CameraIntrinsics(1000.0, (600.0, 400.0), (1200, 877))


def tilted_gravity(rng, max_deg=25.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.radians(rng.uniform(5.0, max_deg))
    v = DEFAULT_GRAVITY / GRAVITY_MAGNITUDE
    # Rodrigues rotation of the camera-down direction
    v = v * np.cos(ang) + np.cross(axis, v) * np.sin(ang) + axis * (axis @ v) * (1 - np.cos(ang))
    return GRAVITY_MAGNITUDE * v / np.linalg.norm(v)


def random_flight(rng, g=DEFAULT_GRAVITY, duration=20 / 30.0):
    """A throw that stays well inside a 1200x800 image at 3-7 m depth."""
    while True:
        b0 = np.array([rng.uniform(-1.0, 1.0), rng.uniform(-0.5, 0.8), rng.uniform(3.0, 7.0)])
        u = np.array([rng.uniform(-2.0, 2.0), rng.uniform(-5.0, -2.0), rng.uniform(-2.0, 2.0)])
        p = BallisticParams(b0, u, g)
        t = np.linspace(0, duration, 30)
        pts = p.b0 + p.u * t[:, None] + 0.5 * p.g * t[:, None] ** 2
        if pts[:, 2].min() > 1.5 and np.all(np.abs(pts[:, 0] / pts[:, 2]) < 0.55) \
                and np.all(np.abs(pts[:, 1] / pts[:, 2]) < 0.38):
            return p


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))
