import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from contsplat.core import Camera, GaussianScene  # noqa: E402


def small_camera(width=32, height=32, f=40.0, eye=(0.0, 0.0, -12.0)):
    return Camera.look_at(np.array(eye, dtype=float), np.zeros(3), np.array([0.0, -1.0, 0.0]), f, f,
                          (width - 1) / 2, (height - 1) / 2, width, height)


def random_scene(rng, n, spread=3.0, scale=(0.3, 1.0), depth_jitter=2.0, dtype=np.float64):
    p = np.zeros((n, 14))
    p[:, 0:2] = rng.uniform(-spread, spread, (n, 2))
    p[:, 2] = rng.uniform(-depth_jitter, depth_jitter, n)
    q = rng.normal(size=(n, 4))
    p[:, 3:7] = q / np.linalg.norm(q, axis=1, keepdims=True)
    p[:, 7:10] = np.log(rng.uniform(*scale, (n, 3)))
    p[:, 10] = rng.normal(0.0, 1.0, n)
    p[:, 11:14] = rng.uniform(0.1, 0.9, (n, 3))
    return GaussianScene(p.astype(dtype))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return small_camera()


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
