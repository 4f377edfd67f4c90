import sys

import numpy as np
import pytest

from esvae import geometry as geo
from esvae import trajectory as tr


def random_preshape(rng, k=5, m=3, size=()):
    shape = (size,) if np.isscalar(size) else tuple(size)
    return geo.to_preshape(rng.standard_normal(shape + (k, m)))


def smooth_trajectory(rng, T=20, k=5, m=3, speed=0.4):
    """Preshape trajectory following a smooth random path."""
    t = tr.grid(T)[:, None, None]
    base = rng.standard_normal((k, m))
    d1, d2 = rng.standard_normal((2, k, m))
    return geo.to_preshape(base + speed * (np.sin(np.pi * t) * d1 + np.sin(2 * np.pi * t) * t * d2))


def random_similarity(rng, traj):
    """Independent random rotation, scale and translation for every frame."""
    T, k, m = traj.shape
    rot = geo.random_rotation(m, rng, T)
    scale = np.exp(rng.uniform(np.log(0.5), np.log(2.0), T))[:, None, None]
    shift = rng.uniform(-2, 2, (T, 1, m))
    return scale * (traj @ rot) + shift


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
