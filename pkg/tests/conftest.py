import sys

import numpy as np
import pytest

from leo.graph import FactorGraph, gps_factor, odom_factor
from leo.models import ThetaParams


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running test")
    config.addinivalue_line("markers", "acceptance: acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
        terminalreporter.write_line(line)


def random_poses(rng, n, spread=2.0):
    p = rng.uniform(-spread, spread, size=(n, 3))
    p[:, 2] = rng.uniform(-np.pi + 1e-3, np.pi - 1e-3, size=n)
    return p


def chain_graph(rng, T=5, noise=0.1, labels=None):
    """Odometry chain with a gps unary on every pose, measurements perturbed
    around a random ground-truth trajectory."""
    gt = np.cumsum(rng.uniform(-0.5, 0.5, size=(T, 3)), axis=0)
    from leo import manifold

    factors = []
    for t in range(T):
        lab = 0 if labels is None else int(labels[t])
        z = manifold.retract(gt[t], noise * rng.standard_normal(3))
        factors.append(gps_factor(t, z, condition=lab))
        if t + 1 < T:
            z = manifold.retract(manifold.between(gt[t], gt[t + 1]), noise * rng.standard_normal(3))
            factors.append(odom_factor(t, t + 1, z, condition=lab))
    return FactorGraph(T, factors), gt


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def unit_theta():
    return ThetaParams.fixed(odom=np.zeros(3), gps=np.zeros(3))
