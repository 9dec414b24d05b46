import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leo import manifold
from leo.errors import ConfigurationError
from leo.models import (
    CovBlock,
    CovMode,
    ThetaGrad,
    ThetaParams,
    energy_grad_theta,
    factor_log_stds,
    mean_energy_grad_theta,
    theta_axpy,
)

from conftest import chain_graph


def fd_theta_grad(graph, theta, x, h=1e-6):
    v = theta.vector()
    out = np.zeros_like(v)
    for k in range(v.size):
        e = np.zeros_like(v)
        e[k] = h
        out[k] = (graph.energy(theta.with_vector(v + e), x) - graph.energy(theta.with_vector(v - e), x)) / (2 * h)
    return out


class TestCovBlock:
    def test_fixed_has_one_row(self):
        with pytest.raises(ValueError):
            CovBlock(CovMode.FIXED, np.zeros((2, 3)))

    def test_shape_and_finite(self):
        with pytest.raises(ValueError):
            CovBlock(CovMode.CONDITIONED, np.zeros((2, 2)))
        with pytest.raises(ValueError):
            CovBlock(CovMode.FIXED, [0.0, np.inf, 0.0])

    def test_covariance_is_exp_two_s(self):
        b = CovBlock(CovMode.CONDITIONED, [[0.0, 1.0, -1.0], [np.log(0.2)] * 3])
        np.testing.assert_allclose(b.covariance(0), np.diag(np.exp([0.0, 2.0, -2.0])))
        np.testing.assert_allclose(b.covariance(1), 0.04 * np.eye(3))

    def test_readonly(self):
        b = CovBlock(CovMode.FIXED, np.zeros(3))
        with pytest.raises(ValueError):
            b.log_std[0, 0] = 1.0


class TestThetaParams:
    def test_vector_roundtrip(self, rng):
        th = ThetaParams({"gps": CovBlock("fixed", rng.standard_normal(3)),
                          "odom": CovBlock("conditioned", rng.standard_normal((3, 3)))})
        assert th.size == 12
        assert th.with_vector(th.vector()) == th
        assert th.with_vector(th.vector() + 1) != th
        assert th.coordinate_names()[0] == "gps[0].x"
        assert th.coordinate_names()[-1] == "odom[2].theta"

    def test_with_vector_wrong_length(self):
        with pytest.raises(ValueError):
            ThetaParams.fixed(a=np.zeros(3)).with_vector(np.zeros(4))

    def test_unknown_block(self):
        with pytest.raises(ConfigurationError):
            ThetaParams.fixed(a=np.zeros(3)).block("b")

    def test_save_load(self, tmp_path, rng):
        th = ThetaParams.conditioned(odom=rng.standard_normal((2, 3)), gps=rng.standard_normal((2, 3)))
        th.save(tmp_path / "t.json")
        back = ThetaParams.load(tmp_path / "t.json")
        np.testing.assert_array_equal(back.vector(), th.vector())
        assert back.block("odom").mode == CovMode.CONDITIONED

    def test_malformed_checkpoint(self):
        with pytest.raises(ValueError):
            ThetaParams.from_dict({"blocks": {"a": {"log_std": [0, 0, 0]}}})

    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_json_is_exact(self, vals):
        th = ThetaParams.fixed(a=np.array(vals))
        back = ThetaParams.from_dict(json.loads(json.dumps(th.to_dict())))
        np.testing.assert_array_equal(back.vector(), th.vector())


class TestEnergyGradTheta:
    def test_matches_fd_100_cases(self):
        """Exact dE/ds against central differences of the energy."""
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            labels = rng.integers(0, 2, size=5)
            graph, gt = chain_graph(rng, T=5, labels=labels)
            if seed % 2:
                theta = ThetaParams.conditioned(odom=rng.uniform(-2, 1, (2, 3)), gps=rng.uniform(-2, 1, (2, 3)))
            else:
                theta = ThetaParams.fixed(odom=rng.uniform(-2, 1, 3), gps=rng.uniform(-2, 1, 3))
            x = manifold.retract(gt, 0.3 * rng.standard_normal(gt.shape))
            g = energy_grad_theta(graph, theta, x).vector()
            fd = fd_theta_grad(graph, theta, x)
            worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1.0))
        assert worst <= 1e-6

    def test_closed_form_single_factor(self):
        """One gps factor: dE/ds = -r^2 exp(-2s)."""
        from leo.graph import FactorGraph, gps_factor

        graph = FactorGraph(1, [gps_factor(0, [0.3, -0.2, 0.1])])
        s = np.array([0.1, -0.4, 0.7])
        theta = ThetaParams.fixed(gps=s)
        x = np.zeros((1, 3))
        r = graph.residuals(x)[0]
        np.testing.assert_allclose(energy_grad_theta(graph, theta, x).vector(), -r * r * np.exp(-2 * s))

    def test_mean_over_samples(self, rng, unit_theta):
        graph, gt = chain_graph(rng, T=4)
        xs = gt[None] + 0.1 * rng.standard_normal((5,) + gt.shape)
        avg = np.mean([energy_grad_theta(graph, unit_theta, x).vector() for x in xs], axis=0)
        np.testing.assert_allclose(mean_energy_grad_theta(graph, unit_theta, xs).vector(), avg)

    def test_zero_residual_zero_gradient(self, rng):
        from leo.graph import FactorGraph, gps_factor, odom_factor
        from conftest import random_poses

        x = random_poses(rng, 3)
        graph = FactorGraph(3, [gps_factor(0, x[0]), odom_factor(0, 1, manifold.between(x[0], x[1])),
                                odom_factor(1, 2, manifold.between(x[1], x[2]))])
        theta = ThetaParams.fixed(odom=rng.normal(size=3), gps=rng.normal(size=3))
        np.testing.assert_allclose(energy_grad_theta(graph, theta, x).vector(), 0.0, atol=1e-20)

    def test_unit_residual_example(self):
        from leo.graph import FactorGraph, gps_factor

        graph = FactorGraph(1, [gps_factor(0, np.zeros(3))])
        x = manifold.retract(np.zeros(3), np.array([1.0, 0.0, 0.0]))[None]
        np.testing.assert_allclose(np.abs(graph.residuals(x)[0]), [1.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(energy_grad_theta(graph, ThetaParams.fixed(gps=np.zeros(3)), x).vector(),
                                   [-1.0, 0.0, 0.0], atol=1e-12)

    def test_unused_block_gets_zero(self, rng):
        graph, gt = chain_graph(rng, T=3)
        theta = ThetaParams.fixed(odom=np.zeros(3), gps=np.zeros(3), extra=np.zeros(3))
        g = energy_grad_theta(graph, theta, gt)
        np.testing.assert_array_equal(g.blocks["extra"], 0.0)


class TestHelpers:
    def test_factor_log_stds(self):
        theta = ThetaParams({"a": CovBlock("conditioned", [[1, 1, 1], [2, 2, 2]]), "b": CovBlock("fixed", [3, 3, 3])})
        out = factor_log_stds(theta, ["a", "b", "a"], [1, 5, 0])
        np.testing.assert_array_equal(out[:, 0], [2, 3, 1])
        with pytest.raises(ConfigurationError):
            factor_log_stds(theta, ["a"], [2])

    def test_grad_arithmetic(self):
        theta = ThetaParams.fixed(a=np.ones(3))
        g = ThetaGrad({"a": np.array([[1.0, 2.0, 3.0]])})
        np.testing.assert_allclose((g + g - g.scale(0.5)).vector(), [1.5, 3.0, 4.5])
        np.testing.assert_allclose(theta_axpy(theta, g, 0.1).vector(), [0.9, 0.8, 0.7])
        assert ThetaGrad.zeros_like(theta).vector().tolist() == [0.0, 0.0, 0.0]
        with pytest.raises(ValueError):
            g + ThetaGrad({"b": np.zeros((1, 3))})

    def test_axpy_examples(self, rng):
        theta = ThetaParams(
            {"a": CovBlock("conditioned", rng.normal(size=(2, 3))), "b": CovBlock("fixed", rng.normal(size=3))})
        g = ThetaGrad({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(1, 3))})
        assert theta_axpy(theta, g, 0.0) == theta
        assert theta_axpy(theta, ThetaGrad.zeros_like(theta), 0.7) == theta
        half = theta_axpy(theta_axpy(theta, g, 0.35), g, 0.35)
        np.testing.assert_allclose(half.vector(), theta_axpy(theta, g, 0.7).vector(), rtol=1e-14, atol=1e-15)
        with pytest.raises(ValueError):
            theta_axpy(theta, ThetaGrad({"a": np.zeros((2, 3))}), 0.1)
