import numpy as np
import pytest

from leo.optim import Adam, Sgd, make_optimizer


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        """With bias correction the first update is lr * g / (|g| + eps)."""
        opt = Adam(0.1)
        p = opt.step(np.zeros(3), np.array([2.0, -0.5, 1e-3]))
        np.testing.assert_allclose(p, -0.1 * np.array([1.0, -1.0, 1.0]), rtol=1e-4)

    def test_matches_torch(self):
        torch = pytest.importorskip("torch")
        rng = np.random.default_rng(0)
        p0 = rng.standard_normal(5)
        tp = torch.tensor(p0.copy(), requires_grad=True)
        topt = torch.optim.Adam([tp], lr=0.05, betas=(0.8, 0.99), eps=1e-6)
        opt, p = Adam(0.05, 0.8, 0.99, 1e-6), p0.copy()
        for _ in range(20):
            g = rng.standard_normal(5)
            topt.zero_grad()
            tp.grad = torch.tensor(g)
            topt.step()
            p = opt.step(p, g)
        np.testing.assert_allclose(p, tp.detach().numpy(), rtol=1e-10, atol=1e-12)

    def test_minimizes_quadratic(self):
        opt, p = Adam(0.05), np.array([3.0, -2.0])
        for _ in range(2000):
            p = opt.step(p, 2 * p)
        np.testing.assert_allclose(p, 0.0, atol=1e-2)


class TestFactory:
    def test_names(self):
        assert isinstance(make_optimizer("adam", 0.1), Adam)
        sgd = make_optimizer("sgd", 0.5)
        assert isinstance(sgd, Sgd)
        np.testing.assert_allclose(sgd.step(np.ones(2), np.ones(2)), [0.5, 0.5])
        with pytest.raises(ValueError):
            make_optimizer("rmsprop", 0.1)
