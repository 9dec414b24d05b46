import csv

import numpy as np
import pytest
import scipy.optimize

from leo import toy1d
from leo.errors import DivergenceError, TrainingAbort
from leo.toy1d import Grid, InnerSolver, MlpWeights, ToyConfig


def fd_params(fun, vec, h=1e-6):
    out = []
    for k in range(vec.size):
        e = np.zeros_like(vec)
        e[k] = h
        out.append((fun(vec + e) - fun(vec - e)) / (2 * h))
    return np.stack(out, axis=-1)


def step_net(c, H=1):
    """f(y) = tanh(tanh(y - c)): a single root at y = c and no other minima of f^2."""
    w = MlpWeights.zeros(H)
    w.W1[0] = [0.0, 1.0]
    w.b1[0] = -c
    w.W2[0, 0] = 1.0
    w.w3[0] = 1.0
    return w


class TestWeights:
    def test_flatten_roundtrip(self):
        w = MlpWeights.init(8, seed=1)
        v = w.flatten()
        assert v.size == MlpWeights.size_for(8) == w.size
        np.testing.assert_array_equal(MlpWeights.unflatten(v, 8).flatten(), v)
        np.testing.assert_array_equal(MlpWeights.from_dict(w.to_dict()).flatten(), v)
        with pytest.raises(ValueError):
            MlpWeights.unflatten(v[:-1], 8)

    def test_default_size(self):
        assert MlpWeights.size_for(32) == 1185

    def test_batched_weights_match_loop(self):
        vecs = np.stack([MlpWeights.init(6, seed=s).flatten() for s in range(4)])
        wb = MlpWeights.unflatten(vecs, 6)
        x, y = np.linspace(0, 6, 7), np.linspace(-3, 3, 7)
        f, J = toy1d.toy_f(wb, x, y)
        for s in range(4):
            fs, Js = toy1d.toy_f(MlpWeights.unflatten(vecs[s], 6), x, y)
            np.testing.assert_allclose(f[s], fs, rtol=1e-13)
            np.testing.assert_allclose(J[s], Js, rtol=1e-13)


class TestBackprop:
    def test_param_gradient_matches_fd_100_cases(self):
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            H = int(rng.integers(2, 9))
            w = MlpWeights.init(H, seed=seed, x_scale=1.0, y_scale=0.5)
            x, y = rng.uniform(0, 2 * np.pi, 3), rng.uniform(-7, 4, 3)
            _, _, G = toy1d.toy_forward(w, x, y)
            fd = fd_params(lambda v: toy1d.toy_f(MlpWeights.unflatten(v, H), x, y)[0], w.flatten())
            worst = max(worst, np.linalg.norm(G - fd) / max(np.linalg.norm(fd), 1.0))
        assert worst <= 1e-5

    def test_dfdy_matches_fd(self):
        rng = np.random.default_rng(0)
        w = MlpWeights.init(16, seed=3, y_scale=0.5)
        x, y = rng.uniform(0, 6, 50), rng.uniform(-7, 4, 50)
        h = 1e-6
        fd = (toy1d.toy_f(w, x, y + h)[0] - toy1d.toy_f(w, x, y - h)[0]) / (2 * h)
        np.testing.assert_allclose(toy1d.toy_f(w, x, y)[1], fd, rtol=1e-6, atol=1e-9)

    def test_energy_is_f_squared(self):
        w = MlpWeights.init(4)
        f, _ = toy1d.toy_f(w, 1.0, 0.5)
        np.testing.assert_allclose(toy1d.energy(w, 1.0, 0.5), f * f)


class TestInnerSolvers:
    def test_gn_finds_root_like_brentq(self):
        w = MlpWeights.init(8, seed=2, y_scale=0.3)
        x = np.linspace(0.1, 6, 10)
        y, ok = toy1d.gn_solve(w, x, np.zeros_like(x))
        assert ok.all()
        f, _ = toy1d.toy_f(w, x, y)
        for xi, yi, fi in zip(x, y, f):
            if abs(fi) < 1e-8:
                g = lambda t: float(toy1d.toy_f(w, xi, t)[0][0])
                ref = scipy.optimize.brentq(g, yi - 1e-3, yi + 1e-3, xtol=1e-14)
                assert yi == pytest.approx(ref, abs=1e-7)

    def test_gn_on_step_net(self):
        y, ok = toy1d.gn_solve(step_net(0.7), np.zeros(3), np.array([0.0, 0.5, 1.2]))
        np.testing.assert_allclose(y, 0.7, atol=1e-9)

    def test_unrolled_zero_steps_and_one_gd_step(self):
        w = MlpWeights.init(4, seed=1, y_scale=0.5)
        x, y0 = np.array([0.3, 1.0]), np.array([0.1, -0.2])
        np.testing.assert_array_equal(toy1d.unrolled(w, x, y0, InnerSolver.GD, 0), y0)
        f, J = toy1d.toy_f(w, x, y0)
        np.testing.assert_allclose(toy1d.unrolled(w, x, y0, InnerSolver.GD, 1, 0.1), y0 - 0.1 * 2 * f * J)
        np.testing.assert_allclose(toy1d.unrolled(w, x, y0, InnerSolver.GN, 1), y0 - J * f / (J * J + 1e-9))

    def test_inner_solve_divergence(self):
        w = MlpWeights.init(4)
        w.b3[...] = np.nan
        with pytest.raises(DivergenceError):
            toy1d.inner_solve(w, np.zeros(2), np.zeros(2))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ToyConfig(inner="newton")
        with pytest.raises(ValueError):
            ToyConfig(y_range=(1.0, -1.0))
        with pytest.raises(ValueError):
            ToyConfig(S=0)
        assert ToyConfig(init_scheme="gt").to_dict()["init_scheme"] == "gt"


class TestLeoGradient:
    def test_laplace_var(self):
        np.testing.assert_allclose(toy1d.laplace_var(np.array([2.0]), 0.5), 0.5 / (2 * (4 + 1e-9)))

    def test_matches_fd_with_samples_fixed(self):
        cfg = ToyConfig(H=6, S=4, T=0.3)
        w = MlpWeights.init(6, seed=5, y_scale=0.5)
        x, y_gt = toy1d.make_data(7)
        y_hat = y_gt + 0.2
        grad, ys = toy1d.toy_leo_gradient(w, x, y_gt, y_hat, cfg, np.random.default_rng(1))
        xs = np.repeat(x, cfg.S)

        def objective(v):
            wv = MlpWeights.unflatten(v, 6)
            return toy1d.energy(wv, x, y_gt).mean() - toy1d.energy(wv, xs, ys.ravel()).mean()

        np.testing.assert_allclose(grad, fd_params(objective, w.flatten()), rtol=1e-5, atol=1e-9)

    def test_sample_spread(self):
        cfg = ToyConfig(H=4, S=20000, T=2.0)
        w = step_net(0.0, H=4)
        x = np.zeros(1)
        _, ys = toy1d.toy_leo_gradient(w, x, np.zeros(1), np.zeros(1), cfg, np.random.default_rng(0))
        J = toy1d.toy_f(w, x, np.zeros(1))[1][0]
        var = 2.0 / (2 * J * J)
        n = ys.size
        assert ys.var() == pytest.approx(var, rel=4 * np.sqrt(2 / n))


class TestTraining:
    def test_leo_train_deterministic(self):
        data = toy1d.make_data(10)
        cfg = ToyConfig(H=8, epochs=5)
        w0 = MlpWeights.init(8)
        a, la = toy1d.toy_leo_train(data, w0, cfg)
        b, lb = toy1d.toy_leo_train(data, w0, cfg)
        np.testing.assert_array_equal(a.flatten(), b.flatten())
        assert len(la.records) == 6 and la.fevals == 60
        assert "grad_norm" not in la.records[-1]

    def test_leo_train_aborts_when_all_diverge(self):
        w0 = MlpWeights.init(4)
        w0.b3[...] = np.nan
        with pytest.raises(TrainingAbort):
            toy1d.toy_leo_train(toy1d.make_data(5), w0, ToyConfig(H=4, epochs=2))

    def test_unrolled_diverges_on_nan(self):
        w0 = MlpWeights.init(4)
        w0.b3[...] = np.nan
        with pytest.raises(DivergenceError):
            toy1d.toy_unrolled_train(toy1d.make_data(5), w0, ToyConfig(H=4, epochs=1))

    def test_fd_gradient_richardson(self):
        """Doubling the perturbation from 1e-5 to 2e-5 moves the gradient by < 1%."""
        cfg = ToyConfig(H=8, inner="gd", K=10)
        w = MlpWeights.init(8, seed=0)
        x, y_gt = toy1d.make_data(20)
        y0 = np.zeros_like(x)
        g1 = toy1d.fd_gradient(w.flatten(), 8, x, y_gt, y0, cfg, 1e-5)
        g2 = toy1d.fd_gradient(w.flatten(), 8, x, y_gt, y0, cfg, 2e-5)
        assert np.linalg.norm(g1 - g2) < 0.01 * np.linalg.norm(g1)

    def test_fd_gradient_directional(self):
        cfg = ToyConfig(H=6, inner="gn", K=5)
        w = MlpWeights.init(6, seed=1)
        x, y_gt = toy1d.make_data(10)
        y0 = y_gt.copy()
        v = w.flatten()
        d = np.random.default_rng(0).standard_normal(v.size)
        h = 1e-6
        L = lambda t: float(toy1d.unrolled_loss(v + t * d, 6, x, y_gt, y0, cfg))
        ref = (L(h) - L(-h)) / (2 * h)
        assert toy1d.fd_gradient(v, 6, x, y_gt, y0, cfg) @ d == pytest.approx(ref, rel=1e-4)

    def test_unrolled_train_reduces_loss(self):
        data = toy1d.make_data(10)
        _, tlog = toy1d.toy_unrolled_train(data, MlpWeights.init(6), ToyConfig(H=6, inner="gd", epochs=20, lr=1e-2))
        loss = tlog.column("train_loss")
        assert loss[-1] < loss[0]


class TestSurface:
    def test_step_net_argmin_and_basins(self):
        grid = Grid(nx=5, ny=111, y_range=(-5.0, 6.0))
        w = step_net(1.3)
        np.testing.assert_allclose(toy1d.grid_argmin(w, grid), 1.3, atol=1e-12)
        np.testing.assert_array_equal(toy1d.basin_counts(w, grid), 1)

    def test_flat_surface(self):
        grid = Grid(nx=3, ny=9)
        w = MlpWeights.zeros(2)
        np.testing.assert_array_equal(toy1d.normalize_columns(toy1d.energy_surface(w, grid)), 0.0)
        np.testing.assert_array_equal(toy1d.basin_counts(w, grid), 0)

    def test_normalize_columns(self):
        E = np.array([[1.0, 3.0, 2.0], [5.0, 5.0, 5.0]])
        np.testing.assert_allclose(toy1d.normalize_columns(E), [[0.0, 1.0, 0.5], [0.0, 0.0, 0.0]])

    def test_export_layout(self, tmp_path):
        grid = Grid(nx=4, ny=6)
        w = MlpWeights.init(4)
        E = toy1d.export_surface(w, grid, tmp_path / "s.csv")
        rows = list(csv.reader(open(tmp_path / "s.csv")))
        assert rows[0] == ["x", "y", "E", "E_normalized"] and len(rows) == 1 + 24
        assert float(rows[1][0]) == float(rows[6][0]) != float(rows[7][0])
        assert float(rows[2][2]) == E[0, 1]

    def test_hit_rate_and_summary(self):
        xs = np.linspace(0, 2 * np.pi, 4)
        vals = toy1d.ground_truth(xs) + np.array([0.0, 0.1, 0.2, -0.14])
        assert toy1d.argmin_hit_rate(vals, xs) == 0.75
        s = toy1d.summarize(step_net(0.0), Grid(nx=8, ny=21))
        assert set(s) == {"argmin_hit_rate", "gn_zero_hit_rate", "gn_gt_hit_rate", "median_basins", "basin_counts"}
        assert s["median_basins"] == 1.0

    def test_data(self, tmp_path):
        x, y = toy1d.make_data(50)
        assert x[0] == 0.0 and x[-1] == pytest.approx(2 * np.pi)
        np.testing.assert_allclose(y, x * np.sin(x))
        toy1d.write_data_csv(tmp_path / "d.csv", x, y)
        rows = list(csv.reader(open(tmp_path / "d.csv")))
        assert rows[0] == ["x", "y_gt"] and float(rows[3][1]) == y[2]


class TestWorkedExamples:
    def test_zero_weights(self):
        w = MlpWeights.zeros(5)
        x, y = np.linspace(0, 6, 7), np.linspace(-3, 3, 7)
        f, dfdy, J = toy1d.toy_forward(w, x, y)
        np.testing.assert_array_equal(f, 0.0)
        np.testing.assert_array_equal(dfdy, 0.0)
        # only the output bias reaches f; the energy gradient 2 f J vanishes entirely
        np.testing.assert_array_equal(J[:, :-1], 0.0)
        np.testing.assert_array_equal(J[:, -1], 1.0)
        np.testing.assert_array_equal(2 * f[:, None] * J, 0.0)

    def test_last_layer_scaling(self):
        w = MlpWeights.init(6, seed=3, y_scale=0.5)
        x, y = np.linspace(0, 6, 9), np.linspace(-4, 2, 9)
        c = -2.5
        ws = MlpWeights.unflatten(w.flatten(), 6)
        ws.w3[...] *= c
        ws.b3[...] *= c
        f, dfdy, J = toy1d.toy_forward(w, x, y)
        fs, dfdys, Js = toy1d.toy_forward(ws, x, y)
        np.testing.assert_allclose(fs, c * f, rtol=1e-12)
        np.testing.assert_allclose(dfdys, c * dfdy, rtol=1e-12)
        head = J.shape[1] - 6 - 1
        np.testing.assert_allclose(Js[:, :head], c * J[:, :head], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(Js[:, head:], J[:, head:], rtol=1e-12)

    def test_near_linear_residual_one_gn_step(self):
        d, c = 1e-4, 0.8
        w = MlpWeights.zeros(1)
        w.W1[0] = [0.0, d]
        w.W2[0, 0] = d
        w.w3[0] = 1.0 / d**2
        w.b3[...] = -c
        y0 = np.array([-1.0, 0.0, 2.0])
        # f = y - c + O(d^2 y^3)
        y1 = toy1d.unrolled(w, np.zeros(3), y0, InnerSolver.GN, 1)
        np.testing.assert_allclose(y1, c, atol=1e-6)

    def test_gn_fixed_point_is_stationary(self):
        w = MlpWeights.init(32, seed=4)
        x = np.linspace(0, 2 * np.pi, 30)
        y, ok = toy1d.gn_solve(w, x, np.zeros_like(x))
        f, J = toy1d.toy_f(w, x, y)
        # a fixed point is where the next GN step vanishes; iterations that hit
        # the cap while oscillating are not fixed points
        fixed = ok & (np.abs(toy1d._gn_step(f, J)) < toy1d.GN_TOL)
        assert fixed.sum() >= 15
        stationary = (np.abs(2 * f * J) < 1e-6) | (np.abs(f) < 1e-8)
        assert stationary[fixed].all()

    def test_zero_steps_from_ground_truth(self):
        cfg = ToyConfig(H=6, inner="gd", K=0)
        w = MlpWeights.init(6, seed=2)
        x, y_gt = toy1d.make_data(8)
        assert toy1d.unrolled_loss(w.flatten(), 6, x, y_gt, y_gt.copy(), cfg) == 0.0
        np.testing.assert_array_equal(toy1d.fd_gradient(w.flatten(), 6, x, y_gt, y_gt.copy(), cfg), 0.0)

    def test_surface_recomputation(self):
        w = MlpWeights.init(8, seed=6, y_scale=0.3)
        grid = Grid(nx=5, ny=7)
        E = toy1d.energy_surface(w, grid)
        for i, x in enumerate(grid.xs):
            for j, y in enumerate(grid.ys):
                f, _, _ = toy1d.toy_forward(w, x, y)
                assert E[i, j] == pytest.approx(f[0] ** 2, rel=1e-12, abs=1e-300)

    def test_leo_training_reduces_loss(self):
        _, tlog = toy1d.toy_leo_train(toy1d.make_data(50), MlpWeights.init(32), ToyConfig(epochs=100))
        for key in ("train_loss", "objective"):
            v = tlog.column(key)
            assert v[-1] < v[0]
