"""One-dimensional energy regression on y = x sin(x).

The energy is E(theta, y; x) = f(theta, y; x)**2 with f a small tanh MLP.
Three trainers share the network: LEO with a scalar Gauss-Newton inner
solver, and two unrolled baselines (fixed-horizon GD or GN) whose parameter
gradient comes from central finite differences of the tracking loss.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError
from .learning import TrainLog
from .optim import Adam

log = logging.getLogger(__name__)

GN_DAMPING = 1e-9
GN_TOL = 1e-8
GN_MAX_ITERS = 100


class InnerSolver(str, enum.Enum):
    GN = "gn"
    GD = "gd"


class InitScheme(str, enum.Enum):
    ZERO = "zero"
    GROUND_TRUTH = "gt"


@dataclass
class MlpWeights:
    """(x, y) -> H tanh -> H tanh -> scalar. Arrays may carry leading batch axes."""

    W1: np.ndarray  # (..., H, 2)
    b1: np.ndarray  # (..., H)
    W2: np.ndarray  # (..., H, H)
    b2: np.ndarray  # (..., H)
    w3: np.ndarray  # (..., H)
    b3: np.ndarray  # (...)

    @property
    def H(self) -> int:
        return self.b1.shape[-1]

    @staticmethod
    def size_for(H: int) -> int:
        return 2 * H + H + H * H + H + H + 1

    @property
    def size(self) -> int:
        return self.size_for(self.H)

    def flatten(self) -> np.ndarray:
        lead = self.b3.shape
        parts = [self.W1, self.b1, self.W2, self.b2, self.w3, self.b3[..., None]]
        return np.concatenate([p.reshape(lead + (-1,)) for p in parts], axis=-1)

    @classmethod
    def unflatten(cls, vec, H: int) -> "MlpWeights":
        vec = np.asarray(vec, dtype=float)
        if vec.shape[-1] != cls.size_for(H):
            raise ValueError(f"expected {cls.size_for(H)} weights for H={H}, got {vec.shape[-1]}")
        lead = vec.shape[:-1]
        shapes = [(H, 2), (H,), (H, H), (H,), (H,), ()]
        out, i = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(vec[..., i:i + n].reshape(lead + s))
            i += n
        return cls(*out)

    @classmethod
    def init(cls, H: int = 32, seed: int = 0, x_scale: float = 0.5, y_scale: float = 0.03) -> "MlpWeights":
        """Random weights. A small ``y_scale`` keeps f nearly linear in y over
        the data range, so every x-slice starts with a single root."""
        rng = np.random.default_rng(seed)
        return cls(
            W1=rng.standard_normal((H, 2)) * np.array([x_scale, y_scale]),
            b1=0.1 * rng.standard_normal(H),
            W2=rng.standard_normal((H, H)) / np.sqrt(H),
            b2=0.1 * rng.standard_normal(H),
            w3=rng.standard_normal(H) / np.sqrt(H),
            b3=np.array(0.0),
        )

    @classmethod
    def zeros(cls, H: int) -> "MlpWeights":
        return cls.unflatten(np.zeros(cls.size_for(H)), H)

    def to_dict(self) -> dict:
        return {"H": self.H, "weights": self.flatten().tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpWeights":
        return cls.unflatten(np.array(d["weights"], dtype=float), int(d["H"]))


def _layers(w: MlpWeights, x, y):
    u = np.stack(np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float)), axis=-1)
    h1 = np.tanh(u @ np.swapaxes(w.W1, -1, -2) + w.b1[..., None, :])
    h2 = np.tanh(h1 @ np.swapaxes(w.W2, -1, -2) + w.b2[..., None, :])
    f = (h2 @ w.w3[..., :, None])[..., 0] + w.b3[..., None]
    dz2 = w.w3[..., None, :] * (1.0 - h2 * h2)
    dz1 = (dz2 @ w.W2) * (1.0 - h1 * h1)
    dfdy = (dz1 @ w.W1[..., :, 1:])[..., 0]
    return u, h1, h2, f, dz1, dz2, dfdy


def toy_f(w: MlpWeights, x, y):
    """Residual f and its y-derivative; broadcasts over batched weights."""
    _, _, _, f, _, _, dfdy = _layers(w, np.atleast_1d(x), np.atleast_1d(y))
    return f, dfdy


def toy_forward(w: MlpWeights, x, y):
    """Forward pass plus exact derivatives for unbatched weights.

    Returns ``f (N,)``, ``df/dy (N,)`` and ``df/dtheta (N, P)`` with columns in
    ``MlpWeights.flatten`` order.
    """
    x, y = np.atleast_1d(np.asarray(x, float)), np.atleast_1d(np.asarray(y, float))
    u, h1, h2, f, dz1, dz2, dfdy = _layers(w, x, y)
    n = f.shape[-1]
    grads = [
        (dz1[:, :, None] * u[:, None, :]).reshape(n, -1),
        dz1,
        (dz2[:, :, None] * h1[:, None, :]).reshape(n, -1),
        dz2,
        h2,
        np.ones((n, 1)),
    ]
    return f, dfdy, np.concatenate(grads, axis=1)


def energy(w: MlpWeights, x, y) -> np.ndarray:
    f, _ = toy_f(w, x, y)
    return f * f


# -- inner optimizers ---------------------------------------------------------

@dataclass
class ToyConfig:
    H: int = 32
    num_points: int = 50
    inner: InnerSolver = InnerSolver.GN
    gd_step: float = 0.1
    K: int = 10  # unrolled horizon
    init_scheme: InitScheme = InitScheme.ZERO
    S: int = 10
    T: float = 0.1
    lr: float = 1e-3
    epochs: int = 4000
    seed: int = 0
    fd_h: float = 1e-5
    grid_nx: int = 64
    grid_ny: int = 551
    y_range: tuple = (-7.0, 4.0)

    def __post_init__(self):
        self.inner = InnerSolver(self.inner)
        self.init_scheme = InitScheme(self.init_scheme)
        self.y_range = tuple(float(v) for v in self.y_range)
        for name in ("H", "num_points", "S", "grid_nx", "grid_ny"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.K < 0 or self.epochs < 0:
            raise ValueError("K and epochs must be non-negative")
        if not np.all(np.isfinite(self.y_range)) or self.y_range[0] >= self.y_range[1]:
            raise ValueError("y_range must be a finite increasing pair")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["inner"] = self.inner.value
        d["init_scheme"] = self.init_scheme.value
        d["y_range"] = list(self.y_range)
        return d


def _gn_step(f, J):
    return -J * f / (J * J + GN_DAMPING)


def gn_solve(w: MlpWeights, x, y_init, tol: float = GN_TOL, max_iters: int = GN_MAX_ITERS):
    """Batched scalar Gauss-Newton. Returns ``(y, ok)``; ``ok`` flags finite results."""
    y = np.array(np.broadcast_to(y_init, np.shape(x)), dtype=float)
    x = np.asarray(x, dtype=float)
    active = np.ones(y.shape, dtype=bool)
    for _ in range(max_iters):
        if not active.any():
            break
        f, J = toy_f(w, x[active], y[active])
        step = _gn_step(f, J)
        y[active] += step
        done = ~np.isfinite(step) | (np.abs(step) < tol)
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    return y, np.isfinite(y)


def unrolled(w: MlpWeights, x, y_init, inner: InnerSolver, K: int, gd_step: float = 0.1):
    """Exactly ``K`` inner steps; broadcasts over batched weights."""
    y = np.broadcast_to(np.asarray(y_init, float), np.broadcast_shapes(np.shape(x), w.b3.shape + (1,)))
    y = np.array(y)
    for _ in range(K):
        f, J = toy_f(w, x, y)
        y = y + (_gn_step(f, J) if inner == InnerSolver.GN else -gd_step * 2.0 * f * J)
    return y


def inner_solve(w: MlpWeights, x, y_init, cfg: ToyConfig = ToyConfig()):
    """Mode estimate from ``y_init``: converged GN, or ``cfg.K`` GD steps."""
    if cfg.inner == InnerSolver.GN:
        y, ok = gn_solve(w, x, y_init)
    else:
        y = unrolled(w, x, y_init, InnerSolver.GD, cfg.K, cfg.gd_step)
        ok = np.isfinite(y)
    if not np.all(ok):
        raise DivergenceError("inner solve produced a non-finite iterate", best=y, energy=np.nan)
    return y


# -- data ---------------------------------------------------------------------

def ground_truth(x):
    x = np.asarray(x, dtype=float)
    return x * np.sin(x)


def make_data(num_points: int = 50):
    x = np.linspace(0.0, 2.0 * np.pi, num_points)
    return x, ground_truth(x)


def write_data_csv(path, x, y) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "y_gt"])
        for a, b in zip(x, y):
            wr.writerow([repr(float(a)), repr(float(b))])


def _init_points(cfg: ToyConfig, y_gt):
    return np.zeros_like(y_gt) if cfg.init_scheme == InitScheme.ZERO else y_gt.copy()


# -- trainers -----------------------------------------------------------------

def laplace_var(J, temperature: float):
    """Variance of exp(-E/T) with the Gauss-Newton curvature 2 J**2."""
    return temperature / (2.0 * (J * J + GN_DAMPING))


def toy_leo_gradient(w: MlpWeights, x, y_gt, y_hat, cfg: ToyConfig, rng):
    """Contrastive gradient: ground-truth energy gradient minus the sample average."""
    n = x.size
    _, J = toy_f(w, x, y_hat)
    std = np.sqrt(laplace_var(J, cfg.T))
    ys = y_hat[:, None] + std[:, None] * rng.standard_normal((n, cfg.S))
    xs = np.concatenate([x, np.repeat(x, cfg.S)])
    yy = np.concatenate([y_gt, ys.ravel()])
    f, _, G = toy_forward(w, xs, yy)
    c = np.concatenate([np.full(n, 1.0 / n), np.full(n * cfg.S, -1.0 / (n * cfg.S))]) * 2.0 * f
    return c @ G, ys


def toy_leo_train(data, w_init: MlpWeights, cfg: ToyConfig = ToyConfig()) -> tuple[MlpWeights, TrainLog]:
    x, y_gt = (np.asarray(a, dtype=float) for a in data)
    H = w_init.H
    vec = w_init.flatten()
    opt = Adam(cfg.lr)
    tlog = TrainLog()
    y0 = _init_points(cfg, y_gt)
    for epoch in range(cfg.epochs + 1):
        t0 = time.perf_counter()
        w = MlpWeights.unflatten(vec, H)
        y_hat, ok = gn_solve(w, x, y0)
        tlog.fevals += x.size
        if not ok.any():
            from .errors import TrainingAbort

            raise TrainingAbort(f"every point diverged in epoch {epoch}", tlog)
        if not ok.all():
            log.warning("epoch %d: skipping %d diverged point(s)", epoch, int((~ok).sum()))
        loss = float(np.mean((y_hat[ok] - y_gt[ok]) ** 2))
        rec = dict(epoch=epoch, fevals=tlog.fevals, train_loss=loss,
                   objective=float(np.mean(energy(w, x[ok], y_gt[ok]))), skipped=int((~ok).sum()))
        if epoch < cfg.epochs:
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
            grad, _ = toy_leo_gradient(w, x[ok], y_gt[ok], y_hat[ok], cfg, rng)
            rec["grad_norm"] = float(np.linalg.norm(grad))
            vec = opt.step(vec, grad)
        rec["wall_s"] = time.perf_counter() - t0
        tlog.append(**rec)
    return MlpWeights.unflatten(vec, H), tlog


def unrolled_loss(vecs, H: int, x, y_gt, y0, cfg: ToyConfig):
    """Loss 1 for one or a stack of flattened weight vectors."""
    w = MlpWeights.unflatten(vecs, H)
    y = unrolled(w, x, y0, cfg.inner, cfg.K, cfg.gd_step)
    return np.mean((y - y_gt) ** 2, axis=-1)


def fd_gradient(vec, H: int, x, y_gt, y0, cfg: ToyConfig, h: float | None = None):
    """Central finite differences of the unrolled loss over every weight."""
    h = cfg.fd_h if h is None else h
    P = vec.size
    pert = np.concatenate([vec + h * np.eye(P), vec - h * np.eye(P)])
    L = unrolled_loss(pert, H, x, y_gt, y0, cfg)
    g = (L[:P] - L[P:]) / (2.0 * h)
    bad = ~np.isfinite(g)
    if bad.any():
        log.warning("zeroing %d non-finite finite-difference coordinate(s)", int(bad.sum()))
        g[bad] = 0.0
    return g


def toy_unrolled_train(data, w_init: MlpWeights, cfg: ToyConfig) -> tuple[MlpWeights, TrainLog]:
    """Adam on Loss 1 through a fixed ``cfg.K``-step unrolled inner solver."""
    x, y_gt = (np.asarray(a, dtype=float) for a in data)
    H = w_init.H
    vec = w_init.flatten()
    opt = Adam(cfg.lr)
    tlog = TrainLog()
    y0 = _init_points(cfg, y_gt)
    for epoch in range(cfg.epochs + 1):
        t0 = time.perf_counter()
        loss = float(unrolled_loss(vec, H, x, y_gt, y0, cfg))
        tlog.fevals += x.size
        if not np.isfinite(loss):
            raise DivergenceError(f"unrolled loss is not finite at epoch {epoch}", best=vec, energy=loss)
        rec = dict(epoch=epoch, fevals=tlog.fevals, train_loss=loss, objective=loss)
        if epoch < cfg.epochs:
            grad = fd_gradient(vec, H, x, y_gt, y0, cfg)
            rec["grad_norm"] = float(np.linalg.norm(grad))
            vec = opt.step(vec, grad)
        rec["wall_s"] = time.perf_counter() - t0
        tlog.append(**rec)
    return MlpWeights.unflatten(vec, H), tlog


# -- surfaces and diagnostics -------------------------------------------------

@dataclass
class Grid:
    nx: int = 64
    ny: int = 551
    y_range: tuple = (-7.0, 4.0)

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(0.0, 2.0 * np.pi, self.nx)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.y_range[0], self.y_range[1], self.ny)

    @classmethod
    def from_config(cls, cfg: ToyConfig) -> "Grid":
        return cls(cfg.grid_nx, cfg.grid_ny, cfg.y_range)


def energy_surface(w: MlpWeights, grid: Grid) -> np.ndarray:
    """Energy on the grid, shape ``(nx, ny)``."""
    X, Y = np.meshgrid(grid.xs, grid.ys, indexing="ij")
    return energy(w, X.ravel(), Y.ravel()).reshape(grid.nx, grid.ny)


def normalize_columns(E: np.ndarray) -> np.ndarray:
    """Min-max per x-slice; flat slices map to zero."""
    lo = E.min(axis=1, keepdims=True)
    span = E.max(axis=1, keepdims=True) - lo
    return np.where(span > 0, (E - lo) / np.where(span > 0, span, 1.0), 0.0)


def export_surface(w: MlpWeights, grid: Grid, path) -> np.ndarray:
    """Write ``x,y,E,E_normalized`` rows (x outer, y inner) and return E."""
    E = energy_surface(w, grid)
    En = normalize_columns(E)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "y", "E", "E_normalized"])
        for i, xv in enumerate(grid.xs):
            for j, yv in enumerate(grid.ys):
                wr.writerow([repr(float(xv)), repr(float(yv)), repr(float(E[i, j])), repr(float(En[i, j]))])
    return E


def grid_argmin(w: MlpWeights, grid: Grid) -> np.ndarray:
    """Per-x y value of the lowest energy on the grid."""
    E = energy_surface(w, grid)
    return grid.ys[np.argmin(E, axis=1)]


def basin_counts(w: MlpWeights, grid: Grid) -> np.ndarray:
    """Number of strict interior local minima of E along y for each x."""
    E = energy_surface(w, grid)
    mid = E[:, 1:-1]
    return np.sum((mid < E[:, :-2]) & (mid < E[:, 2:]), axis=1)


def argmin_hit_rate(values, xs, tol: float = 0.15) -> float:
    """Fraction of x values whose estimate is within ``tol`` of x sin x."""
    return float(np.mean(np.abs(np.asarray(values) - ground_truth(xs)) <= tol))


def summarize(w: MlpWeights, grid: Grid, tol: float = 0.15) -> dict:
    """Grid-argmin accuracy, basin counts, and GN solves from both init schemes."""
    xs = grid.xs
    y_zero, _ = gn_solve(w, xs, np.zeros_like(xs))
    y_gt, _ = gn_solve(w, xs, ground_truth(xs))
    basins = basin_counts(w, grid)
    return {
        "argmin_hit_rate": argmin_hit_rate(grid_argmin(w, grid), xs, tol),
        "gn_zero_hit_rate": argmin_hit_rate(y_zero, xs, tol),
        "gn_gt_hit_rate": argmin_hit_rate(y_gt, xs, tol),
        "median_basins": float(np.median(basins)),
        "basin_counts": basins.tolist(),
    }
