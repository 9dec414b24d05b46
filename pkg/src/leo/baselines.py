"""Comparison methods: black-box search on the tracking loss, decoupled
residual-moment fitting, and the zero-temperature (perceptron) variant of LEO."""

from __future__ import annotations

import dataclasses
import logging
import time
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, LeoError
from .graph import SolverConfig, solve_gn, tracking_loss, tracking_rmse
from .learning import Example, LeoConfig, TrainLog, train
from .models import CovBlock, CovMode, ThetaParams

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12


# -- Nelder-Mead ------------------------------------------------------------

@dataclasses.dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    evals: int
    history: list  # (x, f) per evaluation, in call order


def initial_simplex(x0, step: float = 0.5) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    return np.vstack([x0] + [x0 + step * e for e in np.eye(x0.size)])


def nelder_mead(fun: Callable[[np.ndarray], float], simplex, budget: int,
                alpha: float = 1.0, gamma: float = 2.0, rho: float = 0.5, sigma: float = 0.5,
                xtol: float = 0.0, ftol: float = 0.0) -> SimplexResult:
    """Minimize ``fun`` with the standard simplex method using at most ``budget`` calls.

    Non-finite objective values are treated as +inf. The returned point is the
    best one ever evaluated, so the result never exceeds the initial best vertex.
    """
    sim = np.array(simplex, dtype=float)
    n = sim.shape[1]
    if sim.shape != (n + 1, n):
        raise ValueError(f"simplex must have shape (n+1, n), got {sim.shape}")
    if np.linalg.matrix_rank(sim[1:] - sim[0]) < n:
        raise ValueError("initial simplex is degenerate")
    if budget < n + 1:
        raise ValueError(f"budget {budget} is smaller than the {n + 1} initial vertices")

    history = []

    def f(x):
        v = float(fun(x))
        v = v if np.isfinite(v) else np.inf
        history.append((x.copy(), v))
        return v

    vals = np.array([f(x) for x in sim])
    while len(history) < budget:
        order = np.argsort(vals, kind="stable")
        sim, vals = sim[order], vals[order]
        if xtol > 0 and np.max(np.abs(sim[1:] - sim[0])) <= xtol and np.max(np.abs(vals[1:] - vals[0])) <= ftol:
            break
        c = sim[:-1].mean(axis=0)
        xr = c + alpha * (c - sim[-1])
        fr = f(xr)
        if vals[0] <= fr < vals[-2]:
            sim[-1], vals[-1] = xr, fr
            continue
        if fr < vals[0]:
            if len(history) >= budget:
                sim[-1], vals[-1] = xr, fr
                break
            xe = c + gamma * (xr - c)
            fe = f(xe)
            sim[-1], vals[-1] = (xe, fe) if fe < fr else (xr, fr)
            continue
        if len(history) >= budget:
            break
        if fr < vals[-1]:
            xc = c + rho * (xr - c)
            fc = f(xc)
            if fc <= fr:
                sim[-1], vals[-1] = xc, fc
                continue
        else:
            xc = c + rho * (sim[-1] - c)
            fc = f(xc)
            if fc < vals[-1]:
                sim[-1], vals[-1] = xc, fc
                continue
        for i in range(1, n + 1):
            if len(history) >= budget:
                break
            sim[i] = sim[0] + sigma * (sim[i] - sim[0])
            vals[i] = f(sim[i])

    best = min(range(len(history)), key=lambda i: history[i][1])
    return SimplexResult(history[best][0], history[best][1], len(history), history)


def dataset_loss(examples: Sequence[Example], theta: ThetaParams, solver: SolverConfig = SolverConfig()):
    """Loss 1 on a dataset: mean squared tracking error, +inf if any solve fails.

    Also returns the mean (trans, rot) RMSE for logging.
    """
    losses, rmse = [], []
    for ex in examples:
        try:
            post = solve_gn(ex.graph, theta, ex.init, solver)
        except LeoError:
            return np.inf, (np.nan, np.nan)
        losses.append(tracking_loss(post.mean, ex.gt))
        rmse.append(tracking_rmse(post.mean, ex.gt))
    return float(np.mean(losses)), tuple(np.mean(rmse, axis=0).tolist())


def blackbox_nelder_mead(examples: Sequence[Example], theta_init: ThetaParams, budget_fevals: int,
                         init_step: float = 0.5, solver: SolverConfig = SolverConfig()
                         ) -> tuple[ThetaParams, TrainLog]:
    """Nelder-Mead over the flattened log-std vector minimizing Loss 1.

    One objective evaluation solves every training example, so it costs
    ``len(examples)`` fevals; the simplex gets ``budget_fevals // len(examples)``
    evaluations.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("training set is empty")
    evals = budget_fevals // len(examples)
    tlog = TrainLog()
    best = [np.inf]

    def objective(vec):
        t0 = time.perf_counter()
        theta = theta_init.with_vector(vec)
        loss, (trans, rot) = dataset_loss(examples, theta, solver)
        tlog.fevals += len(examples)
        best[0] = min(best[0], loss)
        tlog.append(
            epoch=len(tlog.records),
            fevals=tlog.fevals,
            objective=loss,
            train_loss=loss,
            best_loss=best[0],
            train_trans_rmse=trans,
            train_rot_rmse=rot,
            theta=list(map(float, vec)),
            wall_s=time.perf_counter() - t0,
        )
        return loss

    res = nelder_mead(objective, initial_simplex(theta_init.vector(), init_step), evals)
    return theta_init.with_vector(res.x), tlog


# -- Loss-2 surrogate ---------------------------------------------------------

def surrogate_fit(examples: Sequence[Example], template: ThetaParams) -> ThetaParams:
    """Fit every covariance block to the raw residual second moments at ground truth.

    ``template`` supplies block names, modes, and label counts; its values are
    ignored. The graph optimizer is never run.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("dataset is empty")
    sums = {k: np.zeros_like(b.log_std) for k, b in template.blocks.items()}
    counts = {k: np.zeros(b.num_labels) for k, b in template.blocks.items()}
    for ex in examples:
        r2 = ex.graph.residuals(ex.gt) ** 2
        for name, block in template.blocks.items():
            mask = ex.graph.ref_mask(name)
            labels = ex.graph.conditions[mask] if block.mode == CovMode.CONDITIONED else np.zeros(mask.sum(), int)
            if labels.size and labels.max() >= block.num_labels:
                raise ConfigurationError(f"block {name!r} has no row for label {labels.max()}")
            np.add.at(sums[name], labels, r2[mask])
            np.add.at(counts[name], labels, 1)
    blocks = {}
    for name, block in template.blocks.items():
        missing = np.flatnonzero(counts[name] == 0)
        if missing.size:
            raise ValueError(f"no factors support block {name!r} label(s) {missing.tolist()}")
        var = np.maximum(sums[name] / counts[name][:, None], VARIANCE_FLOOR)
        blocks[name] = CovBlock(block.mode, 0.5 * np.log(var))
    return ThetaParams(blocks, template.mlp)


# -- perceptron ---------------------------------------------------------------

def perceptron_train(examples: Sequence[Example], theta_init: ThetaParams, cfg: LeoConfig = LeoConfig(),
                     test_set=None) -> tuple[ThetaParams, TrainLog]:
    """LEO with every sample collapsed onto the posterior mode (T = 0)."""
    return train(examples, theta_init, dataclasses.replace(cfg, temperature_T=0.0), test_set)
