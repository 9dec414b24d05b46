"""LEO: contrastive learning of observation-model parameters.

For every training example the graph is solved with the current theta,
``S`` trajectories are drawn from the Laplace posterior at temperature ``T``,
and the parameter gradient is

    grad E(theta; x_gt) - mean_s grad E(theta; x_s)

No derivative ever passes through the solver: the gradient only needs the
posterior and energy gradients with respect to theta.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DivergenceError, GaugeError, LeoError, StaleLinearizationError, TrainingAbort
from .graph import (
    FactorGraph,
    GaussianPosterior,
    SolverConfig,
    sample_posterior,
    solve_gn,
    tracking_loss,
    tracking_rmse,
)
from .models import ThetaGrad, ThetaParams, energy_grad_theta, mean_energy_grad_theta
from .optim import make_optimizer

log = logging.getLogger(__name__)

TIMING_KEYS = ("wall_s", "wall_per_solve_s")


@dataclass
class Example:
    """A graph, its ground-truth trajectory, and a cold-start linearization point."""

    graph: FactorGraph
    gt: np.ndarray
    init: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.gt = self.graph.check_trajectory(self.gt)
        self.init = self.gt.copy() if self.init is None else self.graph.check_trajectory(self.init)


@dataclass
class LeoConfig:
    samples_S: int = 10
    temperature_T: float = 1.0
    lr_eta: float = 1e-2
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 100
    seed: int = 0
    convergence_window: int = 10
    convergence_tol: float = 1e-3
    temperature_decay: float = 1.0  # per-epoch multiplier; 1.0 keeps T constant
    eval_every: int = 0  # test-set evaluation period in epochs; 0 evaluates only the returned theta
    jobs: int = 1
    warm_start: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if isinstance(self.solver, dict):
            self.solver = SolverConfig(**self.solver)
        if self.samples_S < 1:
            raise ValueError("samples_S must be >= 1")
        if self.temperature_T < 0:
            raise ValueError("temperature_T must be >= 0")
        if self.lr_eta <= 0:
            raise ValueError("lr_eta must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    """Per-epoch (or per-feval) records; the final record is not special."""

    records: list = field(default_factory=list)
    fevals: int = 0

    def append(self, **rec):
        self.records.append(rec)

    def column(self, key: str) -> np.ndarray:
        return np.array([r.get(key, np.nan) for r in self.records], dtype=float)

    def to_jsonl(self, path, timing_path=None) -> None:
        """Write records, routing wall-clock fields to ``timing_path`` if given.

        Keeping timings in a separate file leaves the main log byte-identical
        across reruns with the same seed.
        """
        with open(path, "w") as fh:
            for r in self.records:
                core = {k: v for k, v in r.items() if timing_path is None or k not in TIMING_KEYS}
                fh.write(json.dumps(core) + "\n")
        if timing_path is not None:
            with open(timing_path, "w") as fh:
                for i, r in enumerate(self.records):
                    fh.write(json.dumps({"record": i, **{k: r[k] for k in TIMING_KEYS if k in r}}) + "\n")


def episode_seed(seed: int, epoch: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch, index])


def contrastive_gradient(graph: FactorGraph, theta: ThetaParams, gt, post: GaussianPosterior,
                         samples: int, temperature: float, rng_seed) -> ThetaGrad:
    """Ground-truth energy gradient minus the sample average under the posterior."""
    xs = sample_posterior(post, samples, temperature, rng_seed)
    return energy_grad_theta(graph, theta, gt) - mean_energy_grad_theta(graph, theta, xs)


def leo_gradient(example: Example, theta: ThetaParams, cfg: LeoConfig, rng_seed=None,
                 init=None) -> tuple[ThetaGrad, GaussianPosterior]:
    """Solve one example and return its contrastive gradient plus the posterior."""
    post = solve_gn(example.graph, theta, example.init if init is None else init, cfg.solver)
    seed = cfg.seed if rng_seed is None else rng_seed
    grad = contrastive_gradient(example.graph, theta, example.gt, post, cfg.samples_S, cfg.temperature_T, seed)
    return grad, post


def laplace_nll(post: GaussianPosterior, gt) -> float:
    """Negative log density of the ground truth under the Laplace posterior."""
    return -post.log_density(gt)


def _map(fn, items, jobs: int):
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def evaluate(examples: Sequence[Example], theta: ThetaParams, solver: SolverConfig = SolverConfig(),
             jobs: int = 1, inits: Sequence | None = None) -> dict:
    """Solve every example with ``theta`` and summarize tracking accuracy."""
    examples = list(examples)
    if not examples:
        raise ValueError("cannot evaluate an empty split")

    def one(i):
        ex = examples[i]
        t0 = time.perf_counter()
        try:
            post = solve_gn(ex.graph, theta, ex.init if inits is None else inits[i], solver)
        except ConfigurationError:
            raise
        except LeoError as exc:
            log.warning("evaluation of %s failed: %s", ex.name or i, exc)
            return None
        dt = time.perf_counter() - t0
        t, r = tracking_rmse(post.mean, ex.gt)
        return t, r, tracking_loss(post.mean, ex.gt), float(ex.graph.energy(theta, ex.gt)), dt, post.mean

    results = _map(one, range(len(examples)), jobs)
    ok = [r for r in results if r is not None]
    out = {"count": len(examples), "failures": len(examples) - len(ok)}
    if not ok:
        return out
    arr = np.array([r[:5] for r in ok])
    out.update(
        trans_rmse_mean=float(arr[:, 0].mean()),
        trans_rmse_std=float(arr[:, 0].std()),
        rot_rmse_mean=float(arr[:, 1].mean()),
        rot_rmse_std=float(arr[:, 1].std()),
        tracking_loss=float(arr[:, 2].mean()),
        energy_gt_mean=float(arr[:, 3].mean()),
        wall_per_solve_s=float(arr[:, 4].mean()),
        per_episode=[[float(a), float(b)] for a, b in arr[:, :2]],
    )
    out["_means"] = [None if r is None else r[5] for r in results]
    return out


def public_metrics(metrics: dict) -> dict:
    return {k: v for k, v in metrics.items() if not k.startswith("_")}


def _converged(values: np.ndarray, window: int, tol: float) -> bool:
    if window <= 0 or len(values) <= window:
        return False
    recent = values[-(window + 1):]
    rel = np.abs(np.diff(recent)) / np.maximum(np.abs(recent[:-1]), 1e-300)
    return bool(np.all(rel < tol))


def train(train_set: Sequence[Example], theta_init: ThetaParams, cfg: LeoConfig = LeoConfig(),
          test_set: Sequence[Example] | None = None) -> tuple[ThetaParams, TrainLog]:
    """Run LEO until ``max_epochs`` or the tracking-RMSE plateau criterion.

    Returns the theta with the lowest train tracking loss seen and the log.
    """
    train_set = list(train_set)
    if not train_set:
        raise ValueError("training set is empty")
    theta = theta_init
    opt = make_optimizer(cfg.optimizer, cfg.lr_eta, cfg.beta1, cfg.beta2, cfg.adam_eps)
    warm = [ex.init for ex in train_set]
    tlog = TrainLog()
    best = (np.inf, theta_init)
    temperature = cfg.temperature_T

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()

        def step(i, theta=theta, epoch=epoch, temperature=temperature):
            ex = train_set[i]
            try:
                post = solve_gn(ex.graph, theta, warm[i] if cfg.warm_start else ex.init, cfg.solver)
                grad = contrastive_gradient(ex.graph, theta, ex.gt, post, cfg.samples_S, temperature,
                                            episode_seed(cfg.seed, epoch, i))
            except StaleLinearizationError as exc:
                warm[i] = post.mean  # keep iterating from here next epoch
                return i, exc
            except (DivergenceError, GaugeError) as exc:
                return i, exc
            return i, (grad, post)

        results = _map(step, list(range(len(train_set))), cfg.jobs)
        tlog.fevals += len(train_set)
        failed = [(i, r) for i, r in results if isinstance(r, Exception)]
        unsolvable = [(i, r) for i, r in failed if not isinstance(r, StaleLinearizationError)]
        if epoch == 0 and unsolvable:
            names = ", ".join(f"{train_set[i].name or i} ({type(e).__name__})" for i, e in unsolvable)
            raise ValueError(f"episodes not solvable at theta_init: {names}")
        for i, exc in failed:
            log.warning("epoch %d: skipping episode %s: %s", epoch, train_set[i].name or i, exc)
        ok = [(i, r) for i, r in results if not isinstance(r, Exception)]
        if not ok:
            raise TrainingAbort(f"every episode diverged in epoch {epoch}", tlog)

        grads = [g for _, (g, _) in ok]
        pooled = grads[0]
        for g in grads[1:]:
            pooled = pooled + g
        pooled = pooled.scale(1.0 / len(grads))

        rmse = np.array([tracking_rmse(p.mean, train_set[i].gt) for i, (_, p) in ok])
        loss = float(np.mean([tracking_loss(p.mean, train_set[i].gt) for i, (_, p) in ok]))
        nll = float(np.mean([laplace_nll(p, train_set[i].gt) / train_set[i].graph.dim for i, (_, p) in ok]))
        for i, (_, p) in ok:
            warm[i] = p.mean
        rec = dict(
            epoch=epoch,
            fevals=tlog.fevals,
            objective=nll,
            train_loss=loss,
            train_trans_rmse=float(rmse[:, 0].mean()),
            train_rot_rmse=float(rmse[:, 1].mean()),
            temperature=temperature,
            skipped=len(failed),
            grad_norm=float(np.linalg.norm(pooled.vector())),
            theta=theta.vector().tolist(),
        )
        if test_set and cfg.eval_every and epoch % cfg.eval_every == 0:
            m = evaluate(test_set, theta, cfg.solver, cfg.jobs)
            rec.update(test_trans_rmse=m.get("trans_rmse_mean"), test_rot_rmse=m.get("rot_rmse_mean"))
        if loss < best[0]:
            best = (loss, theta)
        theta = theta.with_vector(opt.step(theta.vector(), pooled.vector()))
        temperature *= cfg.temperature_decay
        rec["wall_s"] = time.perf_counter() - t0
        tlog.append(**rec)
        log.info("epoch %d loss %.5g trans %.4g rot %.4g", epoch, loss, rec["train_trans_rmse"], rec["train_rot_rmse"])
        if _converged(tlog.column("train_trans_rmse"), cfg.convergence_window, cfg.convergence_tol):
            break

    return best[1], tlog
