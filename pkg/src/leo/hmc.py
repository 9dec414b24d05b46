"""Hamiltonian Monte Carlo in the tangent chart of a trajectory.

The chain lives on delta in R^{3T} with potential U(delta) = E(base (+) delta)
and a unit mass matrix. It is the reference sampler against which the
Laplace sampler of ``graph`` is compared, both in distribution and in cost.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import manifold
from .errors import TuningError
from .graph import FactorGraph, GaussianPosterior, sample_posterior, solve_gn
from .models import ThetaParams

log = logging.getLogger(__name__)


@dataclass
class HmcResult:
    samples: np.ndarray  # (n, T, 3) poses
    tangent: np.ndarray  # (n, 3T) chart coordinates at the base
    accept_rate: float
    step_size: float
    burn_in: int
    energy_errors: np.ndarray  # |H_new - H_old| per post-burn-in proposal


class ChartPotential:
    """U(delta) = E(base (+) delta) and its exact gradient.

    The chart is only injective for headings inside (-pi, pi): at
    delta_theta = 2 pi k the exponential forgets the translation, which opens
    zero-energy tunnels. U is therefore +inf outside that domain, so such
    proposals are rejected.
    """

    def __init__(self, graph: FactorGraph, theta: ThetaParams, base):
        self.graph = graph
        self.theta = theta
        self.base = graph.check_trajectory(base)
        self.evals = 0

    def __call__(self, delta: np.ndarray) -> tuple[float, np.ndarray]:
        d = delta.reshape(-1, 3)
        self.evals += 1
        if np.any(np.abs(d[:, 2]) >= np.pi):
            return np.inf, np.zeros_like(delta)
        x = manifold.retract(self.base, d)
        E, g = self.graph.energy_gradient(self.theta, x)
        # base (+) (d + e) = x (+) Jr(d) e, so dU/dd = Jr(d)^T dE/dx
        grad = np.einsum("tji,tj->ti", manifold.right_jacobian(d), g)
        return E, grad.ravel()

    def energy(self, delta: np.ndarray) -> float:
        return float(self.graph.energy(self.theta, manifold.retract(self.base, delta.reshape(-1, 3))))


def leapfrog(potential, q, p, grad, eps: float, L: int):
    """``L`` leapfrog steps. Returns ``(q, p, U, grad)`` at the end point."""
    q = q.copy()
    p = p - 0.5 * eps * grad
    for i in range(L):
        q = q + eps * p
        U, grad = potential(q)
        if not np.isfinite(U):
            return q, p, np.inf, grad
        p = p - (eps if i < L - 1 else 0.5 * eps) * grad
    return q, p, U, grad


def _reasonable_eps(potential, q, U, grad, rng, eps: float = 0.1) -> float:
    """Halve or double ``eps`` until a single step's acceptance crosses 1/2."""
    p = rng.standard_normal(q.size)
    H0 = U + 0.5 * p @ p

    def log_ratio(e):
        _, p1, U1, _ = leapfrog(potential, q, p, grad, e, 1)
        return -(U1 + 0.5 * p1 @ p1) + H0 if np.isfinite(U1) else -np.inf

    a = 1.0 if log_ratio(eps) > math.log(0.5) else -1.0
    for _ in range(60):
        lr = log_ratio(eps)
        if not a * lr > -a * math.log(2.0):
            break
        eps *= 2.0 ** a
    return eps


def hmc_sample(graph: FactorGraph, theta: ThetaParams, init, n_samples: int, leapfrog_L: int = 10,
               step_eps: float | None = None, seed=0, burn_in: int | None = None, adapt: bool = True,
               target_accept: float = 0.65, jitter: float = 0.5) -> HmcResult:
    """HMC chain in the chart at ``init`` (normally the Laplace mode).

    With ``adapt`` the step size is tuned by dual averaging during burn-in
    and frozen afterwards; burn-in draws are discarded. After burn-in each
    trajectory scales the step by an independent ``U(1 - jitter, 1 + jitter)``
    draw, which breaks the near-periodic orbits a fixed ``eps * L`` can lock
    into along some directions of a Gaussian target.
    """
    if n_samples < 0 or leapfrog_L < 1:
        raise ValueError("need n_samples >= 0 and leapfrog_L >= 1")
    if not 0.0 <= jitter < 1.0:
        raise ValueError("jitter must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    pot = ChartPotential(graph, theta, init)
    burn_in = (max(100, n_samples // 5) if adapt else 0) if burn_in is None else burn_in
    q = np.zeros(3 * graph.num_vars)
    U, grad = pot(q)
    eps = step_eps if step_eps is not None else _reasonable_eps(pot, q, U, grad, rng)

    # dual averaging state
    mu, gamma, t0, kappa = math.log(10.0 * eps), 0.05, 10.0, 0.75
    h_bar, log_eps_bar = 0.0, 0.0

    out = np.empty((n_samples, q.size))
    errs = np.empty(n_samples)
    accepted = 0
    for it in range(burn_in + n_samples):
        p = rng.standard_normal(q.size)
        H0 = U + 0.5 * p @ p
        step = eps if it < burn_in or jitter == 0.0 else eps * rng.uniform(1.0 - jitter, 1.0 + jitter)
        q1, p1, U1, g1 = leapfrog(pot, q, p, grad, step, leapfrog_L)
        H1 = U1 + 0.5 * p1 @ p1 if np.isfinite(U1) else np.inf
        log_a = min(0.0, H0 - H1) if np.isfinite(H1) else -np.inf
        accept = math.log(rng.random()) < log_a
        if accept:
            q, U, grad = q1, U1, g1
        if it < burn_in:
            if adapt:
                m = it + 1
                h_bar = (1 - 1 / (m + t0)) * h_bar + (target_accept - math.exp(log_a)) / (m + t0)
                log_eps = mu - math.sqrt(m) / gamma * h_bar
                eps = math.exp(log_eps)
                w = m ** (-kappa)
                log_eps_bar = w * log_eps + (1 - w) * log_eps_bar
                if it == burn_in - 1:
                    eps = math.exp(log_eps_bar)
        else:
            k = it - burn_in
            out[k] = q
            errs[k] = abs(H1 - H0)
            accepted += accept

    rate = accepted / n_samples if n_samples else 1.0
    if n_samples and rate < 0.01:
        raise TuningError(f"HMC acceptance rate {rate:.3%} is below 1% (step size {eps:.3g})")
    samples = manifold.retract(pot.base[None], out.reshape(n_samples, -1, 3))
    return HmcResult(samples, out, rate, eps, burn_in, errs)


def rel_frobenius(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b||_F / ||b||_F``."""
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def bench_samplers(graph: FactorGraph, theta: ThetaParams, n_samples: int, init=None,
                   posterior: GaussianPosterior | None = None, seed: int = 0, leapfrog_L: int = 10,
                   burn_in: int | None = None) -> dict:
    """Time the Laplace sampler against HMC on the same solved graph.

    Wall-clock quantities sit under ``report["timing"]``; every other field is
    a deterministic function of the inputs and seed.
    """
    if posterior is None:
        posterior = solve_gn(graph, theta, graph.check_trajectory(init))
    mu = posterior.mean

    t0 = time.perf_counter()
    gn = sample_posterior(posterior, n_samples, 1.0, np.random.SeedSequence([seed, 0]))
    t_gn = time.perf_counter() - t0

    t0 = time.perf_counter()
    chain = hmc_sample(graph, theta, mu, n_samples, leapfrog_L, seed=np.random.SeedSequence([seed, 1]), burn_in=burn_in)
    t_hmc = time.perf_counter() - t0

    gn_tan = manifold.local(mu[None], gn).reshape(n_samples, -1)
    cov_gn = np.cov(gn_tan, rowvar=False)
    cov_hmc = np.cov(chain.tangent, rowvar=False)
    return {
        "n_samples": n_samples,
        "dim": graph.dim,
        "seed": seed,
        "leapfrog_L": leapfrog_L,
        "hmc_burn_in": chain.burn_in,
        "hmc_accept_rate": chain.accept_rate,
        "hmc_step_size": chain.step_size,
        "cov_rel_frobenius": rel_frobenius(cov_hmc, cov_gn),
        "timing": {
            "gn_wall_s": t_gn,
            "hmc_wall_s": t_hmc,
            "gn_per_sample_s": t_gn / n_samples,
            "hmc_per_sample_s": t_hmc / n_samples,
            "speedup": (t_hmc / n_samples) / (t_gn / n_samples),
        },
    }
