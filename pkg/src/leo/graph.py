"""Factor graphs over SE(2) poses, Gauss-Newton MAP inference and posterior sampling.

Every factor produces a 3-vector raw residual ``r``; the energy term is
``0.5 * ||exp(-s) * r||**2`` where ``s`` is the log-std row selected from
theta by the factor's ``noise_ref`` and ``condition``. Residuals follow the
convention ``r = local(prediction, measurement)``:

* odometry: ``local(between(x_i, x_j), z)``
* gps:      ``local(x_k, z)``

Jacobians are taken with respect to right perturbations ``x (+) dx`` of each
variable, the same chart used by the retraction and by the sampler.

The normal equations are factored with a banded Cholesky decomposition in
variable order. Navigation chains have a half-bandwidth of 5, so both the
solve and the triangular back-substitution used for sampling are linear in
trajectory length.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import manifold
from .errors import ConfigurationError, DivergenceError, GaugeError, StaleLinearizationError
from .models import CovMode, ThetaParams

log = logging.getLogger(__name__)


class FactorKind(str, enum.Enum):
    ODOM = "odom_relative"
    GPS = "gps_unary"
    CUSTOM = "custom"


class CustomModel(Protocol):
    """Payload of a CUSTOM factor.

    ``evaluate`` receives the connected poses as an ``(m, 3)`` array and
    returns the raw residual ``(3,)`` together with its Jacobians
    ``(m, 3, 3)`` with respect to right perturbations of each pose.
    """

    def evaluate(self, poses: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class Factor:
    kind: FactorKind
    variables: tuple
    measurement: object
    noise_ref: str
    condition: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", FactorKind(self.kind))
        object.__setattr__(self, "variables", tuple(int(v) for v in self.variables))
        if self.kind == FactorKind.ODOM and len(self.variables) != 2:
            raise ValueError("odometry factors connect exactly two variables")
        if self.kind == FactorKind.GPS and len(self.variables) != 1:
            raise ValueError("gps factors connect exactly one variable")
        if self.kind != FactorKind.CUSTOM:
            object.__setattr__(self, "measurement", np.asarray(self.measurement, dtype=float).reshape(3))
        object.__setattr__(self, "condition", int(self.condition))


def odom_factor(i: int, j: int, z, noise_ref: str = "odom", condition: int = 0) -> Factor:
    return Factor(FactorKind.ODOM, (i, j), z, noise_ref, condition)


def gps_factor(k: int, z, noise_ref: str = "gps", condition: int = 0) -> Factor:
    return Factor(FactorKind.GPS, (k,), z, noise_ref, condition)


@dataclass(frozen=True)
class SparseLinearSystem:
    """Whitened linearization ``min ||A dx - b||^2`` at a point."""

    A: sp.csr_matrix
    b: np.ndarray
    row_map: np.ndarray  # (num_factors, 2) [start, stop) row range of each factor


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-6
    max_iters: int = 50
    damping_init: float = 1e-4
    damping_max: float = 1e10


class FactorGraph:
    """Pose variables ``0..num_vars-1`` plus an ordered list of factors."""

    def __init__(self, num_vars: int, factors: Sequence[Factor] = ()):
        self.num_vars = int(num_vars)
        self.factors = tuple(factors)
        for idx, f in enumerate(self.factors):
            if any(v < 0 or v >= self.num_vars for v in f.variables):
                raise ValueError(f"factor {idx} references a variable outside 0..{self.num_vars - 1}")
        self._compile()

    def _compile(self):
        kinds = np.array([f.kind.value for f in self.factors], dtype=object)
        self._odom = np.flatnonzero(kinds == FactorKind.ODOM.value)
        self._gps = np.flatnonzero(kinds == FactorKind.GPS.value)
        self._custom = np.flatnonzero(kinds == FactorKind.CUSTOM.value)
        fs = self.factors
        self._odom_i = np.array([fs[k].variables[0] for k in self._odom], dtype=int)
        self._odom_j = np.array([fs[k].variables[1] for k in self._odom], dtype=int)
        self._odom_z = np.array([fs[k].measurement for k in self._odom]).reshape(-1, 3)
        self._odom_zinv_adj = manifold.adjoint(manifold.inverse(self._odom_z))
        self._gps_k = np.array([fs[k].variables[0] for k in self._gps], dtype=int)
        self._gps_z = np.array([fs[k].measurement for k in self._gps]).reshape(-1, 3)
        self.noise_refs = tuple(f.noise_ref for f in fs)
        self.conditions = np.array([f.condition for f in fs], dtype=int)
        refs = np.array(self.noise_refs, dtype=object)
        self._ref_masks = {name: refs == name for name in dict.fromkeys(self.noise_refs)}
        spans = [max(f.variables) - min(f.variables) for f in fs if f.variables]
        self.bandwidth = 3 * max(spans, default=0) + 2
        self._log_std_cache = (None, None)

    @property
    def num_factors(self) -> int:
        return len(self.factors)

    @property
    def dim(self) -> int:
        return 3 * self.num_vars

    def ref_mask(self, name: str) -> np.ndarray:
        return self._ref_masks.get(name, np.zeros(self.num_factors, dtype=bool))

    def extended(self, new_factors: Sequence[Factor], num_vars: int | None = None) -> "FactorGraph":
        new_factors = tuple(new_factors)
        top = max((max(f.variables) for f in new_factors), default=-1) + 1
        n = max(self.num_vars, top) if num_vars is None else num_vars
        return FactorGraph(n, self.factors + new_factors)

    def check_trajectory(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-2:] != (self.num_vars, 3):
            raise ValueError(f"trajectory shape {x.shape[-2:]} does not match graph with {self.num_vars} poses")
        return x

    def log_stds(self, theta: ThetaParams) -> np.ndarray:
        """Active log-std row of every factor, ``(num_factors, 3)``."""
        cached_theta, cached = self._log_std_cache
        if cached_theta is theta:
            return cached
        out = np.empty((self.num_factors, 3))
        for name, mask in self._ref_masks.items():
            block = theta.block(name)
            if block.mode == CovMode.CONDITIONED:
                labels = self.conditions[mask]
                if labels.min() < 0 or labels.max() >= block.num_labels:
                    raise ConfigurationError(
                        f"block {name!r} has {block.num_labels} condition label(s); "
                        f"a factor requests label {labels.max()}"
                    )
                out[mask] = block.log_std[labels]
            else:
                out[mask] = block.log_std[0]
        self._log_std_cache = (theta, out)
        return out

    # -- residuals -------------------------------------------------------
    def residuals(self, x) -> np.ndarray:
        """Raw residuals, ``(..., num_factors, 3)`` for ``x`` of shape ``(..., T, 3)``."""
        x = self.check_trajectory(x)
        out = np.empty(x.shape[:-2] + (self.num_factors, 3))
        if self._odom.size:
            pred = manifold.between(x[..., self._odom_i, :], x[..., self._odom_j, :])
            out[..., self._odom, :] = manifold.local(pred, self._odom_z)
        if self._gps.size:
            out[..., self._gps, :] = manifold.local(x[..., self._gps_k, :], self._gps_z)
        if self._custom.size:
            lead = x.shape[:-2]
            flat = x.reshape((-1,) + x.shape[-2:])
            res = np.empty((flat.shape[0], self._custom.size, 3))
            for s, xs in enumerate(flat):
                for c, k in enumerate(self._custom):
                    f = self.factors[k]
                    res[s, c] = f.measurement.evaluate(xs[list(f.variables)])[0]
            out[..., self._custom, :] = res.reshape(lead + (self._custom.size, 3))
        return out

    def whitened(self, theta: ThetaParams, x) -> np.ndarray:
        return self.residuals(x) * np.exp(-self.log_stds(theta))

    def energy(self, theta: ThetaParams, x):
        """``0.5 * sum_k ||whitened residual_k||^2``; batched over leading axes."""
        w = self.whitened(theta, x)
        return 0.5 * np.sum(w * w, axis=(-2, -1))

    def jacobian_blocks(self, x):
        """Raw residuals plus per-(factor, variable) Jacobian blocks at ``x``.

        Returns ``(r, fac, var, J)`` with ``J[b]`` the ``3x3`` derivative of
        factor ``fac[b]``'s residual with respect to variable ``var[b]``.
        """
        x = self.check_trajectory(x)
        r = np.empty((self.num_factors, 3))
        facs, vars_, jacs = [], [], []
        if self._odom.size:
            xi, xj = x[self._odom_i], x[self._odom_j]
            pred = manifold.between(xi, xj)
            err = manifold.compose(manifold.inverse(pred), self._odom_z)
            ro = manifold.log(err)
            r[self._odom] = ro
            jinv = manifold.right_jacobian_inv(ro)
            jj = -jinv @ manifold.adjoint(manifold.inverse(err))
            ji = jinv @ self._odom_zinv_adj
            facs += [self._odom, self._odom]
            vars_ += [self._odom_i, self._odom_j]
            jacs += [ji, jj]
        if self._gps.size:
            err = manifold.between(x[self._gps_k], self._gps_z)
            rg = manifold.log(err)
            r[self._gps] = rg
            facs.append(self._gps)
            vars_.append(self._gps_k)
            jacs.append(-manifold.right_jacobian_inv(rg) @ manifold.adjoint(manifold.inverse(err)))
        for k in self._custom:
            f = self.factors[k]
            rk, jk = f.measurement.evaluate(x[list(f.variables)])
            r[k] = rk
            jk = np.asarray(jk, dtype=float).reshape(len(f.variables), 3, 3)
            facs.append(np.full(len(f.variables), k))
            vars_.append(np.array(f.variables, dtype=int))
            jacs.append(jk)
        if not jacs:
            return r, np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3, 3))
        return r, np.concatenate(facs), np.concatenate(vars_), np.concatenate(jacs)

    def _whitened_system(self, theta, x):
        r, fac, var, J = self.jacobian_blocks(x)
        scale = np.exp(-self.log_stds(theta))
        w = r * scale
        F = scale[fac][:, :, None] * J
        return w, fac, var, F

    def energy_gradient(self, theta: ThetaParams, x) -> tuple[float, np.ndarray]:
        """Energy and its gradient w.r.t. right perturbations, ``(T, 3)``."""
        w, fac, var, F = self._whitened_system(theta, x)
        g = np.zeros((self.num_vars, 3))
        np.add.at(g, var, np.einsum("bji,bj->bi", F, w[fac]))
        return 0.5 * float(np.sum(w * w)), g

    def linearize(self, theta: ThetaParams, x) -> SparseLinearSystem:
        w, fac, var, F = self._whitened_system(theta, x)
        rows = (3 * fac)[:, None, None] + np.arange(3)[None, :, None]
        cols = (3 * var)[:, None, None] + np.arange(3)[None, None, :]
        rows, cols = np.broadcast_arrays(rows, cols)
        A = sp.csr_matrix(
            (F.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * self.num_factors, self.dim)
        )
        starts = 3 * np.arange(self.num_factors)
        return SparseLinearSystem(A, -w.ravel(), np.stack([starts, starts + 3], axis=1))


Trajectory = np.ndarray  # (T, 3)


def energy(graph: FactorGraph, theta: ThetaParams, x) -> float:
    return float(graph.energy(theta, x))


def linearize(graph: FactorGraph, theta: ThetaParams, x0) -> SparseLinearSystem:
    return graph.linearize(theta, x0)


# -- banded normal equations ----------------------------------------------

def _banded_upper(H: sp.spmatrix, bw: int) -> np.ndarray:
    n = H.shape[0]
    bw = min(bw, n - 1)
    ab = np.zeros((bw + 1, n))
    for k in range(bw + 1):
        ab[bw - k, k:] = H.diagonal(k)
    return ab


class SqrtInformation:
    """Upper-triangular ``R`` with ``R^T R = A^T A``, held in banded storage."""

    def __init__(self, ab: np.ndarray):
        self.ab = ab
        self.bandwidth = ab.shape[0] - 1
        self.dim = ab.shape[1]

    @property
    def diagonal(self) -> np.ndarray:
        return self.ab[-1]

    def to_sparse(self) -> sp.csr_matrix:
        u = self.bandwidth
        diags = [self.ab[u - k, k:] for k in range(u + 1)]
        return sp.diags(diags, list(range(u + 1)), shape=(self.dim, self.dim), format="csr")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Back-substitute ``R y = rhs``."""
        return scipy.linalg.solve_banded((0, self.bandwidth), self.ab, rhs, check_finite=False)

    def solve_normal(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``R^T R y = rhs``."""
        return scipy.linalg.cho_solve_banded((self.ab, False), rhs, check_finite=False)

    def logdet(self) -> float:
        """``log det(R^T R)``."""
        return 2.0 * float(np.sum(np.log(self.diagonal)))

    def covariance(self) -> np.ndarray:
        """Dense ``(R^T R)^-1``; intended for small graphs and tests."""
        return self.solve_normal(np.eye(self.dim))


def _factor(H: sp.spmatrix, bw: int) -> SqrtInformation:
    ab = _banded_upper(H, bw)
    try:
        U = scipy.linalg.cholesky_banded(ab, lower=False, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise GaugeError(f"normal equations are not positive definite: {exc}") from None
    d = U[-1]
    hmax = float(np.max(ab[-1])) if ab.size else 0.0
    if not np.all(np.isfinite(U)) or np.min(d * d) <= ab.shape[1] * np.finfo(float).eps * hmax:
        raise GaugeError("normal equations are numerically rank deficient (gauge not fixed)")
    return SqrtInformation(U)


@dataclass
class GaussianPosterior:
    """Laplace approximation ``N(mean, (R^T R)^-1)`` at the returned mode."""

    mean: np.ndarray
    sqrt_info: SqrtInformation
    iterations: int
    converged: bool
    energy: float = float("nan")
    grad_norm: float = float("nan")
    max_damping: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.sqrt_info.dim

    def covariance(self) -> np.ndarray:
        return self.sqrt_info.covariance()

    def marginal_covariances(self) -> np.ndarray:
        """Per-pose ``3x3`` marginal covariances, ``(T, 3, 3)`` (dense inverse)."""
        cov = self.covariance()
        T = self.mean.shape[0]
        idx = np.arange(T)
        return cov.reshape(T, 3, T, 3)[idx, :, idx, :]

    def log_density(self, x, temperature: float = 1.0) -> float:
        """Log of the Gaussian density of ``x`` mapped into the tangent space at the mean."""
        d = manifold.local(self.mean, x).ravel()
        R = self.sqrt_info.to_sparse()
        m = R @ d
        n = self.dim
        return float(
            -0.5 * (m @ m) / temperature
            + 0.5 * self.sqrt_info.logdet()
            - 0.5 * n * np.log(2.0 * np.pi * temperature)
        )


def solve_gn(graph: FactorGraph, theta: ThetaParams, init, cfg: SolverConfig = SolverConfig()) -> GaussianPosterior:
    """Gauss-Newton with a Levenberg-style fallback.

    Pure Gauss-Newton steps are tried first. When a step fails to lower the
    energy, diagonal damping ``lam * diag(H)`` is switched on and raised by 10x
    until the step is accepted; damping decays again after successes. The
    returned square-root information factor is always the undamped one at
    the returned mean.
    """
    x = graph.check_trajectory(init).copy()
    bw = graph.bandwidth
    E = float(graph.energy(theta, x))
    lam = 0.0
    max_lam = 0.0
    it = 0
    while True:
        it += 1
        lin = graph.linearize(theta, x)
        H = (lin.A.T @ lin.A).tocsr()
        g = lin.A.T @ lin.b
        U = _factor(H, bw)
        delta = U.solve_normal(g)
        dmax = float(np.max(np.abs(delta))) if delta.size else 0.0
        gmax = float(np.max(np.abs(g))) if g.size else 0.0
        if (dmax < cfg.tol and gmax < 10.0 * cfg.tol) or dmax < 1e-3 * cfg.tol:
            return GaussianPosterior(x, U, it, True, E, gmax, max_lam)
        if it >= cfg.max_iters:
            log.warning("Gauss-Newton hit max_iters=%d (|dx|=%.3g)", cfg.max_iters, dmax)
            return GaussianPosterior(x, U, it, False, E, gmax, max_lam)
        while True:
            if lam > 0.0:
                Hd = H + lam * sp.diags(H.diagonal())
                step = _factor(Hd, bw).solve_normal(g)
            else:
                step = delta
            x_new = manifold.retract(x, step.reshape(-1, 3))
            E_new = float(graph.energy(theta, x_new))
            if np.isfinite(E_new) and E_new <= E + 1e-12 * max(abs(E), 1.0):
                break
            if lam == 0.0 and np.isfinite(E_new):
                # Overshoot along the GN direction: try the minimizer of the
                # quadratic through E, the slope -g.delta and E_new.
                slope = -float(g @ delta)
                curv = E_new - E - slope
                alpha = float(np.clip(-slope / (2.0 * curv), 0.05, 0.9)) if curv > 0 else 0.5
                x_new = manifold.retract(x, (alpha * delta).reshape(-1, 3))
                E_new = float(graph.energy(theta, x_new))
                if E_new < E:
                    break
            lam = cfg.damping_init if lam == 0.0 else 10.0 * lam
            max_lam = max(max_lam, lam)
            if lam > cfg.damping_max:
                raise DivergenceError(
                    f"energy did not decrease with damping up to {cfg.damping_max:g}", best=x, energy=E
                )
        x, E = x_new, E_new
        if lam > 0.0:
            lam /= 10.0
            if lam < cfg.damping_init:
                lam = 0.0


def dead_reckon(graph: FactorGraph, known, new_factors: Sequence[Factor], num_vars: int) -> np.ndarray:
    """Initial guess for an extended graph: keep known poses, chain odometry
    into new ones, fall back to gps measurements, then to the previous pose."""
    x = np.zeros((num_vars, 3))
    known = np.asarray(known, dtype=float)
    n_known = known.shape[0]
    x[:n_known] = known
    have = np.zeros(num_vars, dtype=bool)
    have[:n_known] = True
    pending = list(new_factors)
    progress = True
    while progress and not have.all():
        progress = False
        for f in pending:
            if f.kind == FactorKind.ODOM:
                i, j = f.variables
                if have[i] and not have[j]:
                    x[j] = manifold.compose(x[i], f.measurement)
                    have[j] = progress = True
                elif have[j] and not have[i]:
                    x[i] = manifold.compose(x[j], manifold.inverse(f.measurement))
                    have[i] = progress = True
    for f in pending:
        if f.kind == FactorKind.GPS and not have[f.variables[0]]:
            x[f.variables[0]] = f.measurement
            have[f.variables[0]] = True
    for k in range(num_vars):
        if not have[k]:
            x[k] = x[k - 1] if k > 0 else 0.0
    return x


def solve_incremental(
    graph: FactorGraph,
    theta: ThetaParams,
    prev: GaussianPosterior | None,
    new_factors: Sequence[Factor],
    cfg: SolverConfig = SolverConfig(),
) -> tuple[FactorGraph, GaussianPosterior]:
    """Append ``new_factors`` to ``graph`` and re-solve warm-started at ``prev``.

    Returns the extended graph together with its posterior. New variables
    are initialized by dead reckoning from the previous mean.
    """
    ext = graph.extended(new_factors)
    known = prev.mean if prev is not None else np.zeros((0, 3))
    init = dead_reckon(ext, known, new_factors, ext.num_vars)
    return ext, solve_gn(ext, theta, init, cfg)


class IncrementalSmoother:
    """Stateful wrapper around ``solve_incremental`` for streaming use."""

    def __init__(self, theta: ThetaParams, cfg: SolverConfig = SolverConfig()):
        self.theta = theta
        self.cfg = cfg
        self.graph = FactorGraph(0)
        self.posterior: GaussianPosterior | None = None
        self.calls = 0

    def update(self, new_factors: Sequence[Factor]) -> GaussianPosterior:
        self.graph, self.posterior = solve_incremental(self.graph, self.theta, self.posterior, new_factors, self.cfg)
        self.calls += 1
        return self.posterior


def sample_posterior(post: GaussianPosterior, count: int, temperature: float = 1.0, rng_seed=None) -> np.ndarray:
    """Draw ``count`` trajectories ``mean (+) dx`` with ``dx ~ N(0, T (A^T A)^-1)``.

    Returns an array of shape ``(count, T, 3)``. ``temperature == 0`` yields
    copies of the mean.
    """
    if not post.converged:
        raise StaleLinearizationError("posterior did not converge; its linearization is stale")
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    if count < 0:
        raise ValueError("count must be non-negative")
    if temperature == 0.0 or count == 0:
        return np.broadcast_to(post.mean, (count,) + post.mean.shape).copy()
    rng = np.random.default_rng(rng_seed)
    eps = rng.standard_normal((count, post.dim))
    delta = post.sqrt_info.solve(np.sqrt(temperature) * eps.T).T
    return manifold.retract(post.mean[None], delta.reshape(count, -1, 3))


def tracking_errors(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Per-pose translational norm and absolute heading of ``local(a_t, b_t)``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    d = manifold.local(a, b)
    return np.hypot(d[..., 0], d[..., 1]), np.abs(d[..., 2])


def tracking_rmse(a, b) -> tuple[float, float]:
    """Translational and rotational RMSE between two trajectories."""
    t, r = tracking_errors(a, b)
    return float(np.sqrt(np.mean(t * t))), float(np.sqrt(np.mean(r * r)))


def tracking_loss(a, b) -> float:
    """Mean squared tangent-space error ``mean_t ||b_t (-) a_t||^2``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    d = manifold.local(a, b)
    return float(np.mean(np.sum(d * d, axis=-1)))
