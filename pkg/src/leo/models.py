"""Learnable observation-model parameters and their energy gradients.

Covariances are diagonal and parameterized by log standard deviations, so
every parameter vector maps to a positive-definite covariance. A block is
either ``fixed`` (one row of log-stds) or ``conditioned`` (one row per
discrete condition label carried by the factor).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError


class CovMode(str, enum.Enum):
    FIXED = "fixed"
    CONDITIONED = "conditioned"


@dataclass(frozen=True, eq=False)
class CovBlock:
    mode: CovMode
    log_std: np.ndarray  # (labels, 3)

    def __post_init__(self):
        arr = np.array(self.log_std, dtype=float, copy=True)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"log_std must have shape (labels, 3), got {arr.shape}")
        if self.mode == CovMode.FIXED and arr.shape[0] != 1:
            raise ValueError("a fixed block has exactly one row of log-stds")
        if not np.all(np.isfinite(arr)):
            raise ValueError("log_std entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "mode", CovMode(self.mode))
        object.__setattr__(self, "log_std", arr)

    def __eq__(self, other):
        if not isinstance(other, CovBlock):
            return NotImplemented
        return self.mode == other.mode and np.array_equal(self.log_std, other.log_std)

    __hash__ = None

    @property
    def num_labels(self) -> int:
        return self.log_std.shape[0]

    def row(self, label: int) -> np.ndarray:
        """Log-stds that apply to a factor carrying ``label``."""
        if self.mode == CovMode.FIXED:
            return self.log_std[0]
        return self.log_std[label]

    def covariance(self, label: int = 0) -> np.ndarray:
        return np.diag(np.exp(2.0 * self.row(label)))


@dataclass(frozen=True)
class ThetaParams:
    """Immutable snapshot of every learnable parameter.

    ``mlp`` is only populated by the 1-D regression experiment and holds
    an opaque weights object exposing ``flatten``/``to_dict``.
    """

    blocks: dict = field(default_factory=dict)
    mlp: object = None

    def __post_init__(self):
        object.__setattr__(self, "blocks", dict(sorted(self.blocks.items())))

    @classmethod
    def fixed(cls, **log_stds) -> "ThetaParams":
        return cls({k: CovBlock(CovMode.FIXED, v) for k, v in log_stds.items()})

    @classmethod
    def conditioned(cls, **log_stds) -> "ThetaParams":
        return cls({k: CovBlock(CovMode.CONDITIONED, v) for k, v in log_stds.items()})

    def block(self, name: str) -> CovBlock:
        try:
            return self.blocks[name]
        except KeyError:
            raise ConfigurationError(f"unknown noise_ref {name!r}; theta defines {list(self.blocks)}") from None

    # flat-vector view used by optimizers
    def vector(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([b.log_std.ravel() for b in self.blocks.values()])

    def with_vector(self, vec) -> "ThetaParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"expected vector of length {self.size}, got shape {vec.shape}")
        out, i = {}, 0
        for name, b in self.blocks.items():
            n = b.log_std.size
            out[name] = CovBlock(b.mode, vec[i:i + n].reshape(b.log_std.shape))
            i += n
        return ThetaParams(out, self.mlp)

    @property
    def size(self) -> int:
        return sum(b.log_std.size for b in self.blocks.values())

    def coordinate_names(self) -> list[str]:
        names = []
        for name, b in self.blocks.items():
            for label in range(b.num_labels):
                names += [f"{name}[{label}].{axis}" for axis in ("x", "y", "theta")]
        return names

    def to_dict(self) -> dict:
        d = {
            "blocks": {
                name: {"mode": b.mode.value, "log_std": b.log_std.tolist()}
                for name, b in self.blocks.items()
            }
        }
        if self.mlp is not None:
            d["mlp"] = self.mlp.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ThetaParams":
        try:
            blocks = {
                name: CovBlock(CovMode(b["mode"]), np.array(b["log_std"], dtype=float))
                for name, b in d.get("blocks", {}).items()
            }
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed theta checkpoint: {exc}") from exc
        mlp = None
        if d.get("mlp") is not None:
            from .toy1d import MlpWeights

            mlp = MlpWeights.from_dict(d["mlp"])
        return cls(blocks, mlp)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ThetaParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ThetaGrad:
    """Cotangent of ThetaParams: one ``(labels, 3)`` array per block."""

    blocks: dict

    def vector(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([self.blocks[k].ravel() for k in sorted(self.blocks)])

    def __add__(self, other: "ThetaGrad") -> "ThetaGrad":
        _check_same_shape(self.blocks, other.blocks)
        return ThetaGrad({k: self.blocks[k] + other.blocks[k] for k in self.blocks})

    def __sub__(self, other: "ThetaGrad") -> "ThetaGrad":
        _check_same_shape(self.blocks, other.blocks)
        return ThetaGrad({k: self.blocks[k] - other.blocks[k] for k in self.blocks})

    def scale(self, c: float) -> "ThetaGrad":
        return ThetaGrad({k: c * v for k, v in self.blocks.items()})

    @classmethod
    def zeros_like(cls, theta: ThetaParams) -> "ThetaGrad":
        return cls({k: np.zeros_like(b.log_std) for k, b in theta.blocks.items()})


def _check_same_shape(a: dict, b: dict) -> None:
    if a.keys() != b.keys() or any(a[k].shape != b[k].shape for k in a):
        raise ValueError("shape mismatch between parameter sets")


def factor_log_stds(theta: ThetaParams, refs, conditions) -> np.ndarray:
    """Per-factor active log-stds, shape ``(len(refs), 3)``.

    ``refs`` is a sequence of block names, ``conditions`` the matching labels.
    """
    refs = list(refs)
    conditions = np.asarray(conditions, dtype=int)
    out = np.empty((len(refs), 3))
    ref_arr = np.array(refs, dtype=object)
    for name in dict.fromkeys(refs):
        block = theta.block(name)
        mask = ref_arr == name
        labels = conditions[mask] if block.mode == CovMode.CONDITIONED else np.zeros(mask.sum(), int)
        if labels.size and (labels.min() < 0 or labels.max() >= block.num_labels):
            raise ConfigurationError(
                f"block {name!r} has {block.num_labels} condition label(s); factor requests label {labels.max()}"
            )
        out[mask] = block.log_std[labels]
    return out


def _route(graph, theta: ThetaParams, contrib: np.ndarray) -> ThetaGrad:
    blocks = {}
    for name, block in theta.blocks.items():
        g = np.zeros_like(block.log_std)
        mask = graph.ref_mask(name)
        if mask.any():
            if block.mode == CovMode.CONDITIONED:
                np.add.at(g, graph.conditions[mask], contrib[mask])
            else:
                g[0] = contrib[mask].sum(axis=0)
        blocks[name] = g
    return ThetaGrad(blocks)


def energy_grad_theta(graph, theta: ThetaParams, x) -> ThetaGrad:
    """Exact gradient of the graph energy with respect to every log-std.

    With whitened residual ``exp(-s) * r`` the energy term is
    ``0.5 * r**2 * exp(-2 s)``, so ``dE/ds = -r**2 * exp(-2 s)``.
    """
    return mean_energy_grad_theta(graph, theta, np.asarray(x, dtype=float)[None])


def mean_energy_grad_theta(graph, theta: ThetaParams, xs) -> ThetaGrad:
    """Average of ``energy_grad_theta`` over a stack of trajectories ``(S, T, 3)``."""
    xs = np.asarray(xs, dtype=float)
    s = graph.log_stds(theta)
    r = graph.residuals(xs)  # (S, nf, 3)
    contrib = -np.mean(r * r, axis=0) * np.exp(-2.0 * s)
    return _route(graph, theta, contrib)


def theta_axpy(theta: ThetaParams, grad: ThetaGrad, step: float) -> ThetaParams:
    """Return ``theta - step * grad``."""
    if grad.blocks.keys() != theta.blocks.keys() or any(
        grad.blocks[k].shape != theta.blocks[k].log_std.shape for k in theta.blocks
    ):
        raise ValueError("gradient shape does not match theta")
    return theta.with_vector(theta.vector() - step * grad.vector())
