"""SE(2) group operations on pose arrays.

Poses are stored as ``(..., 3)`` float arrays ``[x, y, theta]`` and tangent
vectors as ``(..., 3)`` arrays ``[dx, dy, dtheta]``. All functions broadcast
over leading dimensions, so a trajectory is simply a ``(T, 3)`` array.

The retraction is the exact group exponential, ``retract(p, v) = p * Exp(v)``,
and ``local`` is its inverse, ``local(a, b) = Log(a^-1 * b)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SMALL = 1e-4


def wrap_angle(theta):
    """Wrap angles to the half-open interval (-pi, pi]."""
    theta = np.asarray(theta, dtype=float)
    out = np.pi - np.mod(np.pi - theta, 2.0 * np.pi)
    # np.mod can round up to exactly 2*pi for tiny negative arguments
    return np.where(out <= -np.pi, out + 2.0 * np.pi, out)


def _as_poses(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != 3:
        raise ValueError(f"expected trailing dimension 3, got shape {p.shape}")
    return p


def identity(n: int | None = None) -> np.ndarray:
    """Identity pose, or a trajectory of ``n`` identity poses."""
    return np.zeros(3) if n is None else np.zeros((n, 3))


def compose(a, b) -> np.ndarray:
    a, b = _as_poses(a), _as_poses(b)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    x = a[..., 0] + c * b[..., 0] - s * b[..., 1]
    y = a[..., 1] + s * b[..., 0] + c * b[..., 1]
    return np.stack([x, y, wrap_angle(a[..., 2] + b[..., 2])], axis=-1)


def inverse(a) -> np.ndarray:
    a = _as_poses(a)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    x = -c * a[..., 0] - s * a[..., 1]
    y = s * a[..., 0] - c * a[..., 1]
    return np.stack([x, y, wrap_angle(-a[..., 2])], axis=-1)


def between(a, b) -> np.ndarray:
    """Relative pose ``a^-1 * b``."""
    a, b = _as_poses(a), _as_poses(b)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    dx = b[..., 0] - a[..., 0]
    dy = b[..., 1] - a[..., 1]
    return np.stack(
        [c * dx + s * dy, -s * dx + c * dy, wrap_angle(b[..., 2] - a[..., 2])],
        axis=-1,
    )


def _sinc_terms(theta):
    """Return (sin(t)/t, (1 - cos(t))/t), both smooth through t = 0."""
    theta = np.asarray(theta, dtype=float)
    half = np.sinc(theta / (2.0 * np.pi))  # sin(t/2) / (t/2)
    return np.sinc(theta / np.pi), 0.5 * theta * half * half


def exp(v) -> np.ndarray:
    v = _as_poses(v)
    th = v[..., 2]
    a, b = _sinc_terms(th)
    x = a * v[..., 0] - b * v[..., 1]
    y = b * v[..., 0] + a * v[..., 1]
    return np.stack([x, y, wrap_angle(th)], axis=-1)


def log(p) -> np.ndarray:
    p = _as_poses(p)
    th = wrap_angle(p[..., 2])
    half = th / 2.0
    small = np.abs(th) < _SMALL
    safe = np.where(small, 1.0, half)
    # (t/2) * cot(t/2)
    h = np.where(small, 1.0 - th * th / 12.0, safe / np.tan(np.where(small, 1.0, safe)))
    x = h * p[..., 0] + half * p[..., 1]
    y = -half * p[..., 0] + h * p[..., 1]
    return np.stack([x, y, th], axis=-1)


def retract(p, v) -> np.ndarray:
    """``p (+) v``: move ``p`` along tangent ``v`` expressed in p's frame."""
    return compose(p, exp(v))


def local(a, b) -> np.ndarray:
    """``b (-) a``: tangent coordinates of ``b`` in the chart at ``a``."""
    return log(between(a, b))


def adjoint(p) -> np.ndarray:
    """Adjoint matrices, shape ``(..., 3, 3)``."""
    p = _as_poses(p)
    c, s = np.cos(p[..., 2]), np.sin(p[..., 2])
    out = np.zeros(p.shape[:-1] + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 0, 2] = p[..., 1]
    out[..., 1, 2] = -p[..., 0]
    out[..., 2, 2] = 1.0
    return out


def _right_jacobian_column(v):
    th = v[..., 2]
    r1, r2 = v[..., 0], v[..., 1]
    small = np.abs(th) < _SMALL
    safe = np.where(small, 1.0, th)
    c, s = np.cos(safe), np.sin(safe)
    t2 = safe * safe
    u = np.where(small, -r2 / 2.0 + r1 * th / 6.0, (safe * r1 - r2 + r2 * c - r1 * s) / t2)
    w = np.where(small, r1 / 2.0 + r2 * th / 6.0, (r1 + safe * r2 - r1 * c - r2 * s) / t2)
    return u, w


def right_jacobian(v) -> np.ndarray:
    """Right Jacobian of Exp: ``Exp(v + dv) ~= Exp(v) Exp(Jr(v) dv)``."""
    v = _as_poses(v)
    a, b = _sinc_terms(v[..., 2])
    u, w = _right_jacobian_column(v)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 0] = a
    out[..., 0, 1] = b
    out[..., 1, 0] = -b
    out[..., 1, 1] = a
    out[..., 0, 2] = u
    out[..., 1, 2] = w
    out[..., 2, 2] = 1.0
    return out


def right_jacobian_inv(v) -> np.ndarray:
    v = _as_poses(v)
    a, b = _sinc_terms(v[..., 2])
    u, w = _right_jacobian_column(v)
    det = a * a + b * b
    ia, ib = a / det, b / det
    out = np.zeros(v.shape[:-1] + (3, 3))
    # inverse of [[a, b], [-b, a]] is [[a, -b], [b, a]] / det
    out[..., 0, 0] = ia
    out[..., 0, 1] = -ib
    out[..., 1, 0] = ib
    out[..., 1, 1] = ia
    out[..., 0, 2] = -(ia * u - ib * w)
    out[..., 1, 2] = -(ib * u + ia * w)
    out[..., 2, 2] = 1.0
    return out


@dataclass(frozen=True)
class Pose2:
    """Single SE(2) element. Heading is wrapped on construction."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", float(wrap_angle(self.theta)))

    @classmethod
    def from_array(cls, arr) -> "Pose2":
        arr = np.asarray(arr, dtype=float)
        return cls(arr[0], arr[1], arr[2])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def __matmul__(self, other: "Pose2") -> "Pose2":
        return Pose2.from_array(compose(self.as_array(), other.as_array()))

    def inverse(self) -> "Pose2":
        return Pose2.from_array(inverse(self.as_array()))

    def between(self, other: "Pose2") -> "Pose2":
        return Pose2.from_array(between(self.as_array(), other.as_array()))

    def retract(self, v) -> "Pose2":
        return Pose2.from_array(retract(self.as_array(), v))

    def local(self, other: "Pose2") -> np.ndarray:
        return local(self.as_array(), other.as_array())
