"""Interpolant schedules and the stochastic bridge between base and data samples.

Fractional coordinates live on the unit torus, where scaling a point is not
meaningful. There the bridge follows the minimum-image geodesic from ``x0``
to ``x1``::

    x_t = wrap(x0 + beta(t) * delta + gamma(t) * z),   delta = mimage(x1 - x0)

which agrees with ``alpha*x0 + beta*x1 + gamma*z`` for the linear schedule
and keeps both endpoints exact. Lattice lengths use the plain Euclidean form.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

TORUS = "torus"
EUCLIDEAN = "euclidean"


class ScheduleKind(str, Enum):
    LINEAR = "linear"
    TRIG = "trig"
    TRIG_GAMMA = "trig_gamma"


def wrap(x):
    """Map into [0, 1). Guards the ``-tiny % 1 == 1.0`` rounding case."""
    y = np.mod(x, 1.0)
    return np.where(y >= 1.0, 0.0, y)


def min_image(d):
    """Minimum-image representative of a fractional displacement, in (-0.5, 0.5]."""
    return d - np.ceil(d - 0.5)


@dataclass(frozen=True)
class InterpolantSchedule:
    kind: ScheduleKind = ScheduleKind.LINEAR
    a_gamma: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.a_gamma < 0:
            raise ValueError("a_gamma must be non-negative")

    @property
    def has_noise(self) -> bool:
        return self.kind is ScheduleKind.TRIG_GAMMA and self.a_gamma > 0

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "a_gamma": self.a_gamma}

    @classmethod
    def from_dict(cls, d: dict) -> "InterpolantSchedule":
        return cls(ScheduleKind(d["kind"]), float(d.get("a_gamma", 0.25)))


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if np.any((t < 0.0) | (t > 1.0)):
        raise ValueError("t must lie in [0, 1]")
    return t


def schedule_eval(s: InterpolantSchedule, t):
    """Return ``(alpha, beta, gamma, d_alpha, d_beta, d_gamma)`` at ``t``.

    Works element-wise on arrays. ``d_gamma`` is infinite at the endpoints for
    the noisy schedule; training samples ``t`` away from them.
    """
    t = _check_time(t)
    zero = np.zeros_like(t)
    if s.kind is ScheduleKind.LINEAR:
        return 1.0 - t, t.copy(), zero, -np.ones_like(t), np.ones_like(t), zero.copy()
    half_pi = 0.5 * np.pi
    # exact endpoint values (cos(pi/2) is 6e-17 in floating point)
    alpha = np.where(t == 1.0, 0.0, np.cos(half_pi * t))
    beta = np.where(t == 1.0, 1.0, np.sin(half_pi * t))
    d_alpha = -half_pi * beta
    d_beta = half_pi * alpha
    if s.kind is ScheduleKind.TRIG:
        return alpha, beta, zero, d_alpha, d_beta, zero.copy()
    a = s.a_gamma
    gamma = np.sqrt(a * t * (1.0 - t))
    with np.errstate(divide="ignore", invalid="ignore"):
        d_gamma = np.where(gamma > 0, a * (1.0 - 2.0 * t) / (2.0 * gamma), np.inf)
    if a == 0:
        d_gamma = zero.copy()
    return alpha, beta, gamma, d_alpha, d_beta, d_gamma


def _bcast(v, x):
    """Broadcast per-sample schedule values against a (batch, ...) array."""
    v = np.asarray(v, dtype=float)
    return v.reshape(v.shape + (1,) * (np.ndim(x) - v.ndim))


def interpolate(s: InterpolantSchedule, t, x0, x1, z, geom: str = EUCLIDEAN):
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    z = np.zeros_like(x0) if z is None else np.asarray(z, dtype=float)
    if z.shape != x0.shape:
        raise ValueError(f"shape mismatch: noise {z.shape} vs {x0.shape}")
    alpha, beta, gamma, *_ = schedule_eval(s, t)
    alpha, beta, gamma = (_bcast(v, x0) for v in (alpha, beta, gamma))
    if geom == TORUS:
        delta = min_image(x1 - x0)
        out = wrap(x0 + beta * delta + gamma * z)
        # t = 1 must land on x1 itself, not on a rounding neighbour of it
        return np.where(np.broadcast_to(beta == 1.0, out.shape), x1, out)
    return alpha * x0 + beta * x1 + gamma * z


def conditional_velocity(s: InterpolantSchedule, t, x0, x1, z, geom: str = EUCLIDEAN):
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    z = np.zeros_like(x0) if z is None else np.asarray(z, dtype=float)
    _, _, _, da, db, dg = schedule_eval(s, t)
    da, db, dg = (_bcast(v, x0) for v in (da, db, dg))
    noise = dg * z if s.has_noise else 0.0
    if geom == TORUS:
        return db * min_image(x1 - x0) + noise
    return da * x0 + db * x1 + noise
