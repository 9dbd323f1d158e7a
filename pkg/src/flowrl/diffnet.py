"""Small feed-forward networks with hand-written reverse-mode gradients.

Parameters live in one flat float64 vector. A :class:`NetworkSpec` owns the
layout (which slice of the vector is which weight matrix or bias), so the
optimizer, the checkpoint format and the finite-difference oracle only ever
see flat arrays.

Differentiable primitives return ``(value, pullback)`` where ``pullback`` maps
the cotangent of the output to cotangents of the inputs. Objectives in this
package are compositions of these primitives plus :func:`mlp_forward` /
:func:`mlp_backward`.

Kink conventions
----------------
* ``clip(x, lo, hi)`` has derivative 1 strictly inside ``(lo, hi)`` and 0
  elsewhere, including exactly at ``lo`` and ``hi``.
* ``minimum(a, b)`` routes the whole cotangent to ``a`` when ``a <= b`` (ties
  go left) and to ``b`` otherwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erf

from . import rng as _rng

CHECKPOINT_FORMAT_VERSION = 1

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces a non-finite value."""

    def __init__(self, primitive: str):
        super().__init__(f"non-finite value in primitive '{primitive}'")
        self.primitive = primitive


def check_finite(name: str, value):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(name)
    return value


# ---------------------------------------------------------------------------
# network layout


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"
    final_layer_zero_init: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("network dimensions must be >= 1")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError("hidden_dims must be a non-empty list of positive sizes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_params(self) -> int:
        d = self.dims
        return sum(d[k] * d[k + 1] + d[k + 1] for k in range(len(d) - 1))

    def layout(self) -> list[tuple[slice, slice]]:
        """Slices of (weight, bias) for every layer, in forward order."""
        out, offset, d = [], 0, self.dims
        for k in range(len(d) - 1):
            nw = d[k] * d[k + 1]
            out.append((slice(offset, offset + nw), slice(offset + nw, offset + nw + d[k + 1])))
            offset += nw + d[k + 1]
        return out

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {params.shape}")
        d = self.dims
        return [
            (params[ws].reshape(d[k], d[k + 1]), params[bs])
            for k, (ws, bs) in enumerate(self.layout())
        ]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden_dims"] = list(self.hidden_dims)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            output_dim=int(d["output_dim"]),
            activation=d.get("activation", "tanh"),
            final_layer_zero_init=bool(d.get("final_layer_zero_init", False)),
        )


def net_init(spec: NetworkSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases; optionally a zero final layer."""
    gen = _rng.stream(seed, "net-init")
    params = np.zeros(spec.n_params)
    d = spec.dims
    layout = spec.layout()
    for k, (ws, _) in enumerate(layout):
        limit = math.sqrt(6.0 / (d[k] + d[k + 1]))
        params[ws] = gen.uniform(-limit, limit, size=d[k] * d[k + 1])
    if spec.final_layer_zero_init:
        ws, bs = layout[-1]
        params[ws] = 0.0
        params[bs] = 0.0
    return params


# ---------------------------------------------------------------------------
# primitives


def affine(x, w, b):
    y = x @ w + b

    def pullback(gy):
        return gy @ w.T, x.T @ gy, gy.sum(axis=0)

    return check_finite("affine", y), pullback


def tanh(x):
    y = np.tanh(x)
    return y, lambda gy: gy * (1.0 - y * y)


def gelu(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    y = x * cdf
    return y, lambda gy: gy * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x))


ACTIVATIONS: dict[str, Callable] = {"tanh": tanh, "gelu": gelu}


def sq_norm(x):
    """Sum of squares of all entries."""
    return check_finite("sq_norm", float(np.sum(x * x))), lambda g: 2.0 * g * x


def gaussian_logpdf(x, mean, var):
    """Element-wise log N(x; mean, var); pullback w.r.t. (x, mean)."""
    if np.any(var <= 0):
        raise ValueError("variance must be positive")
    diff = x - mean
    y = -0.5 * (np.log(2.0 * np.pi * var) + diff * diff / var)

    def pullback(gy):
        g = gy * diff / var
        return -g, g

    return check_finite("gaussian_logpdf", y), pullback


def clip(x, lo, hi):
    y = np.clip(x, lo, hi)
    inside = (x > lo) & (x < hi)
    return y, lambda gy: gy * inside


def minimum(a, b):
    left = a <= b
    y = np.where(left, a, b)
    return y, lambda gy: (gy * left, gy * ~left)


def exp(x):
    with np.errstate(over="ignore"):
        y = np.exp(x)
    return check_finite("exp", y), lambda gy: gy * y


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MLPCache:
    inputs: list = field(default_factory=list)
    pullbacks: list = field(default_factory=list)


def mlp_forward(spec: NetworkSpec, params: np.ndarray, x: np.ndarray):
    """Batched forward pass. ``x`` is (batch, input_dim); returns (y, cache)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"input must be (batch, {spec.input_dim}), got {x.shape}")
    act = ACTIVATIONS[spec.activation]
    cache = MLPCache()
    h = x
    layers = spec.unpack(params)
    for k, (w, b) in enumerate(layers):
        h, pb_aff = affine(h, w, b)
        cache.pullbacks.append(pb_aff)
        if k < len(layers) - 1:
            h, pb_act = act(h)
            cache.pullbacks.append(pb_act)
    return h, cache


def mlp_backward(spec: NetworkSpec, cache: MLPCache, gy: np.ndarray):
    """Return (gradient w.r.t. the flat parameters, gradient w.r.t. the input)."""
    grad = np.zeros(spec.n_params)
    layout = spec.layout()
    g = gy
    n_layers = len(layout)
    pbs = list(cache.pullbacks)
    for k in reversed(range(n_layers)):
        if k < n_layers - 1:
            g = pbs.pop()(g)
        g, gw, gb = pbs.pop()(g)
        ws, bs = layout[k]
        grad[ws] = gw.ravel()
        grad[bs] = gb
    return grad, g


def net_forward(params: np.ndarray, spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of row vectors."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        if x.shape[0] != spec.input_dim:
            raise ValueError(f"input length {x.shape[0]} != {spec.input_dim}")
        x = x[None, :]
    y, _ = mlp_forward(spec, params, x)
    return y[0] if single else y


# ---------------------------------------------------------------------------
# gradients

# An objective maps a flat parameter vector to (value, gradient).
Objective = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


def loss_grad(params: np.ndarray, objective: Objective) -> tuple[float, np.ndarray]:
    value, grad = objective(params)
    check_finite("objective", value)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
    check_finite("gradient", grad)
    return float(value), grad


def finite_diff_grad(params: np.ndarray, objective: Objective, h: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    params = np.array(params, dtype=float)
    grad = np.empty_like(params)
    for i in range(params.size):
        old = params[i]
        params[i] = old + h
        fp = objective(params)[0]
        params[i] = old - h
        fm = objective(params)[0]
        params[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)

    def to_dict(self) -> dict:
        return {
            "first_moment": self.first_moment.tolist(),
            "second_moment": self.second_moment.tolist(),
            "step_count": self.step_count,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps_adam": self.eps_adam,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(
            np.asarray(d["first_moment"], dtype=float),
            np.asarray(d["second_moment"], dtype=float),
            int(d["step_count"]),
            float(d["lr"]),
            float(d["beta1"]),
            float(d["beta2"]),
            float(d["eps_adam"]),
        )


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, maximize: bool = False):
    """One bias-corrected Adam step; returns ``(new_params, new_state)``.

    Inputs are not modified. With ``maximize`` the step ascends ``grad``.
    """
    check_finite("adam_step", grad)
    g = -grad if maximize else grad
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_adam)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps_adam)
    return new_params, new_state


# ---------------------------------------------------------------------------
# checkpoints
#
# JSON document:
#   {"format": "flowrl-net", "format_version": 1,
#    "networks": {name: {"spec": NetworkSpec dict, "params": [float, ...]}},
#    "optimizer": {name: AdamState dict} | {},
#    "metadata": {...}}
# Floats are written with Python's shortest round-trip repr, so a save/load
# cycle reproduces every parameter bit for bit.


def save_checkpoint(path, networks: dict, optimizer: dict | None = None, metadata: dict | None = None):
    doc = {
        "format": "flowrl-net",
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "networks": {
            name: {"spec": spec.to_dict(), "params": np.asarray(p, dtype=float).tolist()}
            for name, (spec, p) in networks.items()
        },
        "optimizer": {name: st.to_dict() for name, st in (optimizer or {}).items()},
        "metadata": metadata or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path):
    """Return ``(networks, optimizer, metadata)`` as saved by :func:`save_checkpoint`."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "flowrl-net":
        raise ValueError(f"{path}: not a flowrl checkpoint")
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('format_version')}")
    networks = {
        name: (NetworkSpec.from_dict(e["spec"]), np.asarray(e["params"], dtype=float))
        for name, e in doc["networks"].items()
    }
    optimizer = {name: AdamState.from_dict(s) for name, s in doc.get("optimizer", {}).items()}
    return networks, optimizer, doc.get("metadata", {})
