"""Samplers, stochastic policies and trajectory rollout.

Single-step updates are plain functions of the current state and the drift
pieces (velocity, denoiser, annealing factor), so they can be checked against
closed forms without a network. :class:`Policy` bundles a trained model with
its integration mode, and :func:`rollout_batch` runs many trajectories in one
padded batch. Every trajectory draws its initial state and its noise from its
own counter-based stream, so results do not depend on batching.

Torus transitions use the unwrapped Gaussian evaluated at the minimum-image
displacement. With per-step standard deviations at most 0.05 (enforced by
:func:`check_noise_bound`), the neglected wrapped mass is below 1e-80.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import rng as _rng
from .interpolants import EUCLIDEAN, TORUS, InterpolantSchedule, ScheduleKind, min_image, schedule_eval, wrap
from .model import Batch, FlowModel, ScheduleNet, stack
from .toyworld import CellPrior, Composition, ToyStructure, sample_base

GAMMA_FLOOR = 1e-4
VAR_FLOOR_REL = 1e-12
CELL_FLOOR = 1e-3
MAX_TORUS_STEP_STD = 0.05


class NoiseKind(str, Enum):
    CONSTANT = "constant"
    SQRT_RATIO = "sqrt_ratio"


@dataclass(frozen=True)
class NoiseSchedule:
    kind: NoiseKind = NoiseKind.SQRT_RATIO
    a: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.a < 0:
            raise ValueError("noise scale must be non-negative")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "a": self.a}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(NoiseKind(d["kind"]), float(d["a"]))


def noise_sigma(n: NoiseSchedule, t, dt: float | None = None):
    """sigma(t); the square-root schedule clamps ``t`` from below at ``dt / 2``."""
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    if n.kind is NoiseKind.CONSTANT:
        return np.full_like(t, n.a)[()] if t.ndim else float(n.a)
    floor = 0.5 * dt if dt is not None else 1e-3
    tc = np.maximum(t, floor)
    out = n.a * np.sqrt((1.0 - tc) / tc)
    return out if out.ndim else float(out)


class Mode(str, Enum):
    ODE = "ode"
    SCORE_SDE = "score_sde"
    PERTURBED_ODE = "perturbed_ode"
    ANNEALED = "annealed"


# ---------------------------------------------------------------------------
# single steps


@dataclass(frozen=True)
class Transition:
    t: float
    x: np.ndarray
    mean: np.ndarray
    var: np.ndarray | None
    action: np.ndarray
    log_prob: float | None


def _advance(x, dx, geom):
    return wrap(x + dx) if geom == TORUS else x + dx


def euler_step(x, b, dt, geom=EUCLIDEAN):
    """``x + b * dt`` (wrapped on the torus)."""
    return _advance(np.asarray(x, dtype=float), np.asarray(b, dtype=float) * dt, geom)


def transition_logprob(mean, var, action, geom=EUCLIDEAN, axis=None):
    """Sum of per-component Gaussian log-densities of ``action``."""
    mean = np.asarray(mean, dtype=float)
    var = np.broadcast_to(np.asarray(var, dtype=float), mean.shape)
    if np.any(var <= 0):
        raise ValueError("variance must be positive")
    diff = np.asarray(action, dtype=float) - mean
    if geom == TORUS:
        diff = min_image(diff)
    lp = -0.5 * (np.log(2.0 * np.pi * var) + diff * diff / var)
    return np.sum(lp, axis=axis)


def _gaussian_transition(t, x, mean, var, xi, geom):
    action = mean + np.sqrt(var) * xi
    if geom == TORUS:
        action = wrap(action)
    return Transition(t, x, mean, var, action, float(transition_logprob(mean, var, action, geom)))


def euler_maruyama_step(x, b, z, sigma, gamma, dt, xi, geom=EUCLIDEAN, t=math.nan):
    """Score-corrected update ``x + [b - sigma^2 / (2 gamma) z] dt + sigma sqrt(dt) xi``."""
    if gamma <= GAMMA_FLOOR:
        raise ValueError(f"gamma(t) = {gamma} is below the endpoint guard {GAMMA_FLOOR}")
    x = np.asarray(x, dtype=float)
    drift = np.asarray(b, dtype=float) - sigma**2 / (2.0 * gamma) * np.asarray(z, dtype=float)
    mean = _advance(x, drift * dt, geom)
    if sigma == 0:
        raise ValueError("sigma(t) = 0: the transition is deterministic and has no log-probability")
    var = np.full_like(x, sigma**2 * dt)
    return _gaussian_transition(t, x, mean, var, np.asarray(xi, dtype=float), geom)


def perturbed_ode_step(x, b, sigma, dt, xi, geom=EUCLIDEAN, t=math.nan):
    """Velocity-only surrogate ``x + b dt + sigma sqrt(dt) xi``."""
    if sigma == 0:
        raise ValueError("sigma(t) = 0: the transition is deterministic and has no log-probability")
    x = np.asarray(x, dtype=float)
    mean = _advance(x, np.asarray(b, dtype=float) * dt, geom)
    var = np.full_like(x, sigma**2 * dt)
    return _gaussian_transition(t, x, mean, var, np.asarray(xi, dtype=float), geom)


def annealed_step(x, b, s, sigma, dt, xi, geom=EUCLIDEAN, t=math.nan):
    """``x + (1 + s) b dt`` plus noise with per-component std ``sigma |b| sqrt(dt)``."""
    x = np.asarray(x, dtype=float)
    b = np.asarray(b, dtype=float)
    mean = _advance(x, (1.0 + s) * b * dt, geom)
    var = np.maximum(sigma**2 * b * b * dt, VAR_FLOOR_REL * dt)
    return _gaussian_transition(t, x, mean, var, np.asarray(xi, dtype=float), geom)


def annealed_var(b, sigma, dt):
    return np.maximum(sigma**2 * b * b * dt, VAR_FLOOR_REL * dt)


# ---------------------------------------------------------------------------
# policies


@dataclass
class Policy:
    model: FlowModel
    params: np.ndarray
    schedule: InterpolantSchedule
    mode: Mode = Mode.ODE
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)
    cell_prior: CellPrior = field(default_factory=CellPrior)
    ref_params: np.ndarray | None = None
    anneal_net: ScheduleNet | None = None
    anneal_params: np.ndarray | None = None
    handcrafted_anneal: tuple[float, float] | None = None
    lattice_noise: NoiseSchedule = field(default_factory=lambda: NoiseSchedule(NoiseKind.CONSTANT, 0.0))

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.ref_params is None:
            self.ref_params = self.params
        self.validate()

    def validate(self):
        if self.mode is Mode.SCORE_SDE:
            if not self.model.has_denoiser:
                raise ValueError("score_sde mode needs a model with a denoiser head")
            if self.schedule.kind is not ScheduleKind.TRIG_GAMMA or not self.schedule.has_noise:
                raise ValueError("score_sde mode needs the trig_gamma interpolant")
        if self.mode is Mode.ANNEALED and self.anneal_params is None and self.handcrafted_anneal is None:
            raise ValueError("annealed mode needs a learned or handcrafted schedule")
        if self.anneal_params is not None and self.anneal_net is None:
            raise ValueError("anneal_params given without anneal_net")

    @property
    def shares_reference(self) -> bool:
        return self.ref_params is self.params

    def anneal_values(self, times) -> np.ndarray:
        """(T, 2) annealing offsets ``s`` for (positions, lattice) at ``times``."""
        times = np.asarray(times, dtype=float).reshape(-1)
        if self.anneal_params is not None:
            return self.anneal_net(self.anneal_params, times)
        if self.handcrafted_anneal is not None:
            return np.outer(times, np.asarray(self.handcrafted_anneal, dtype=float))
        return np.zeros((times.size, 2))

    def copy_with(self, **kw) -> "Policy":
        return replace(self, **kw)


def stochastic_steps(policy: Policy, n_steps: int) -> np.ndarray:
    """Which position steps carry a Gaussian transition."""
    dt = 1.0 / n_steps
    times = np.arange(n_steps) * dt
    if policy.mode is Mode.ODE:
        return np.zeros(n_steps, dtype=bool)
    if policy.mode is Mode.ANNEALED:
        return np.ones(n_steps, dtype=bool) if policy.noise.a > 0 else np.zeros(n_steps, dtype=bool)
    sig = np.asarray(noise_sigma(policy.noise, times, dt))
    flags = sig > 0
    if policy.mode is Mode.SCORE_SDE:
        gamma = schedule_eval(policy.schedule, times)[2]
        flags &= gamma > GAMMA_FLOOR
    return flags


def check_noise_bound(policy: Policy, n_steps: int, bound: float = MAX_TORUS_STEP_STD):
    """Reject position noise whose per-step std on the torus exceeds ``bound``.

    In annealed mode the std also scales with ``|b|``; the static check
    assumes ``|b| <= 1`` and the rollout re-checks the actual values.
    """
    dt = 1.0 / n_steps
    times = np.arange(n_steps) * dt
    sig = np.asarray(noise_sigma(policy.noise, times, dt)) * math.sqrt(dt)
    flags = stochastic_steps(policy, n_steps)
    if flags.any() and float(sig[flags].max()) > bound:
        raise ValueError(
            f"position noise std per step {float(sig[flags].max()):.4g} exceeds {bound} "
            f"(noise={policy.noise.kind.value}:{policy.noise.a}, n_steps={n_steps})"
        )


# ---------------------------------------------------------------------------
# rollout


@dataclass
class RolloutBatch:
    """Recorded trajectories; arrays are indexed (trajectory, step, atom, axis)."""

    species: np.ndarray
    mask: np.ndarray
    n_steps: int
    times: np.ndarray
    stochastic: np.ndarray  # (N_t,) position steps with a Gaussian transition
    terminal: Batch
    x0: Batch
    pos_states: np.ndarray | None = None  # (B, N_t + 1, N, d)
    cell_states: np.ndarray | None = None  # (B, N_t + 1, d)
    pos_mean: np.ndarray | None = None
    pos_var: np.ndarray | None = None
    pos_logp: np.ndarray | None = None  # (B, N_t, N) per-atom log-probabilities
    lat_mean: np.ndarray | None = None
    lat_var: np.ndarray | None = None
    lat_logp: np.ndarray | None = None  # (B, N_t)
    lat_stochastic: bool = False
    features: np.ndarray | None = None  # (B, N_t, N, F) at the recorded states
    pair_features: np.ndarray | None = None  # (B, N_t, N, N, P) for pair models
    ref_velocity: np.ndarray | None = None
    ref_denoiser: np.ndarray | None = None
    ref_lattice: np.ndarray | None = None

    @property
    def dt(self) -> float:
        return 1.0 / self.n_steps

    @property
    def size(self) -> int:
        return int(self.mask.shape[0])

    def subset(self, idx) -> "RolloutBatch":
        idx = np.asarray(idx)

        def pick(a):
            return None if a is None else a[idx]

        return RolloutBatch(
            self.species[idx], self.mask[idx], self.n_steps, self.times, self.stochastic,
            Batch(self.terminal.species[idx], self.terminal.mask[idx], self.terminal.frac[idx], self.terminal.cell[idx]),
            Batch(self.x0.species[idx], self.x0.mask[idx], self.x0.frac[idx], self.x0.cell[idx]),
            pick(self.pos_states), pick(self.cell_states), pick(self.pos_mean), pick(self.pos_var),
            pick(self.pos_logp), pick(self.lat_mean), pick(self.lat_var), pick(self.lat_logp),
            self.lat_stochastic, pick(self.features), pick(self.pair_features), pick(self.ref_velocity),
            pick(self.ref_denoiser), pick(self.ref_lattice),
        )


def _noise_draws(seeds, x0: Batch, n_steps):
    B, N, d = x0.frac.shape
    xi_pos = np.zeros((B, n_steps, N, d))
    xi_lat = np.zeros((B, n_steps, d))
    for b, seed in enumerate(seeds):
        gen = seed if isinstance(seed, np.random.Generator) else _rng.stream(seed, "rollout-noise")
        n = int(x0.mask[b].sum())
        xi_pos[b, :, :n] = gen.standard_normal((n_steps, n, d))
        xi_lat[b] = gen.standard_normal((n_steps, d))
    return xi_pos, xi_lat


def _gauss_lp(mean, var, action, geom):
    diff = action - mean
    if geom == TORUS:
        diff = min_image(diff)
    return -0.5 * (np.log(2.0 * np.pi * var) + diff * diff / var)


def rollout_batch(policy: Policy, x0: Batch, n_steps: int, seeds, record: bool = True) -> RolloutBatch:
    """Integrate every structure in ``x0`` from t = 0 to 1 with ``n_steps`` steps.

    ``seeds`` holds one noise stream seed (or generator) per trajectory.
    Positions follow the policy mode. The lattice follows the frozen
    reference velocity with plain Euler steps, except in annealed mode where
    it gets its own annealing factor and noise.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    check_noise_bound(policy, n_steps)
    model = policy.model
    dt = 1.0 / n_steps
    times = np.arange(n_steps) * dt
    stochastic = stochastic_steps(policy, n_steps)
    mode = policy.mode
    annealed = mode is Mode.ANNEALED
    lat_stochastic = annealed and policy.lattice_noise.a > 0
    B, N, d = x0.frac.shape
    mask = x0.mask
    mf = mask[..., None].astype(float)
    xi_pos, xi_lat = _noise_draws(seeds, x0, n_steps)
    s_vals = policy.anneal_values(times) if annealed else None
    need_theta = not annealed and not policy.shares_reference
    safe = np.where(mask[..., None], 1.0, 0.0)  # padded components get unit variance

    rec = {}
    if record:
        rec["pos_states"] = np.zeros((B, n_steps + 1, N, d))
        rec["cell_states"] = np.zeros((B, n_steps + 1, d))
        rec["pos_mean"] = np.zeros((B, n_steps, N, d))
        rec["pos_var"] = np.ones((B, n_steps, N, d))
        rec["pos_logp"] = np.zeros((B, n_steps, N))
        rec["features"] = np.zeros((B, n_steps, N, model.featurizer.n_features))
        if model.pair_net:
            rec["pair_features"] = np.zeros((B, n_steps, N, N, model.featurizer.n_pair_features))
        rec["ref_velocity"] = np.zeros((B, n_steps, N, d))
        rec["ref_lattice"] = np.zeros((B, n_steps, d))
        if model.has_denoiser:
            rec["ref_denoiser"] = np.zeros((B, n_steps, N, d))
        if lat_stochastic:
            rec["lat_mean"] = np.zeros((B, n_steps, d))
            rec["lat_var"] = np.ones((B, n_steps, d))
            rec["lat_logp"] = np.zeros((B, n_steps))

    pos, cell = x0.frac.copy(), x0.cell.copy()
    for k, t in enumerate(times):
        state = x0.with_state(pos, cell)
        feats = model.features(t, state)
        ref, _ = model.forward_features(policy.ref_params, feats, mask)
        cur = model.forward_features(policy.params, feats, mask)[0] if need_theta else ref
        if record:
            rec["pos_states"][:, k] = pos
            rec["cell_states"][:, k] = cell
            rec["features"][:, k] = feats.atom
            if model.pair_net:
                rec["pair_features"][:, k] = feats.pair
            rec["ref_velocity"][:, k] = ref["velocity"]
            rec["ref_lattice"][:, k] = ref["lattice"]
            if model.has_denoiser:
                rec["ref_denoiser"][:, k] = ref["denoiser"]

        # positions
        if annealed:
            b = ref["velocity"]
            sig = float(noise_sigma(policy.noise, t, dt))
            mean = wrap(pos + (1.0 + s_vals[k, 0]) * b * dt)
            var = annealed_var(b, sig, dt) if stochastic[k] else None
            if var is not None and float(np.sqrt(var[mask].max())) > MAX_TORUS_STEP_STD:
                raise ValueError(f"annealed position noise std exceeds {MAX_TORUS_STEP_STD} at step {k}")
        else:
            drift = cur["velocity"]
            sig = float(noise_sigma(policy.noise, t, dt)) if stochastic[k] else 0.0
            if mode is Mode.SCORE_SDE and stochastic[k]:
                gamma = float(schedule_eval(policy.schedule, t)[2])
                drift = drift - sig**2 / (2.0 * gamma) * cur["denoiser"]
            mean = wrap(pos + drift * dt)
            var = np.full_like(pos, sig**2 * dt) if stochastic[k] else None
        if var is not None:
            var = np.where(mask[..., None], var, 1.0)
            new_pos = wrap(mean + np.sqrt(var) * xi_pos[:, k] * safe)
        else:
            new_pos = mean
        new_pos = np.where(mask[..., None], new_pos, 0.0)
        if record:
            rec["pos_mean"][:, k] = mean * mf
            if var is not None:
                rec["pos_var"][:, k] = var
                rec["pos_logp"][:, k] = _gauss_lp(mean, var, new_pos, TORUS).sum(axis=-1) * mask

        # lattice
        b_lat = ref["lattice"]
        if annealed:
            lat_mean = cell + (1.0 + s_vals[k, 1]) * b_lat * dt
            if lat_stochastic:
                lsig = float(noise_sigma(policy.lattice_noise, t, dt))
                lvar = annealed_var(b_lat, lsig, dt)
                new_cell = lat_mean + np.sqrt(lvar) * xi_lat[:, k]
                if record:
                    rec["lat_mean"][:, k] = lat_mean
                    rec["lat_var"][:, k] = lvar
                    rec["lat_logp"][:, k] = _gauss_lp(lat_mean, lvar, new_cell, EUCLIDEAN).sum(axis=-1)
            else:
                new_cell = lat_mean
        else:
            new_cell = cell + b_lat * dt
        pos, cell = new_pos, np.maximum(new_cell, CELL_FLOOR)

    terminal = x0.with_state(pos, cell)
    if record:
        rec["pos_states"][:, n_steps] = pos
        rec["cell_states"][:, n_steps] = cell
    return RolloutBatch(
        x0.species, mask, n_steps, times, stochastic, terminal, x0,
        lat_stochastic=lat_stochastic, **rec,
    )


@dataclass
class Trajectory:
    composition: Composition
    x0: ToyStructure
    transitions: list[Transition]
    lattice_transitions: list[Transition]
    terminal: ToyStructure
    n_steps: int

    @property
    def dt(self) -> float:
        return 1.0 / self.n_steps


def trajectory_from_batch(rb: RolloutBatch, b: int) -> Trajectory:
    """Unpack trajectory ``b`` of a recorded batch into per-step transitions."""
    m = rb.mask[b]
    n = int(m.sum())
    trans, lat = [], []
    for k in range(rb.n_steps):
        x = rb.pos_states[b, k, :n]
        action = rb.pos_states[b, k + 1, :n]
        if rb.stochastic[k]:
            var = rb.pos_var[b, k, :n]
            lp = float(rb.pos_logp[b, k, :n].sum())
        else:
            var, lp = None, None
        trans.append(Transition(float(rb.times[k]), x, rb.pos_mean[b, k, :n], var, action, lp))
        c = rb.cell_states[b, k]
        if rb.lat_stochastic:
            lat.append(Transition(float(rb.times[k]), c, rb.lat_mean[b, k], rb.lat_var[b, k], rb.cell_states[b, k + 1], float(rb.lat_logp[b, k])))
        else:
            lat.append(Transition(float(rb.times[k]), c, rb.cell_states[b, k + 1], None, rb.cell_states[b, k + 1], None))
    x0 = rb.x0.structure(b)
    return Trajectory(x0.composition, x0, trans, lat, rb.terminal.structure(b), rb.n_steps)


def base_batch(policy: Policy, compositions, seed: int, n_max: int | None = None, offset: int = 0) -> Batch:
    """Initial states; sample ``i`` uses stream ``(seed, "x0", offset + i)``."""
    structs = [
        sample_base(c, policy.cell_prior, _rng.stream(seed, "x0", offset + i), dim=policy.model.dim)
        for i, c in enumerate(compositions)
    ]
    return stack(structs, n_max)


def rollout(policy: Policy, composition: Composition, n_steps: int, seed: int, record: bool = True) -> Trajectory:
    x0 = base_batch(policy, [composition], seed)
    rb = rollout_batch(policy, x0, n_steps, [_rng.stream(seed, "noise", 0)], record=True)
    return trajectory_from_batch(rb, 0) if record else Trajectory(
        composition, x0.structure(0), [], [], rb.terminal.structure(0), n_steps
    )


def sample(policy: Policy, compositions, n_steps: int, seed: int, chunk: int = 256) -> list[ToyStructure]:
    """Terminal structures for each composition; sample ``i`` is independent of chunking."""
    compositions = list(compositions)
    if not compositions:
        return []
    n_max = max(c.n_atoms for c in compositions)
    out = []
    for start in range(0, len(compositions), chunk):
        part = compositions[start : start + chunk]
        x0 = base_batch(policy, part, seed, n_max, offset=start)
        seeds = [_rng.stream(seed, "noise", start + i) for i in range(len(part))]
        rb = rollout_batch(policy, x0, n_steps, seeds, record=False)
        out.extend(rb.terminal.structures())
    return out
