"""Group-relative policy optimization of flow samplers.

Rewards are turned into per-group standardized advantages, and the policy
maximizes a clipped likelihood-ratio surrogate over recorded transitions,
optionally minus a Gaussian KL to the frozen reference sampler and a
denoiser-distillation penalty. All three terms are averaged over steps and
trajectories and, inside a structure, over its stochastic units (one unit
per atom, plus one for the lattice when the lattice transitions are
stochastic), so a structure weighs the same whatever its size.

Two per-structure rules are supported:

* ``advantage_per_atom`` clips every unit's ratio separately and averages
  the clipped terms, which equals weighting the advantage by ``1 / units``.
* ``per_atom_ratio_average`` averages the unit ratios first and clips the
  averaged ratio once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import diffnet
from . import rng as _rng
from .dynamics import Mode, NoiseSchedule, NoiseKind, Policy, RolloutBatch, noise_sigma, rollout_batch
from .evalmetrics import reference_energies, structure_energies
from .interpolants import min_image, schedule_eval
from .matching import MatcherTolerances, periodic_rmsd
from .model import Features, stack
from .toyworld import ReferenceSet, ValidityParams, sample_base

STD_EPS = 1e-8
DEGENERATE_STD = 1e-12


class Normalization(str, Enum):
    ADVANTAGE_PER_ATOM = "advantage_per_atom"
    PER_ATOM_RATIO_AVERAGE = "per_atom_ratio_average"


class RewardKind(str, Enum):
    ENERGY = "energy"
    CRMSE = "crmse"


@dataclass(frozen=True)
class RewardSpec:
    penalty: float = 3.0
    band: float = 3.0
    crmse_offset: float = 0.5
    stol: float = 0.5

    def __post_init__(self):
        if self.band <= 0:
            raise ValueError("band must be positive")


@dataclass(frozen=True)
class RLConfig:
    group_size: int = 16
    groups: int = 8
    epochs: int = 2
    minibatches: int = 2
    clip_eps: float = 0.2
    policy_weight: float = 1.0
    kl_weight: float = 0.0
    distill_weight: float = 0.0
    normalization: Normalization = Normalization.ADVANTAGE_PER_ATOM
    lr: float = 3e-4
    noise: NoiseSchedule = field(default_factory=lambda: NoiseSchedule(NoiseKind.SQRT_RATIO, 0.01))
    ref_noise: NoiseSchedule = field(default_factory=lambda: NoiseSchedule(NoiseKind.SQRT_RATIO, 0.01))
    lattice_noise: NoiseSchedule = field(default_factory=lambda: NoiseSchedule(NoiseKind.CONSTANT, 0.0))
    ref_lattice_noise: NoiseSchedule = field(default_factory=lambda: NoiseSchedule(NoiseKind.CONSTANT, 0.0))
    reward: RewardKind = RewardKind.ENERGY
    reward_spec: RewardSpec = field(default_factory=RewardSpec)
    mode: Mode = Mode.PERTURBED_ODE
    n_steps: int = 50
    iterations: int = 200
    seeds: tuple[int, ...] = (1, 2, 3)
    shared_x0: bool = True
    val_every: int = 10
    val_compositions: int = 24
    val_samples: int = 48

    def __post_init__(self):
        for name, enum in (("normalization", Normalization), ("reward", RewardKind), ("mode", Mode)):
            object.__setattr__(self, name, enum(getattr(self, name)))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if min(self.policy_weight, self.kl_weight, self.distill_weight) < 0:
            raise ValueError("objective weights must be non-negative")
        if self.groups < 1 or self.epochs < 1 or self.minibatches < 1:
            raise ValueError("groups, epochs and minibatches must be >= 1")
        if self.mode is Mode.ODE:
            raise ValueError("reinforcement needs a stochastic sampling mode")
        if self.kl_weight > 0 and self.ref_noise.a == 0:
            raise ValueError("the KL term needs a positive reference noise scale")


# ---------------------------------------------------------------------------
# rewards and advantages


def reward_energy(structures, spec: RewardSpec = RewardSpec(), eparams=None, vparams: ValidityParams = ValidityParams()):
    """Negative per-atom energy, with invalid members at ``-penalty``.

    Valid energies are clipped to ``mean +- band * std`` of the valid members.
    """
    from .toyworld import EnergyModelParams

    e, valid = structure_energies(structures, eparams or EnergyModelParams(), vparams)
    out = np.full(len(structures), -spec.penalty)
    if valid.any():
        ev = e[valid]
        mu, sd = ev.mean(), ev.std()
        out[valid] = -np.clip(ev, mu - spec.band * sd, mu + spec.band * sd)
    return out


def reward_crmse(structures, refs: ReferenceSet, spec: RewardSpec = RewardSpec(), tol: MatcherTolerances | None = None, split=None):
    """``offset - rmsd`` to the closest same-composition polymorph; no match costs ``stol``."""
    tol = tol or MatcherTolerances(stol=spec.stol)
    out = np.empty(len(structures))
    for i, s in enumerate(structures):
        polys = refs.polymorphs(s.composition, split)
        if not polys:
            raise KeyError(f"composition {s.composition.label()} absent from the reference set")
        best = spec.stol
        for p in polys:
            r = periodic_rmsd(s, p.structure, tol)
            if r is not None and r < best:
                best = r
        out[i] = spec.crmse_offset - best
    return out


def validation_reward(structures, cfg: "RLConfig", refs: ReferenceSet, vparams: ValidityParams = ValidityParams()) -> float:
    """Checkpoint-comparable mean reward on a fixed validation set.

    The group reward clips energies against batch statistics, which makes it
    meaningless across checkpoints. Here a valid sample scores its energy per
    atom relative to the composition reference, capped at ``penalty``, and an
    invalid one scores ``penalty``; the result is the negated mean. The cRMSE
    reward needs no batch statistics and is averaged directly.
    """
    if cfg.reward is RewardKind.CRMSE:
        return float(np.mean(reward_crmse(structures, refs, cfg.reward_spec)))
    e, valid = structure_energies(structures, refs.energy_params, vparams)
    rel = np.where(valid, np.minimum(e - reference_energies(structures, refs), cfg.reward_spec.penalty), cfg.reward_spec.penalty)
    return float(-np.mean(rel))


def advantages(rewards):
    """Standardized group advantages; returns ``(adv, degenerate)``."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    sd = r.std()
    if sd < DEGENERATE_STD:
        return np.zeros_like(r), True
    # the floor only guards near-degenerate groups; above it the std is exactly 1
    return (r - r.mean()) / max(sd, STD_EPS), False


def gaussian_kl(mu_p, var_p, mu_q, var_q, diff=None):
    """Element-wise KL[N(mu_p, var_p) || N(mu_q, var_q)]."""
    var_p = np.asarray(var_p, dtype=float)
    var_q = np.asarray(var_q, dtype=float)
    if np.any(var_p <= 0) or np.any(var_q <= 0):
        raise ValueError("variances must be positive")
    d = np.asarray(mu_p, dtype=float) - np.asarray(mu_q, dtype=float) if diff is None else diff
    return 0.5 * (np.log(var_q / var_p) + (var_p + d * d) / var_q - 1.0)


# ---------------------------------------------------------------------------
# clipped surrogate on per-unit log-ratios


def clipped_surrogate(log_ratio, adv, unit_mask, eps: float, normalization: Normalization):
    """Per-structure clipped terms and their pullback.

    ``log_ratio`` is (B, T, U) new-minus-old log-probabilities per unit,
    ``adv`` (B,) and ``unit_mask`` (B, U). Masked units are ignored. Returns
    ``(terms (B, T), pullback, clipped (B, T, U))`` where ``clipped`` marks
    units whose clipped branch is the active one.
    """
    normalization = Normalization(normalization)
    lr = np.asarray(log_ratio, dtype=float)
    B, T, U = lr.shape
    m = unit_mask.astype(float)[:, None, :]
    n_units = unit_mask.sum(axis=1).astype(float)[:, None]  # (B, 1)
    A = np.asarray(adv, dtype=float)[:, None, None]
    with np.errstate(over="ignore"):
        q = np.exp(lr)
    if not np.all(np.isfinite(q)):
        bad = np.argwhere(~np.isfinite(q))[0]
        raise diffnet.NonFiniteError(f"likelihood ratio (trajectory {bad[0]}, step {bad[1]})")

    def q_back(g):
        return g * q

    if normalization is Normalization.ADVANTAGE_PER_ATOM:
        qc, c_back = diffnet.clip(q, 1.0 - eps, 1.0 + eps)
        term, m_back = diffnet.minimum(q * A, qc * A)
        terms = (term * m).sum(axis=-1) / n_units
        clipped = (q * A > qc * A) & unit_mask[:, None, :]

        def pullback(g_terms):
            g_term = (g_terms / n_units)[..., None] * m
            ga, gb = m_back(g_term)
            return q_back(ga * A + c_back(gb * A))

        return terms, pullback, clipped
    qbar = (q * m).sum(axis=-1) / n_units  # (B, T)
    A2 = A[..., 0]
    qc, c_back = diffnet.clip(qbar, 1.0 - eps, 1.0 + eps)
    terms, m_back = diffnet.minimum(qbar * A2, qc * A2)
    clipped = np.broadcast_to((qbar * A2 > qc * A2)[..., None], lr.shape) & unit_mask[:, None, :]

    def pullback(g_terms):
        ga, gb = m_back(g_terms)
        g_qbar = ga * A2 + c_back(gb * A2)
        return q_back((g_qbar / n_units)[..., None] * m)

    return terms, pullback, clipped


# ---------------------------------------------------------------------------
# objective over recorded rollouts


@dataclass
class ObjectiveResult:
    value: float
    grad: np.ndarray
    policy_term: float
    kl: float
    distill: float
    clip_fraction: float


def _pos_lp(diff, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + diff * diff / var)


def _score_coeff(policy: Policy, noise: NoiseSchedule, times, dt):
    """Per-step ``sigma^2 / (2 gamma)`` for the score-corrected drift (0 where unused)."""
    sig = np.asarray(noise_sigma(noise, times, dt))
    gamma = schedule_eval(policy.schedule, times)[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(gamma > 1e-4, sig**2 / (2.0 * gamma), 0.0)
    return c


def objective(policy: Policy, rb: RolloutBatch, adv, cfg: RLConfig, theta=None) -> ObjectiveResult:
    """``policy_weight * surrogate - kl_weight * KL - distill_weight * distill`` and its gradient.

    ``theta`` defaults to the policy's trainable vector: the flow parameters,
    or the annealing-network parameters in annealed mode.
    """
    annealed = policy.mode is Mode.ANNEALED
    if theta is None:
        theta = policy.anneal_params if annealed else policy.params
    dt = rb.dt
    B, T = rb.size, rb.n_steps
    N, d = rb.mask.shape[1], rb.x0.frac.shape[2]
    mask = rb.mask
    mf3 = mask[:, None, :, None].astype(float)
    step_w = rb.stochastic.astype(float)  # (T,)
    x = rb.pos_states[:, :T]
    action = rb.pos_states[:, 1:]
    var = rb.pos_var
    norm = 1.0 / (B * T)

    lat_units = rb.lat_stochastic
    U = N + (1 if lat_units else 0)
    unit_mask = np.concatenate([mask, np.ones((B, 1), dtype=bool)], axis=1) if lat_units else mask
    grad_heads = None

    if annealed:
        s_vals, s_cache = policy.anneal_net.forward(theta, rb.times)  # (T, 2)
        b = rb.ref_velocity
        mean = x + (1.0 + s_vals[None, :, None, 0:1]) * b * dt
    else:
        pair = None if rb.pair_features is None else rb.pair_features.reshape(B * T, N, N, -1)
        feats = Features(rb.features.reshape(B * T, N, -1), pair)
        tiled = np.repeat(mask, T, axis=0)
        heads, aux = policy.model.forward_features(theta, feats, tiled)
        v = heads["velocity"].reshape(B, T, N, d)
        drift = v
        if policy.mode is Mode.SCORE_SDE:
            c = _score_coeff(policy, policy.noise, rb.times, dt)[None, :, None, None]
            zt = heads["denoiser"].reshape(B, T, N, d)
            drift = v - c * zt
        mean = x + drift * dt
    diff = min_image(action - mean)
    lp_atoms = (_pos_lp(diff, var) * mf3).sum(axis=-1)  # (B, T, N)
    log_ratio = (lp_atoms - rb.pos_logp) * step_w[None, :, None] * mask[:, None, :]
    if lat_units:
        lat_mean = rb.cell_states[:, :T] + (1.0 + s_vals[None, :, 1:2]) * rb.ref_lattice * dt
        lat_diff = rb.cell_states[:, 1:] - lat_mean
        lat_lp = _pos_lp(lat_diff, rb.lat_var).sum(axis=-1)
        log_ratio = np.concatenate([log_ratio, (lat_lp - rb.lat_logp)[..., None] * step_w[None, :, None]], axis=-1)

    adv = np.asarray(adv, dtype=float)
    terms, back, clipped = clipped_surrogate(log_ratio, adv, unit_mask, cfg.clip_eps, cfg.normalization)
    terms = terms * step_w[None, :]
    pol = float(terms.sum()) * norm
    g_lr = back(np.broadcast_to(step_w[None, :] * norm * cfg.policy_weight, terms.shape).copy())
    g_lr = g_lr * step_w[None, :, None]
    n_stoch = max(int(rb.stochastic.sum()), 1)
    clip_frac = float(clipped[:, rb.stochastic].sum() / max(unit_mask.sum() * n_stoch, 1))

    # d log p / d mean for positions
    g_mean = (g_lr[..., :N, None] * diff / var) * mf3

    kl_val = 0.0
    g_lat_kl = None
    if cfg.kl_weight > 0:
        n_units = unit_mask.sum(axis=1).astype(float)[:, None, None, None]
        if annealed:
            sig_r = np.asarray(noise_sigma(cfg.ref_noise, rb.times, dt))[None, :, None, None]
            ref_mean = x + rb.ref_velocity * dt
            ref_var = np.maximum(sig_r**2 * rb.ref_velocity**2 * dt, 1e-12 * dt)
        else:
            sig_r = np.asarray(noise_sigma(cfg.ref_noise, rb.times, dt))[None, :, None, None]
            ref_drift = rb.ref_velocity
            if policy.mode is Mode.SCORE_SDE:
                cr = _score_coeff(policy, cfg.ref_noise, rb.times, dt)[None, :, None, None]
                ref_drift = ref_drift - cr * rb.ref_denoiser
            ref_mean = x + ref_drift * dt
            ref_var = np.broadcast_to(sig_r**2 * dt, x.shape)
        w = step_w[None, :, None, None] * mf3 / n_units
        kd = min_image(mean - ref_mean)
        safe_rv = np.where(w > 0, ref_var, 1.0)
        kl_el = gaussian_kl(None, var, None, safe_rv, diff=kd) * w
        kl_val = float(kl_el.sum()) * norm
        g_mean = g_mean - cfg.kl_weight * norm * w * kd / safe_rv
        if lat_units:
            lsig_r = np.asarray(noise_sigma(cfg.ref_lattice_noise, rb.times, dt))[None, :, None]
            lref_mean = rb.cell_states[:, :T] + rb.ref_lattice * dt
            lref_var = np.maximum(lsig_r**2 * rb.ref_lattice**2 * dt, 1e-12 * dt)
            lw = step_w[None, :, None] / n_units[..., 0]
            ld = lat_mean - lref_mean
            kl_val += float((gaussian_kl(None, rb.lat_var, None, lref_var, diff=ld) * lw).sum()) * norm
            g_lat_kl = -cfg.kl_weight * norm * lw * ld / lref_var

    dist_val = 0.0
    g_z_dist = None
    if cfg.distill_weight > 0:
        if annealed or not policy.model.has_denoiser:
            raise ValueError("denoiser distillation needs a model with a denoiser head")
        zt = heads["denoiser"].reshape(B, T, N, d)
        n_at = mask.sum(axis=1).astype(float)[:, None, None, None]
        dz = (zt - rb.ref_denoiser) * mf3
        dist_val = float((dz * dz / n_at).sum()) * norm
        g_z_dist = -cfg.distill_weight * norm * 2.0 * dz / n_at

    value = cfg.policy_weight * pol - cfg.kl_weight * kl_val - cfg.distill_weight * dist_val

    if annealed:
        g_s = np.zeros((T, 2))
        g_s[:, 0] = np.einsum("btnd,btnd->t", g_mean, rb.ref_velocity * dt)
        if lat_units:
            g_lat_mean = g_lr[..., N][..., None] * lat_diff / rb.lat_var
            if g_lat_kl is not None:
                g_lat_mean = g_lat_mean + g_lat_kl
            g_s[:, 1] = np.einsum("btd,btd->t", g_lat_mean, rb.ref_lattice * dt)
        grad = policy.anneal_net.backward(s_cache, g_s)
    else:
        g_v = g_mean * dt
        grads = {"velocity": g_v.reshape(B * T, N, d)}
        if policy.model.has_denoiser:
            g_z = np.zeros_like(g_v)
            if policy.mode is Mode.SCORE_SDE:
                g_z = -c * g_v
            if g_z_dist is not None:
                g_z = g_z + g_z_dist
            grads["denoiser"] = g_z.reshape(B * T, N, d)
        grad = policy.model.backward(aux, grads)
    return ObjectiveResult(value, grad, pol, kl_val, dist_val, clip_frac)


# ---------------------------------------------------------------------------
# iterations


@dataclass
class RLState:
    policy: Policy
    opt: diffnet.AdamState
    iteration: int = 0
    seed: int = 1

    @property
    def theta(self) -> np.ndarray:
        return self.policy.anneal_params if self.policy.mode is Mode.ANNEALED else self.policy.params

    def set_theta(self, theta):
        if self.policy.mode is Mode.ANNEALED:
            self.policy.anneal_params = theta
        else:
            self.policy.params = theta


def init_state(policy: Policy, cfg: RLConfig, seed: int) -> RLState:
    theta = policy.anneal_params if policy.mode is Mode.ANNEALED else policy.params
    if policy.mode is not Mode.ANNEALED and policy.params is policy.ref_params:
        # keep the reference frozen while the policy copy moves
        policy.params = policy.params.copy()
        theta = policy.params
    return RLState(policy, diffnet.AdamState.zeros(theta.size, lr=cfg.lr), 0, seed)


def group_rewards(structures, cfg: RLConfig, refs: ReferenceSet, vparams: ValidityParams = ValidityParams()):
    if cfg.reward is RewardKind.ENERGY:
        return reward_energy(structures, cfg.reward_spec, refs.energy_params, vparams)
    return reward_crmse(structures, refs, cfg.reward_spec)


def collect(state: RLState, cfg: RLConfig, refs: ReferenceSet, split: str = "train"):
    """Roll out ``groups * group_size`` trajectories for this iteration."""
    gen = _rng.stream(state.seed, "rl-compositions", state.iteration)
    comps = refs.compositions(split)
    picks = gen.choice(len(comps), size=cfg.groups, replace=len(comps) < cfg.groups)
    group_comps = [comps[i] for i in picks]
    policy = state.policy
    n_max = max(c.n_atoms for c in group_comps)
    structs = []
    for g, c in enumerate(group_comps):
        for i in range(cfg.group_size):
            key = (state.iteration, g) if cfg.shared_x0 else (state.iteration, g, i)
            structs.append(sample_base(c, policy.cell_prior, _rng.stream(state.seed, "rl-x0", *key), dim=policy.model.dim))
    x0 = stack(structs, n_max)
    seeds = [_rng.stream(state.seed, "rl-noise", state.iteration, k) for k in range(len(structs))]
    return group_comps, rollout_batch(policy, x0, cfg.n_steps, seeds, record=True)


def rl_iteration(state: RLState, cfg: RLConfig, refs: ReferenceSet, vparams: ValidityParams = ValidityParams()):
    """One collect-and-update round; returns ``(state, metrics)``."""
    comps, rb = collect(state, cfg, refs)
    G = cfg.group_size
    terminal = rb.terminal.structures()
    rewards = np.concatenate([group_rewards(terminal[g * G : (g + 1) * G], cfg, refs, vparams) for g in range(cfg.groups)])
    adv = np.zeros_like(rewards)
    n_degenerate = 0
    for g in range(cfg.groups):
        a, deg = advantages(rewards[g * G : (g + 1) * G])
        adv[g * G : (g + 1) * G] = a
        n_degenerate += int(deg)

    e, valid = structure_energies(terminal, refs.energy_params, vparams)
    rel = e - reference_energies(terminal, refs)

    order = np.arange(cfg.groups)
    chunks = np.array_split(order, min(cfg.minibatches, cfg.groups))
    first = None
    clip_fracs = []
    for epoch in range(cfg.epochs):
        for chunk in chunks:
            idx = np.concatenate([np.arange(g * G, (g + 1) * G) for g in chunk])
            res = objective(state.policy, rb.subset(idx), adv[idx], cfg, state.theta)
            if first is None:
                first = res
            clip_fracs.append(res.clip_fraction)
            new_theta, state.opt = diffnet.adam_step(state.opt, state.theta, res.grad, maximize=True)
            state.set_theta(new_theta)
    state.iteration += 1
    metrics = {
        "iteration": state.iteration,
        "mean_reward": float(rewards.mean()),
        "mean_rel_energy": float(rel[valid].mean()) if valid.any() else None,
        "invalid_rate": float(1.0 - valid.mean()),
        "kl": first.kl,
        "distill": first.distill,
        "objective": first.value,
        "clip_fraction": float(np.mean(clip_fracs)),
        "degenerate_groups": n_degenerate,
    }
    return state, metrics
