"""Regression pretraining of the velocity field and the denoiser.

Positions use the torus bridge from :mod:`flowrl.interpolants`; the lattice
lengths use the same schedule in Euclidean form but without the latent noise
term, so the lattice channel is a deterministic bridge. Both losses average
the squared error per atom within a structure and then over the batch; the
lattice error enters the velocity loss once per structure, scaled by
``lattice_weight``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import diffnet
from . import rng as _rng
from .interpolants import EUCLIDEAN, TORUS, InterpolantSchedule, ScheduleKind, conditional_velocity, interpolate, min_image, wrap
from .model import Batch, FeaturizerConfig, FlowModel, stack
from .toyworld import CellPrior, ReferenceSet, ToyStructure, fit_cell_prior, sample_base


@dataclass(frozen=True)
class PretrainConfig:
    schedule: str = "trig_gamma"
    a_gamma: float = 0.25
    has_denoiser: bool = True
    hidden: tuple[int, ...] = (64, 64)
    pair_hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    harmonics: int = 2
    rbf_widths: tuple[float, ...] = (1.0, 1.6)
    steps: int = 8000
    batch_size: int = 64
    lr: float = 2e-3
    lr_final_frac: float = 0.05
    t_eps: float = 1e-3
    denoiser_weight: float = 1.0
    lattice_weight: float = 1.0
    val_every: int = 250
    val_size: int = 256
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "pair_hidden", tuple(self.pair_hidden))
        object.__setattr__(self, "rbf_widths", tuple(self.rbf_widths))
        ScheduleKind(self.schedule)
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if not 0.0 < self.t_eps < 0.5:
            raise ValueError("t_eps must lie in (0, 0.5)")

    @property
    def interpolant(self) -> InterpolantSchedule:
        return InterpolantSchedule(ScheduleKind(self.schedule), self.a_gamma)

    def build_model(self) -> FlowModel:
        feat = FeaturizerConfig(harmonics=self.harmonics, rbf_widths=self.rbf_widths)
        return FlowModel.build(feat, self.hidden, self.activation, self.has_denoiser, self.pair_hidden or None)


@dataclass
class FlowArtifact:
    """A trained flow model together with what is needed to sample from it."""

    model: FlowModel
    params: np.ndarray
    schedule: InterpolantSchedule
    cell_prior: CellPrior
    metadata: dict = field(default_factory=dict)


def save_flow(path, art: FlowArtifact, optimizer: diffnet.AdamState | None = None):
    meta = dict(art.metadata)
    meta.update(
        model=art.model.to_dict(),
        schedule=art.schedule.to_dict(),
        cell_prior={"mu_log": art.cell_prior.mu_log, "sigma_log": art.cell_prior.sigma_log},
    )
    opt = {"flow": optimizer} if optimizer is not None else None
    k = art.model.net.n_params
    nets = {"flow": (art.model.net, art.params[:k])}
    if art.model.pair_net:
        nets["pair"] = (art.model.pair_net, art.params[k:])
    diffnet.save_checkpoint(path, nets, opt, meta)


def load_flow(path) -> FlowArtifact:
    nets, _, meta = diffnet.load_checkpoint(path)
    model = FlowModel.from_dict(meta["model"])
    spec, params = nets["flow"]
    if spec != model.net or (model.pair_net and nets.get("pair", (None,))[0] != model.pair_net):
        raise ValueError(f"{path}: network spec does not match the stored model description")
    if model.pair_net:
        params = np.concatenate([params, nets["pair"][1]])
    cp = meta["cell_prior"]
    rest = {k: v for k, v in meta.items() if k not in ("model", "schedule", "cell_prior")}
    return FlowArtifact(model, params, InterpolantSchedule.from_dict(meta["schedule"]), CellPrior(cp["mu_log"], cp["sigma_log"]), rest)


# ---------------------------------------------------------------------------
# losses


@dataclass
class InterpolantSample:
    t: np.ndarray  # (B,)
    xt: Batch
    z: np.ndarray  # (B, N, d) latent noise on positions
    target_velocity: np.ndarray  # (B, N, d)
    target_lattice: np.ndarray  # (B, d)


def interpolant_sample(schedule: InterpolantSchedule, t, x0: Batch, x1: Batch, z) -> InterpolantSample:
    t = np.asarray(t, dtype=float)
    m = x1.mask[..., None]
    z = np.where(m, z, 0.0)
    pos = np.where(m, interpolate(schedule, t, x0.frac, x1.frac, z, TORUS), 0.0)
    vel = np.where(m, conditional_velocity(schedule, t, x0.frac, x1.frac, z, TORUS), 0.0)
    lat = interpolate(schedule, t, x0.cell, x1.cell, None, EUCLIDEAN)
    lat_vel = conditional_velocity(schedule, t, x0.cell, x1.cell, None, EUCLIDEAN)
    return InterpolantSample(t, x1.with_state(pos, lat), z, vel, lat_vel)


def _per_structure_mean(sq, mask):
    """Mean over atoms of a (B, N) array, then mean over the batch."""
    mf = mask.astype(float)
    n = mf.sum(axis=1)
    return float(np.mean((sq * mf).sum(axis=1) / n)), mf / (n[:, None] * mask.shape[0])


def velocity_loss(model: FlowModel, params, s: InterpolantSample, lattice_weight: float = 1.0, feats=None):
    """Squared velocity error; returns ``(value, grad)``."""
    feats = model.features(s.t, s.xt) if feats is None else feats
    heads, aux = model.forward_features(params, feats, s.xt.mask)
    r = heads["velocity"] - s.target_velocity
    val_pos, w = _per_structure_mean(np.sum(r * r, axis=-1), s.xt.mask)
    rl = heads["lattice"] - s.target_lattice
    B = rl.shape[0]
    val = val_pos + lattice_weight * float(np.mean(np.sum(rl * rl, axis=-1)))
    grads = {"velocity": 2.0 * r * w[..., None], "lattice": 2.0 * lattice_weight * rl / B}
    return val, model.backward(aux, grads)


def denoiser_loss(model: FlowModel, params, s: InterpolantSample, feats=None):
    """Squared error of the latent-noise estimate; returns ``(value, grad)``."""
    if not model.has_denoiser:
        raise ValueError("model has no denoiser head")
    feats = model.features(s.t, s.xt) if feats is None else feats
    heads, aux = model.forward_features(params, feats, s.xt.mask)
    r = heads["denoiser"] - s.z
    val, w = _per_structure_mean(np.sum(r * r, axis=-1), s.xt.mask)
    return val, model.backward(aux, {"denoiser": 2.0 * r * w[..., None]})


def combined_loss(model: FlowModel, params, s: InterpolantSample, cfg: PretrainConfig):
    feats = model.features(s.t, s.xt)
    lb, gb = velocity_loss(model, params, s, cfg.lattice_weight, feats)
    if not model.has_denoiser or cfg.denoiser_weight == 0:
        return lb, gb, {"loss_b": lb}
    lz, gz = denoiser_loss(model, params, s, feats)
    return lb + cfg.denoiser_weight * lz, gb + cfg.denoiser_weight * gz, {"loss_b": lb, "loss_z": lz}


# ---------------------------------------------------------------------------
# training loop


def align_to_base(x0: ToyStructure, x1: ToyStructure, rounds: int = 3) -> ToyStructure:
    """Relabel and translate ``x1`` to sit close to ``x0`` without changing the crystal.

    Alternates a same-species optimal assignment (squared Cartesian
    minimum-image distances) with a circular-mean translation. The result
    is the same periodic structure, so only the training pairing changes.
    """
    cell = x1.cell
    shift = np.zeros(x1.dim)
    perm = np.arange(x1.n_atoms)
    for _ in range(rounds):
        perm = np.empty(x1.n_atoms, dtype=int)
        for sp in np.unique(x0.species):
            i0 = np.flatnonzero(x0.species == sp)
            i1 = np.flatnonzero(x1.species == sp)
            d = min_image(x1.frac[i1][None, :, :] + shift - x0.frac[i0][:, None, :]) * cell
            rows, cols = linear_sum_assignment(np.sum(d * d, axis=-1))
            perm[i0[rows]] = i1[cols]
        disp = min_image(x1.frac[perm] - x0.frac)
        ang = 2.0 * np.pi * disp
        shift = -np.arctan2(np.sin(ang).mean(axis=0), np.cos(ang).mean(axis=0)) / (2.0 * np.pi)
    return ToyStructure(x1.species[perm], wrap(x1.frac[perm] + shift), x1.cell)


def draw_sample(entries, prior: CellPrior, schedule: InterpolantSchedule, batch_size: int, t_eps: float, gen,
                n_max=None, align: bool = True):
    idx = gen.integers(0, len(entries), size=batch_size)
    x1s = [entries[i].structure for i in idx]
    x0s = [sample_base(s.composition, prior, gen, dim=s.dim) for s in x1s]
    if align:
        x1s = [align_to_base(a, b) for a, b in zip(x0s, x1s)]
    x1 = stack(x1s, n_max)
    x0 = stack(x0s, n_max)
    t = gen.uniform(t_eps, 1.0 - t_eps, size=batch_size)
    z = gen.standard_normal(x1.frac.shape)
    return interpolant_sample(schedule, t, x0, x1, z)


def _lr_at(cfg: PretrainConfig, step: int) -> float:
    frac = step / max(cfg.steps - 1, 1)
    return cfg.lr * (cfg.lr_final_frac + (1.0 - cfg.lr_final_frac) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def pretrain(refs: ReferenceSet, cfg: PretrainConfig = PretrainConfig(), log_path=None, metadata=None, log_extra=None):
    """Train from scratch; returns ``(best FlowArtifact, history)``.

    The parameters with the lowest validation loss are kept. Validation uses a
    fixed set of interpolant samples drawn once from the validation split.
    ``log_extra`` is merged into every JSONL log row.
    """
    train = refs.split("train")
    val = refs.split("val") or train
    if not train:
        raise ValueError("reference set has no training structures")
    model = cfg.build_model()
    schedule = cfg.interpolant
    prior = fit_cell_prior(refs, "train")
    n_max = max(e.structure.n_atoms for e in refs.entries)
    params = model.init(_rng.child_seed(cfg.seed, "pretrain-init"))
    opt = diffnet.AdamState.zeros(params.size, lr=cfg.lr)
    val_sample = draw_sample(val, prior, schedule, cfg.val_size, cfg.t_eps, _rng.stream(cfg.seed, "pretrain-val"), n_max)

    best = (math.inf, params.copy(), -1)
    history = []
    log = open(log_path, "w") if log_path else None
    try:
        for step in range(cfg.steps):
            gen = _rng.stream(cfg.seed, "pretrain-batch", step)
            s = draw_sample(train, prior, schedule, cfg.batch_size, cfg.t_eps, gen, n_max)
            loss, grad, parts = combined_loss(model, params, s, cfg)
            opt.lr = _lr_at(cfg, step)
            params, opt = diffnet.adam_step(opt, params, grad)
            last = step == cfg.steps - 1
            if step % cfg.val_every == 0 or last:
                vloss, _, vparts = combined_loss(model, params, val_sample, cfg)
                row = {"step": step + 1, "train_loss": loss, "val_loss": vloss, "lr": opt.lr}
                row.update({f"val_{k}": v for k, v in vparts.items()})
                history.append(row)
                if log:
                    log.write(json.dumps({**row, **(log_extra or {})}, sort_keys=True) + "\n")
                    log.flush()
                if vloss < best[0]:
                    best = (vloss, params.copy(), step + 1)
    finally:
        if log:
            log.close()
    meta = dict(metadata or {})
    meta.update(pretrain_config=_config_dict(cfg), best_step=best[2], best_val_loss=best[0])
    return FlowArtifact(model, best[1], schedule, prior, meta), history


def _config_dict(cfg: PretrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    d["pair_hidden"] = list(cfg.pair_hidden)
    d["rbf_widths"] = list(cfg.rbf_widths)
    return d
