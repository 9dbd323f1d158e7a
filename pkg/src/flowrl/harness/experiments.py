"""Experiment runners behind the CLI.

Each runner takes an :class:`ExperimentConfig`, writes its files under
``cfg.out_dir`` and returns a small summary dict. Independent units of work
(RL seeds, search trials, baseline trials) go through :func:`parallel_map`,
which uses ``ARTIFACT_WORKERS`` processes and keeps results in input order so
that outputs do not depend on the worker count.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .. import diffnet
from .. import rng as _rng
from ..dynamics import Mode, NoiseKind, NoiseSchedule, Policy, check_noise_bound, sample
from ..evalmetrics import evaluate, evaluation_compositions, report
from ..grpo import RLConfig, RewardKind, init_state, rl_iteration, validation_reward
from ..matching import N_MAX
from ..model import ScheduleNet
from ..pretrain import FlowArtifact, load_flow, pretrain, save_flow
from ..toyworld import ReferenceSet, all_compositions, generate_dataset, sample_base
from .config import ConfigError, ExperimentConfig, ExperimentKind, from_plain, set_key, to_plain
from .io import JsonlWriter, stamp, write_csv, write_json
from .search import SearchSpace, random_search

SCHEDULE_GRID = 101


# ---------------------------------------------------------------------------
# plumbing


def n_workers() -> int:
    raw = os.environ.get("ARTIFACT_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ARTIFACT_WORKERS must be an integer, got '{raw}'") from None
    if n < 1:
        raise ConfigError("ARTIFACT_WORKERS must be >= 1")
    return n


def parallel_map(fn, items):
    items = list(items)
    n = min(n_workers(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _out(cfg: ExperimentConfig, *parts) -> str:
    path = os.path.join(cfg.out_dir, *parts)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    return path


def load_refs(cfg: ExperimentConfig) -> ReferenceSet:
    if not cfg.refs_path:
        raise ConfigError("refs_path is required for this experiment")
    if not os.path.exists(cfg.refs_path):
        raise ConfigError(f"reference set '{cfg.refs_path}' does not exist")
    refs = ReferenceSet.load(cfg.refs_path)
    too_big = [c for c in refs.compositions() if c.n_atoms > N_MAX]
    if too_big:
        raise ConfigError(f"composition {too_big[0].label()} exceeds N_max = {N_MAX}")
    return refs


def load_artifact(cfg: ExperimentConfig) -> FlowArtifact:
    if not cfg.checkpoint:
        raise ConfigError("checkpoint is required for this experiment")
    if not os.path.exists(cfg.checkpoint):
        raise ConfigError(f"checkpoint '{cfg.checkpoint}' does not exist")
    return load_flow(cfg.checkpoint)


def make_policy(art: FlowArtifact, mode, noise: NoiseSchedule | None = None, n_steps: int | None = None, **kw) -> Policy:
    """Build and validate a sampler; ``n_steps`` triggers the noise-bound check."""
    try:
        pol = Policy(art.model, art.params, art.schedule, Mode(mode), noise or NoiseSchedule(NoiseKind.SQRT_RATIO, 0.0), art.cell_prior, **kw)
        if n_steps is not None:
            check_noise_bound(pol, n_steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return pol


def save_schedule(path, net: ScheduleNet, params, metadata: dict):
    nets = {f"anneal_{k}": (spec, p) for k, (spec, p) in enumerate(zip(net.specs, net._split(params)))}
    diffnet.save_checkpoint(path, nets, None, {**metadata, "schedule_net": net.to_dict()})


def load_schedule(path):
    nets, _, meta = diffnet.load_checkpoint(path)
    net = ScheduleNet.from_dict(meta["schedule_net"])
    params = np.concatenate([nets[f"anneal_{k}"][1] for k in range(len(net.specs))])
    return net, params


def schedule_table(policy: Policy) -> list[dict]:
    t = np.linspace(0.0, 1.0, SCHEDULE_GRID)
    s = policy.anneal_values(t)
    return [
        {"t": float(t[i]), "s_pos": float(s[i, 0]), "s_lat": float(s[i, 1]),
         "positive_pos": bool(1.0 + s[i, 0] > 0), "positive_lat": bool(1.0 + s[i, 1] > 0)}
        for i in range(t.size)
    ]


def _report_row(rep, **extra) -> dict:
    row = dict(extra)
    row.update(rep.to_dict())
    return row


# ---------------------------------------------------------------------------
# dataset and pretraining


def run_gen_dataset(cfg: ExperimentConfig) -> dict:
    cs = cfg.compositions
    if cs.n_max > N_MAX:
        raise ConfigError(f"compositions.n_max = {cs.n_max} exceeds N_max = {N_MAX}")
    if cs.n_species != cfg.energy.n_species:
        raise ConfigError(f"compositions.n_species = {cs.n_species} but the energy model has {cfg.energy.n_species} species")
    comps = all_compositions(cs.n_species, cs.n_min, cs.n_max)
    refs = generate_dataset(comps, cfg.seed, cfg.energy, cfg.dataset)
    st = stamp(cfg)
    path = _out(cfg, "dataset.jsonl")
    refs.save(path, header_extra=st)
    summary = {
        "path": "dataset.jsonl",
        "entries": {s: len(refs.split(s)) for s in ("train", "val", "test")},
        "compositions": {s: len(refs.compositions(s)) for s in ("train", "val", "test")},
    }
    write_json(_out(cfg, "dataset_summary.json"), summary, st)
    return summary


def base_distribution_report(art: FlowArtifact, refs: ReferenceSet, cfg: ExperimentConfig, split: str):
    """Metrics of raw base draws (same streams as sampling), as a floor."""
    comps = evaluation_compositions(refs, split, cfg.eval.n_samples)
    structs = [sample_base(c, art.cell_prior, _rng.stream(cfg.eval.seed, "x0", i), dim=art.model.dim) for i, c in enumerate(comps)]
    return report(structs, refs, 0, cfg.matcher, cfg.validity, split)


def run_pretrain(cfg: ExperimentConfig) -> dict:
    refs = load_refs(cfg)
    st = stamp(cfg)
    pcfg = dataclasses.replace(cfg.pretrain, seed=cfg.seed)
    art, history = pretrain(refs, pcfg, _out(cfg, "pretrain_log.jsonl"), metadata=dict(st), log_extra=st)
    ckpt = _out(cfg, "flow.json")
    save_flow(ckpt, art)
    pol = make_policy(art, Mode.ODE)
    split = "val"
    model_rep = evaluate(pol, refs, split, cfg.eval.n_steps, cfg.eval.seed, cfg.eval.n_samples, cfg.matcher, cfg.validity)
    base_rep = base_distribution_report(art, refs, cfg, split)
    out = {
        "checkpoint": "flow.json",
        "best_step": art.metadata["best_step"],
        "best_val_loss": art.metadata["best_val_loss"],
        "split": split,
        "model": model_rep.to_dict(),
        "base_distribution": base_rep.to_dict(),
    }
    write_json(_out(cfg, "pretrain_report.json"), out, st)
    return out


# ---------------------------------------------------------------------------
# evaluation


def _sampling_policy(cfg: ExperimentConfig, art: FlowArtifact, n_steps: int) -> Policy:
    mode = Mode(cfg.sampling_mode)
    if mode is Mode.ANNEALED:
        raise ConfigError("sampling_mode 'annealed' is not supported here; evaluate the learned schedule via reinforce_anneal")
    return make_policy(art, mode, cfg.sampling_noise, n_steps)


def run_evaluate(cfg: ExperimentConfig) -> dict:
    refs, art = load_refs(cfg), load_artifact(cfg)
    e = cfg.eval
    pol = _sampling_policy(cfg, art, e.n_steps)
    rep = evaluate(pol, refs, e.split, e.n_steps, e.seed, e.n_samples, cfg.matcher, cfg.validity)
    out = {"split": e.split, "sampling_mode": pol.mode.value, "sampling_noise": pol.noise.to_dict(), "report": rep.to_dict()}
    write_json(_out(cfg, "eval_report.json"), out, stamp(cfg))
    return out


def run_step_sweep(cfg: ExperimentConfig) -> dict:
    refs, art = load_refs(cfg), load_artifact(cfg)
    e = cfg.eval
    if not e.sweep_steps or min(e.sweep_steps) < 1:
        raise ConfigError("eval.sweep_steps must list step counts >= 1")
    rows = []
    for n in e.sweep_steps:
        pol = _sampling_policy(cfg, art, n)
        rows.append(evaluate(pol, refs, e.split, n, e.seed, e.n_samples, cfg.matcher, cfg.validity).to_dict())
    st = stamp(cfg)
    write_csv(_out(cfg, "step_sweep.csv"), rows, st, ["n_steps"])
    out = {"split": e.split, "rows": rows}
    write_json(_out(cfg, "step_sweep.json"), out, st)
    return out


def select_scales(scales, energies, baseline: float, bands) -> list:
    """Largest scale per band whose mean energy stays within the band.

    A scale qualifies only if every smaller grid scale also stays within the
    band, so the selection reads off the onset of degradation. Relative
    worsening is ``(E - E0) / |E0|`` with ``E0`` the deterministic baseline.
    """
    order = np.argsort(scales, kind="stable")
    out = []
    for band in bands:
        best = None
        for i in order:
            e = energies[i]
            if e is None or (e - baseline) / abs(baseline) > band:
                break
            best = float(scales[i])
        out.append(best)
    return out


def run_noise_sweep(cfg: ExperimentConfig) -> dict:
    refs, art = load_refs(cfg), load_artifact(cfg)
    ns = cfg.noise_sweep
    if len(ns.bands) != 3 or list(ns.bands) != sorted(ns.bands):
        raise ConfigError("noise_sweep.bands must be three increasing values (small, medium, large)")
    kinds = []
    for k in ns.kinds:
        mode = Mode(k)
        if mode not in (Mode.PERTURBED_ODE, Mode.SCORE_SDE):
            raise ConfigError(f"noise_sweep.kinds: '{k}' is not a stochastic sampler")
        kinds.append(mode)
    # validate the whole grid before spending any compute
    grid = [(m, float(a), make_policy(art, m, NoiseSchedule(ns.noise_kind, float(a)), ns.n_steps)) for m in kinds for a in ns.scales]
    base_pol = make_policy(art, Mode.ODE)
    seed = cfg.eval.seed
    baseline = evaluate(base_pol, refs, ns.split, ns.n_steps, seed, ns.n_samples, cfg.matcher, cfg.validity)
    if baseline.mean_energy is None:
        raise RuntimeError("deterministic baseline produced no valid structure")
    rows = []
    for mode, a, pol in grid:
        rep = evaluate(pol, refs, ns.split, ns.n_steps, seed, ns.n_samples, cfg.matcher, cfg.validity)
        rel = None if rep.mean_energy is None else (rep.mean_energy - baseline.mean_energy) / abs(baseline.mean_energy)
        rows.append(_report_row(rep, kind=mode.value, noise_kind=ns.noise_kind.value, scale=a, rel_energy_change=rel,
                                match_rate_change=rep.match_rate - baseline.match_rate))
    selection = {}
    for mode in kinds:
        sub = [r for r in rows if r["kind"] == mode.value]
        picks = select_scales([r["scale"] for r in sub], [r.get("mean_energy") for r in sub], baseline.mean_energy, ns.bands)
        selection[mode.value] = dict(zip(("a_s", "a_m", "a_l"), picks))
    st = stamp(cfg)
    write_csv(_out(cfg, "noise_sweep.csv"), rows, st, ["kind", "noise_kind", "scale"])
    out = {"split": ns.split, "bands": list(ns.bands), "baseline": baseline.to_dict(), "rows": rows, "selection": selection}
    write_json(_out(cfg, "noise_sweep.json"), out, st)
    return out


# ---------------------------------------------------------------------------
# reinforcement


def _rl_policy(cfg: ExperimentConfig, art: FlowArtifact, rl: RLConfig, seed: int) -> Policy:
    if rl.mode is Mode.ANNEALED:
        net = ScheduleNet(cfg.anneal_hidden, cfg.anneal_shared_trunk)
        return make_policy(art, Mode.ANNEALED, rl.noise, rl.n_steps, anneal_net=net,
                           anneal_params=net.init(_rng.child_seed(seed, "anneal-init")), lattice_noise=rl.lattice_noise)
    return make_policy(art, rl.mode, rl.noise, rl.n_steps)


def _eval_policy(policy: Policy) -> Policy:
    """Sampler used for validation and test: annealed schedules run noise-free."""
    if policy.mode is Mode.ANNEALED:
        return policy.copy_with(noise=NoiseSchedule(NoiseKind.SQRT_RATIO, 0.0), lattice_noise=NoiseSchedule(NoiseKind.CONSTANT, 0.0))
    return policy.copy_with()


def validation_compositions(refs: ReferenceSet, rl: RLConfig):
    comps = refs.compositions("val")[: rl.val_compositions]
    if not comps:
        raise ConfigError("the reference set has no validation compositions")
    return [comps[i % len(comps)] for i in range(max(rl.val_samples, len(comps)))]


def _validate(policy, refs, comps, rl: RLConfig, cfg: ExperimentConfig):
    pol = _eval_policy(policy)
    structs = sample(pol, comps, rl.n_steps, cfg.eval.seed)
    rep = report(structs, refs, rl.n_steps, cfg.matcher, cfg.validity)
    return validation_reward(structs, rl, refs, cfg.validity), rep


@dataclasses.dataclass(frozen=True)
class _SeedJob:
    cfg_tree: dict
    seed: int
    out_dir: str
    test: bool = True


def _run_seed(job: _SeedJob) -> dict:
    """Train one seed, keep the best validation checkpoint, report on test."""
    cfg = from_plain(ExperimentConfig, job.cfg_tree)
    rl = cfg.rl
    refs, art = load_refs(cfg), load_artifact(cfg)
    st = stamp(cfg)
    os.makedirs(job.out_dir, exist_ok=True)
    state = init_state(_rl_policy(cfg, art, rl, job.seed), rl, job.seed)
    annealed = rl.mode is Mode.ANNEALED
    vcomps = validation_compositions(refs, rl)
    if annealed:
        write_csv(os.path.join(job.out_dir, "schedule_init.csv"), schedule_table(state.policy), st)

    def snapshot():
        return state.theta.copy()

    v_reward, v_rep = _validate(state.policy, refs, vcomps, rl, cfg)
    val_rows = [{"seed": job.seed, "iteration": 0, "val_reward": v_reward, **v_rep.to_dict()}]
    best = (v_reward, 0, snapshot(), v_rep)
    baseline = (v_reward, v_rep)
    train_rows = []
    with JsonlWriter(os.path.join(job.out_dir, "train_log.jsonl"), st) as tlog, \
            JsonlWriter(os.path.join(job.out_dir, "val_log.jsonl"), st) as vlog:
        vlog.write(val_rows[0])
        for _ in range(rl.iterations):
            state, m = rl_iteration(state, rl, refs, cfg.validity)
            row = {"seed": job.seed, **m}
            tlog.write(row)
            train_rows.append(row)
            it = state.iteration
            if it % rl.val_every == 0 or it == rl.iterations:
                v_reward, v_rep = _validate(state.policy, refs, vcomps, rl, cfg)
                vrow = {"seed": job.seed, "iteration": it, "val_reward": v_reward, **v_rep.to_dict()}
                vlog.write(vrow)
                val_rows.append(vrow)
                if v_reward > best[0]:
                    best = (v_reward, it, snapshot(), v_rep)
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                _save_policy(os.path.join(job.out_dir, "last.json"), state.policy, state.theta, {**st, "iteration": it, "seed": job.seed})

    state.set_theta(best[2])
    meta = {**st, "iteration": best[1], "seed": job.seed, "val_reward": best[0]}
    ckpt = os.path.join(job.out_dir, "best.json")
    _save_policy(ckpt, state.policy, best[2], meta)
    out = {
        "seed": job.seed,
        "best_iteration": best[1],
        "best_val_reward": best[0],
        "best_val": best[3].to_dict(),
        "baseline_val_reward": baseline[0],
        "baseline_val": baseline[1].to_dict(),
        "checkpoint": os.path.join(f"seed_{job.seed}", "best.json"),
        "train_rows": train_rows,
        "val_rows": val_rows,
    }
    if annealed:
        table = schedule_table(state.policy)
        write_csv(os.path.join(job.out_dir, "schedule_best.csv"), table, st)
        out["schedule_positive"] = bool(all(r["positive_pos"] and r["positive_lat"] for r in table))
    if job.test:
        e = cfg.eval
        rep = evaluate(_eval_policy(state.policy), refs, e.split, e.n_steps, e.seed, e.n_samples, cfg.matcher, cfg.validity)
        out["test"] = rep.to_dict()
        write_json(os.path.join(job.out_dir, "test_report.json"), {"seed": job.seed, "split": e.split, "report": rep.to_dict()}, st)
    return out


def _save_policy(path, policy: Policy, theta, meta: dict):
    if policy.mode is Mode.ANNEALED:
        save_schedule(path, policy.anneal_net, theta, meta)
    else:
        save_flow(path, FlowArtifact(policy.model, theta, policy.schedule, policy.cell_prior, meta))


def _median(xs):
    xs = [x for x in xs if x is not None]
    return float(np.median(xs)) if xs else None


def run_reinforce(cfg: ExperimentConfig) -> dict:
    rl = cfg.rl
    if cfg.kind is ExperimentKind.REINFORCE_ANNEAL and rl.mode is not Mode.ANNEALED:
        raise ConfigError("reinforce_anneal needs rl.mode = annealed")
    if cfg.kind is ExperimentKind.REINFORCE_ENERGY and rl.mode is Mode.ANNEALED:
        raise ConfigError("reinforce_energy needs rl.mode = perturbed_ode or score_sde")
    if not rl.seeds:
        raise ConfigError("rl.seeds is empty")
    # fail fast on config errors before forking workers
    load_refs(cfg)
    _rl_policy(cfg, load_artifact(cfg), rl, rl.seeds[0])
    tree = to_plain(cfg)
    jobs = [_SeedJob(tree, s, os.path.join(cfg.out_dir, f"seed_{s}")) for s in rl.seeds]
    results = parallel_map(_run_seed, jobs)
    st = stamp(cfg)
    with JsonlWriter(_out(cfg, "train_log.jsonl"), st) as log:
        for r in results:
            for row in r.pop("train_rows"):
                log.write(row)
    with JsonlWriter(_out(cfg, "val_log.jsonl"), st) as log:
        for r in results:
            for row in r.pop("val_rows"):
                log.write(row)
    summary = {
        "kind": cfg.kind.value,
        "mode": rl.mode.value,
        "reward": rl.reward.value,
        "seeds": results,
        "median_best_val_reward": _median([r["best_val_reward"] for r in results]),
        "median_best_val_rel_energy": _median([r["best_val"].get("mean_rel_energy") for r in results]),
        "median_baseline_val_rel_energy": _median([r["baseline_val"].get("mean_rel_energy") for r in results]),
    }
    if "test" in results[0]:
        for key in ("match_rate", "metre", "crmse", "mean_rel_energy", "invalid_energy_rate"):
            summary[f"median_test_{key}"] = _median([r["test"].get(key) for r in results])
    write_json(_out(cfg, "summary.json"), summary, st)
    return summary


# ---------------------------------------------------------------------------
# hyperparameter search


@dataclasses.dataclass(frozen=True)
class _TrialObjective:
    cfg_tree: dict
    out_dir: str

    def __call__(self, index, params):
        tree = to_plain(from_plain(ExperimentConfig, self.cfg_tree))
        for key, value in params.items():
            set_key(tree, key, value)
        cfg = from_plain(ExperimentConfig, tree)
        seed = cfg.rl.seeds[0]
        res = _run_seed(_SeedJob(tree, seed, os.path.join(self.out_dir, f"trial_{index}"), test=False))
        return res["best_val_reward"], {"best_iteration": res["best_iteration"], "seed": seed}


def run_random_search(cfg: ExperimentConfig) -> dict:
    sc = cfg.search
    try:
        space = SearchSpace.parse(sc.space, sc.budget)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not space.dists:
        raise ConfigError("search.space is empty")
    load_refs(cfg)
    load_artifact(cfg)
    tree = to_plain(cfg)
    tree["rl"]["iterations"] = sc.iterations
    objective = _TrialObjective(tree, cfg.out_dir)
    # a bad search key should fail here, not as `budget` logged trial errors
    probe = to_plain(cfg)
    for key, value in space.draw(cfg.seed, 0).items():
        set_key(probe, key, value)
    from_plain(ExperimentConfig, probe)
    best, trials = random_search(space, objective, cfg.seed, runner=parallel_map)
    st = stamp(cfg)
    with JsonlWriter(_out(cfg, "search_log.jsonl"), st) as log:
        for t in trials:
            log.write(t.to_dict())
    rows = [{"trial": t.index, "score": t.score, "error": t.error, **{f"param.{k}": v for k, v in t.params.items()}} for t in trials]
    write_csv(_out(cfg, "search.csv"), rows, st, ["trial", "score"])
    out = {"best": best.to_dict() if best else None, "n_trials": len(trials), "n_failed": sum(t.score is None for t in trials)}
    write_json(_out(cfg, "search_best.json"), out, st)
    return out


# ---------------------------------------------------------------------------
# handcrafted annealing baseline


@dataclasses.dataclass(frozen=True)
class _AnnealTrial:
    cfg_tree: dict

    def __call__(self, item):
        index, s_pos, s_lat = item
        cfg = from_plain(ExperimentConfig, self.cfg_tree)
        a = cfg.anneal_sweep
        refs, art = load_refs(cfg), load_artifact(cfg)
        pol = make_policy(art, Mode.ANNEALED, NoiseSchedule(NoiseKind.SQRT_RATIO, 0.0), a.n_steps, handcrafted_anneal=(s_pos, s_lat))
        rep = evaluate(pol, refs, a.split, a.n_steps, cfg.eval.seed, a.n_samples, cfg.matcher, cfg.validity)
        return _report_row(rep, trial=index, control=index == 0, s_pos=s_pos, s_lat=s_lat)


def anneal_draws(seed: int, budget: int, low: float, high: float):
    """Control point (0, 0) followed by ``budget`` uniform draws."""
    gen = _rng.stream(seed, "anneal-baseline")
    draws = gen.uniform(low, high, size=(budget, 2))
    return [(0, 0.0, 0.0)] + [(i + 1, float(p), float(q)) for i, (p, q) in enumerate(draws)]


def run_anneal_baseline(cfg: ExperimentConfig) -> dict:
    a = cfg.anneal_sweep
    if a.budget < 1 or not a.low < a.high:
        raise ConfigError("anneal_sweep needs budget >= 1 and low < high")
    load_refs(cfg)
    load_artifact(cfg)
    rows = parallel_map(_AnnealTrial(to_plain(cfg)), anneal_draws(cfg.seed, a.budget, a.low, a.high))
    best = min(rows, key=lambda r: (r["crmse"], r["trial"]))
    st = stamp(cfg)
    write_csv(_out(cfg, "anneal_baseline.csv"), rows, st, ["trial", "control", "s_pos", "s_lat"])
    out = {"split": a.split, "n_steps": a.n_steps, "best": best, "control": rows[0], "rows": rows}
    write_json(_out(cfg, "anneal_baseline.json"), out, st)
    return out


RUNNERS = {
    ExperimentKind.GEN_DATASET: run_gen_dataset,
    ExperimentKind.PRETRAIN: run_pretrain,
    ExperimentKind.EVALUATE: run_evaluate,
    ExperimentKind.STEP_SWEEP: run_step_sweep,
    ExperimentKind.NOISE_SWEEP: run_noise_sweep,
    ExperimentKind.REINFORCE_ENERGY: run_reinforce,
    ExperimentKind.REINFORCE_ANNEAL: run_reinforce,
    ExperimentKind.RANDOM_SEARCH: run_random_search,
    ExperimentKind.ANNEAL_BASELINE_SWEEP: run_anneal_baseline,
}


def run(cfg: ExperimentConfig) -> dict:
    return RUNNERS[cfg.kind](cfg)
