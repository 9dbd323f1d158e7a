import json
import os

import numpy as np
import pytest
import yaml

from flowrl.harness import cli
from flowrl.harness.config import ConfigError, ExperimentKind, config_hash, load_config
from flowrl.harness.experiments import anneal_draws, select_scales
from flowrl.harness.io import read_csv, read_json, read_jsonl
from flowrl.harness.search import Choice, LogUniform, SearchSpace, Uniform, random_search


@pytest.fixture(scope="module")
def ws(tmp_path_factory, tiny_refs):
    """A saved tiny reference set plus a briefly pretrained checkpoint."""
    root = tmp_path_factory.mktemp("ws")
    refs = root / "refs.jsonl"
    tiny_refs.save(refs)
    base = [f"refs_path={refs}", "eval.n_samples=8", "eval.n_steps=4", "pretrain.hidden=[8]", "pretrain.pair_hidden=[4]",
            "pretrain.steps=20", "pretrain.batch_size=8", "pretrain.val_size=8", "pretrain.val_every=10"]
    assert cli.main(["pretrain", "--set", f"out_dir={root / 'pt'}", *sum((["--set", b] for b in base), [])]) == 0
    common = base + [f"checkpoint={root / 'pt' / 'flow.json'}"]
    return root, common


def _args(common, extra=()):
    out = []
    for s in [*common, *extra]:
        out += ["--set", s]
    return out


RL_SMALL = ["rl.iterations=3", "rl.group_size=2", "rl.groups=2", "rl.epochs=1", "rl.minibatches=1", "rl.n_steps=4",
            "rl.val_every=2", "rl.val_compositions=2", "rl.val_samples=2", "rl.seeds=[1, 2]", "checkpoint_every=2"]


# ---------------------------------------------------------------------------
# config


def test_overrides_parse_as_yaml(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"rl": {"lr": 0.001, "seeds": [4]}, "eval": {"split": "val"}}))
    cfg = load_config(path, ["rl.group_size=4", "rl.noise.a=0.02", "kind=reinforce_energy"])
    assert cfg.rl.lr == 0.001 and cfg.rl.seeds == (4,) and cfg.rl.group_size == 4
    assert cfg.rl.noise.a == 0.02 and cfg.eval.split == "val" and cfg.kind is ExperimentKind.REINFORCE_ENERGY


@pytest.mark.parametrize("bad", ["rl.nope=1", "nope=1", "rl.group_size=abc", "rl.group_size=1", "rl.lr", "rl..lr=1",
                                 "rl.mode=warp", "eval.sweep_steps=[1, [2"])
def test_bad_overrides_raise_config_error(bad):
    with pytest.raises(ConfigError):
        load_config(None, [bad])


def test_hash_ignores_out_dir_only():
    a = load_config(None, ["out_dir=x"])
    b = load_config(None, ["out_dir=y"])
    c = load_config(None, ["seed=5"])
    assert config_hash(a) == config_hash(b) != config_hash(c)
    assert len(config_hash(a)) == 16


# ---------------------------------------------------------------------------
# cli


def test_cli_config_error_exit_code(capsys, tmp_path):
    assert cli.main(["evaluate", "--set", "rl.nope=1"]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1
    assert cli.main(["evaluate", "--set", f"out_dir={tmp_path}"]) == 2  # no refs_path
    assert cli.main(["evaluate", "--set", f"refs_path={tmp_path / 'missing.jsonl'}"]) == 2


def test_cli_print_config(capsys):
    assert cli.main(["reinforce", "--print-config", "--set", "rl.lr=0.01"]) == 0
    tree = json.loads(capsys.readouterr().out)
    assert tree["kind"] == "reinforce_energy" and tree["rl"]["lr"] == 0.01


def test_cli_rejects_mismatched_mode(ws, tmp_path):
    _, common = ws
    assert cli.main(["anneal-reinforce", *_args(common, [f"out_dir={tmp_path}", "rl.mode=score_sde"])]) == 2
    assert cli.main(["evaluate", *_args(common, [f"out_dir={tmp_path}", "sampling_mode=annealed"])]) == 2
    # noise above the per-step bound is refused before any sampling
    assert cli.main(["evaluate", *_args(common, [f"out_dir={tmp_path}", "sampling_mode=score_sde",
                                                 "sampling_noise.a=10.0", "eval.n_steps=2"])]) == 2


# ---------------------------------------------------------------------------
# search and selection helpers


def test_search_space_parse_and_draw():
    sp = SearchSpace.parse({"rl.lr": {"loguniform": [1e-5, 1e-3]}, "rl.clip_eps": {"uniform": [0.1, 0.3]},
                            "rl.group_size": {"choice": [8, 16]}}, budget=5)
    assert [k for k, _ in sp.dists] == ["rl.clip_eps", "rl.group_size", "rl.lr"]
    d = sp.draw(0, 3)
    assert d == sp.draw(0, 3) and d != sp.draw(0, 4)
    assert 1e-5 <= d["rl.lr"] <= 1e-3 and 0.1 <= d["rl.clip_eps"] <= 0.3 and d["rl.group_size"] in (8, 16)
    for bad in ({"x": {"uniform": [1, 0]}}, {"x": {"loguniform": [0, 1]}}, {"x": {"normal": [0, 1]}}, {"x": 3}):
        with pytest.raises(ValueError):
            SearchSpace.parse(bad, 1)
    with pytest.raises(ValueError):
        Choice(())
    assert isinstance(sp.dists[0][1], Uniform) and isinstance(sp.dists[2][1], LogUniform)


def test_random_search_picks_best_and_logs_failures():
    sp = SearchSpace.parse({"x": {"uniform": [0, 1]}}, budget=6)

    def obj(i, p):
        if i == 2:
            raise RuntimeError("boom")
        return -abs(p["x"] - 0.5), {}

    best, trials = random_search(sp, obj, seed=1)
    assert len(trials) == 6 and trials[2].score is None and "boom" in trials[2].error
    ok = [t for t in trials if t.score is not None]
    assert best.score == max(t.score for t in ok)


def test_select_scales_uses_monotone_prefix():
    scales = [0.0, 0.01, 0.02, 0.04, 0.08]
    e = [-1.0, -0.995, -0.97, -0.99, -0.5]  # 0.5%, 3%, 1%, 50% worse
    assert select_scales(scales, e, -1.0, (0.01, 0.05, 0.15)) == [0.01, 0.04, 0.04]
    assert select_scales(scales, [None] * 5, -1.0, (0.01,)) == [None]


def test_anneal_draws_control_first():
    d = anneal_draws(0, 5, 0.0, 15.0)
    assert d[0] == (0, 0.0, 0.0) and len(d) == 6
    assert all(0 <= p <= 15 and 0 <= q <= 15 for _, p, q in d[1:])
    assert d == anneal_draws(0, 5, 0.0, 15.0)


# ---------------------------------------------------------------------------
# runners end to end (tiny)


def test_pretrain_outputs(ws):
    root, _ = ws
    rep = read_json(root / "pt" / "pretrain_report.json")
    assert rep["checkpoint"] == "flow.json" and "base_distribution" in rep and "config_hash" in rep
    rows = read_jsonl(root / "pt" / "pretrain_log.jsonl")
    assert rows and all("config_hash" in r for r in rows)


def test_evaluate_is_byte_identical_across_runs(ws):
    root, common = ws
    outs = []
    for name in ("e1", "e2"):
        assert cli.main(["evaluate", *_args(common, [f"out_dir={root / name}"])]) == 0
        outs.append((root / name / "eval_report.json").read_bytes())
    assert outs[0] == outs[1]


def test_step_sweep_rows(ws):
    root, common = ws
    assert cli.main(["step-sweep", *_args(common, [f"out_dir={root / 'ss'}", "eval.sweep_steps=[2, 4]"])]) == 0
    rows = read_csv(root / "ss" / "step_sweep.csv")
    assert [r["n_steps"] for r in rows] == ["2", "4"]


def test_noise_sweep_row_count(ws):
    root, common = ws
    extra = [f"out_dir={root / 'ns'}", "noise_sweep.scales=[0.0, 0.01]", "noise_sweep.n_samples=6", "noise_sweep.n_steps=4"]
    assert cli.main(["noise-sweep", *_args(common, extra)]) == 0
    out = read_json(root / "ns" / "noise_sweep.json")
    assert len(out["rows"]) == 4 and len(read_csv(root / "ns" / "noise_sweep.csv")) == 4
    assert set(out["selection"]) == {"perturbed_ode", "score_sde"}
    zero = [r for r in out["rows"] if r["scale"] == 0.0]
    assert all(r["rel_energy_change"] == pytest.approx(0.0, abs=1e-12) for r in zero)


def test_reinforce_logs_one_row_per_iteration_per_seed(ws):
    root, common = ws
    assert cli.main(["reinforce", *_args(common, [f"out_dir={root / 'rl'}", *RL_SMALL])]) == 0
    rows = read_jsonl(root / "rl" / "train_log.jsonl")
    assert sorted((r["seed"], r["iteration"]) for r in rows) == [(s, i) for s in (1, 2) for i in (1, 2, 3)]
    val = read_jsonl(root / "rl" / "val_log.jsonl")
    assert sorted((r["seed"], r["iteration"]) for r in val) == [(s, i) for s in (1, 2) for i in (0, 2, 3)]
    summary = read_json(root / "rl" / "summary.json")
    assert len(summary["seeds"]) == 2 and "median_test_match_rate" in summary
    for s in (1, 2):
        for f in ("best.json", "last.json", "test_report.json"):
            assert (root / "rl" / f"seed_{s}" / f).exists()


def test_anneal_schedule_starts_at_zero(ws):
    root, common = ws
    extra = [f"out_dir={root / 'an'}", *RL_SMALL, "rl.mode=annealed", "rl.noise.kind=constant", "rl.noise.a=0.02",
             "rl.ref_noise.kind=constant", "rl.seeds=[1]", "anneal_hidden=[4]"]
    assert cli.main(["anneal-reinforce", *_args(common, extra)]) == 0
    init = read_csv(root / "an" / "seed_1" / "schedule_init.csv")
    assert len(init) == 101
    assert all(float(r["s_pos"]) == 0.0 and float(r["s_lat"]) == 0.0 for r in init)
    assert (root / "an" / "seed_1" / "schedule_best.csv").exists()


def test_search_and_anneal_baseline(ws):
    root, common = ws
    space = "search.space={rl.lr: {loguniform: [1.0e-4, 1.0e-3]}}"
    assert cli.main(["sweep", *_args(common, [f"out_dir={root / 'sw'}", *RL_SMALL, "rl.seeds=[1]", space,
                                              "search.budget=2", "search.iterations=2"])]) == 0
    best = read_json(root / "sw" / "search_best.json")
    assert best["n_trials"] == 2 and best["n_failed"] == 0
    assert cli.main(["sweep", *_args(common, [f"out_dir={root / 'sw2'}", "search.space={rl.nope: {choice: [1]}}"])]) == 2
    extra = [f"out_dir={root / 'ab'}", "anneal_sweep.budget=2", "anneal_sweep.n_samples=4", "anneal_sweep.n_steps=3"]
    assert cli.main(["anneal-baseline", *_args(common, extra)]) == 0
    out = read_json(root / "ab" / "anneal_baseline.json")
    assert len(out["rows"]) == 3 and out["control"]["control"] is True
    assert out["best"]["crmse"] == min(r["crmse"] for r in out["rows"])


def test_workers_do_not_change_outputs(ws, monkeypatch):
    root, common = ws
    extra = ["anneal_sweep.budget=2", "anneal_sweep.n_samples=4", "anneal_sweep.n_steps=3"]
    monkeypatch.setenv("ARTIFACT_WORKERS", "2")
    assert cli.main(["anneal-baseline", *_args(common, [f"out_dir={root / 'ab2'}", *extra])]) == 0
    monkeypatch.setenv("ARTIFACT_WORKERS", "1")
    assert cli.main(["anneal-baseline", *_args(common, [f"out_dir={root / 'ab1'}", *extra])]) == 0
    for f in ("anneal_baseline.json", "anneal_baseline.csv"):
        assert (root / "ab1" / f).read_bytes() == (root / "ab2" / f).read_bytes()
    monkeypatch.setenv("ARTIFACT_WORKERS", "zero")
    assert cli.main(["anneal-baseline", *_args(common, [f"out_dir={root / 'ab3'}", *extra])]) == 2
