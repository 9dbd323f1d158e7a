"""Cached multi-stage experiment pipeline for the acceptance experiments.

Each stage is one harness experiment run inside a common root directory; all
paths in stage configs are relative to that root, so two roots produce
identical configs (and hashes). A stage is skipped when its marker file
records the same cache key, which combines

* a hash of the package source (docstrings and comments stripped),
* the stage's config hash, and
* the keys of the stages it depends on.

Usage::

    python scripts/pipeline.py [--root runs/acceptance] [stage ...]
    python scripts/pipeline.py --root runs/det_a --plan determinism

Stages listed on the command line run with their dependencies; without
arguments every stage of the plan runs.
"""

from __future__ import annotations

import argparse
import ast
import contextlib
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from flowrl.harness.config import ExperimentKind, config_hash, load_config
from flowrl.harness.experiments import run
from flowrl.harness.io import read_json

REPO = Path(__file__).resolve().parents[1]
CONFIGS = REPO / "configs"
SOURCE = REPO / "src" / "flowrl"
MARKER = ".stage.json"
RUNTIME = ".runtime.json"


@dataclass(frozen=True)
class Stage:
    name: str
    kind: ExperimentKind
    configs: tuple = ()
    overrides: tuple = ()
    deps: tuple = ()
    # callable(results by stage name) -> extra overrides, for values chosen upstream
    derived: object = None


DATASET = "dataset/dataset.jsonl"
CHECKPOINT = "pretrain/flow.json"


def _noise_override(results):
    a_s = results["noise_sweep"]["selection"]["perturbed_ode"]["a_s"]
    if a_s is None:
        raise RuntimeError("noise sweep selected no small scale for the perturbed ODE")
    return ["sampling_mode=perturbed_ode", "sampling_noise.kind=sqrt_ratio", f"sampling_noise.a={a_s}"]


def _stage(name, kind, *configs, overrides=(), deps=(), derived=None):
    files = ("acceptance.yaml", *configs)
    refs = ("dataset",) if kind is not ExperimentKind.GEN_DATASET else ()
    ckpt = ("pretrain",) if kind not in (ExperimentKind.GEN_DATASET, ExperimentKind.PRETRAIN) else ()
    paths = ([f"refs_path={DATASET}"] if refs else []) + ([f"checkpoint={CHECKPOINT}"] if ckpt else [])
    return Stage(name, kind, files, tuple(paths) + tuple(overrides), tuple(refs + ckpt + tuple(deps)), derived)


ACCEPTANCE = [
    _stage("dataset", ExperimentKind.GEN_DATASET),
    _stage("pretrain", ExperimentKind.PRETRAIN),
    _stage("noise_sweep", ExperimentKind.NOISE_SWEEP),
    _stage("eval_ode", ExperimentKind.EVALUATE),
    _stage("eval_perturbed_as", ExperimentKind.EVALUATE, deps=("noise_sweep",), derived=_noise_override),
    _stage("rl_velocity", ExperimentKind.REINFORCE_ENERGY, overrides=("rl.mode=perturbed_ode",)),
    _stage("rl_score", ExperimentKind.REINFORCE_ENERGY, overrides=("rl.mode=score_sde",)),
    _stage("anneal_rl", ExperimentKind.REINFORCE_ANNEAL, "anneal.yaml"),
    _stage("anneal_baseline", ExperimentKind.ANNEAL_BASELINE_SWEEP, "anneal_baseline.yaml"),
    _stage("eval_ode_500", ExperimentKind.EVALUATE, overrides=("eval.n_steps=500",)),
    _stage("step_sweep", ExperimentKind.STEP_SWEEP),
]

DETERMINISM = [
    Stage("dataset", ExperimentKind.GEN_DATASET, ("determinism.yaml",)),
    Stage("pretrain", ExperimentKind.PRETRAIN, ("determinism.yaml",), (f"refs_path={DATASET}",), ("dataset",)),
    Stage("rl_velocity", ExperimentKind.REINFORCE_ENERGY, ("determinism.yaml",),
          (f"refs_path={DATASET}", f"checkpoint={CHECKPOINT}", "rl.mode=perturbed_ode"), ("dataset", "pretrain")),
    Stage("evaluate", ExperimentKind.EVALUATE, ("determinism.yaml",),
          (f"refs_path={DATASET}", f"checkpoint={CHECKPOINT}"), ("dataset", "pretrain")),
]

PLANS = {"acceptance": ACCEPTANCE, "determinism": DETERMINISM}


# ---------------------------------------------------------------------------
# caching


class _StripDocs(ast.NodeTransformer):
    def _strip(self, node):
        self.generic_visit(node)
        body = node.body
        if body and isinstance(body[0], ast.Expr) and isinstance(getattr(body[0], "value", None), ast.Constant) \
                and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
        return node

    visit_Module = visit_FunctionDef = visit_AsyncFunctionDef = visit_ClassDef = _strip


def source_hash(root: Path = SOURCE) -> str:
    """Hash of the package code, insensitive to comments, docstrings and formatting."""
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        tree = _StripDocs().visit(ast.parse(path.read_text()))
        h.update(str(path.relative_to(root)).encode())
        h.update(ast.dump(tree).encode())
    return h.hexdigest()[:16]


@contextlib.contextmanager
def _cwd(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


class Pipeline:
    def __init__(self, root, plan="acceptance", log=print):
        self.root = Path(root).resolve()
        self.stages = {s.name: s for s in PLANS[plan]}
        self.src = source_hash()
        self.keys: dict = {}
        self.results: dict = {}
        self.log = log

    def config(self, stage: Stage):
        extra = list(stage.derived(self.results)) if stage.derived else []
        files = [str(CONFIGS / c) for c in stage.configs]
        ov = [*stage.overrides, *extra, f"out_dir={stage.name}", f"kind={stage.kind.value}"]
        return load_config(files, ov)

    def key(self, stage: Stage, cfg) -> str:
        blob = json.dumps({"source": self.src, "config": config_hash(cfg), "deps": [self.keys[d] for d in stage.deps]})
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def run(self, name: str) -> dict:
        """Run ``name`` (after its dependencies) unless it is cached; returns its summary."""
        if name in self.results:
            return self.results[name]
        stage = self.stages[name]
        for d in stage.deps:
            self.run(d)
        self.root.mkdir(parents=True, exist_ok=True)
        with _cwd(self.root):
            cfg = self.config(stage)
            key = self.key(stage, cfg)
            marker = Path(stage.name) / MARKER
            if marker.exists():
                cached = json.loads(marker.read_text())
                if cached.get("key") == key:
                    self.keys[name], self.results[name] = key, cached["summary"]
                    self.log(f"[cached] {name}")
                    return cached["summary"]
            self.log(f"[run] {name} ...")
            t0 = time.time()
            summary = run(cfg)
            marker.write_text(json.dumps({"key": key, "summary": summary}, sort_keys=True, default=str))
            # wall time lives apart from the outputs, which must not depend on it
            (Path(stage.name) / RUNTIME).write_text(json.dumps({"seconds": round(time.time() - t0, 1)}))
            self.log(f"[done] {name} in {time.time() - t0:.0f} s")
        self.keys[name] = key
        self.results[name] = json.loads(json.dumps(summary, default=str))
        return self.results[name]

    def run_all(self, names=None):
        for n in names or list(self.stages):
            self.run(n)
        return self.results

    def path(self, stage: str, *parts) -> Path:
        return self.root / stage / Path(*parts)

    def read(self, stage: str, fname: str) -> dict:
        return read_json(self.path(stage, fname))

    def seconds(self, stage: str) -> float | None:
        p = self.path(stage, RUNTIME)
        return json.loads(p.read_text())["seconds"] if p.exists() else None


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("stages", nargs="*", help="stages to run (default: all)")
    ap.add_argument("--root", default=str(REPO / "runs" / "acceptance"))
    ap.add_argument("--plan", default="acceptance", choices=sorted(PLANS))
    args = ap.parse_args(argv)
    pipe = Pipeline(args.root, args.plan, log=lambda m: print(m, flush=True))
    unknown = [s for s in args.stages if s not in pipe.stages]
    if unknown:
        print(f"error: unknown stage '{unknown[0]}' (choose from {', '.join(pipe.stages)})", file=sys.stderr)
        return 2
    pipe.run_all(args.stages or None)
    return 0


if __name__ == "__main__":
    sys.exit(main())
