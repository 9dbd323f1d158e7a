"""Experiment configuration: YAML files, dotted overrides, hashing.

A config file is a YAML mapping mirroring :class:`ExperimentConfig`. Any key
can be overridden on the command line with ``--set a.b.c=value`` where the
value is parsed as YAML (so ``3``, ``0.1``, ``true``, ``[1, 2]`` work).
Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from enum import Enum

import yaml

from ..dynamics import NoiseKind, NoiseSchedule
from ..grpo import RLConfig
from ..matching import MatcherTolerances
from ..pretrain import PretrainConfig
from ..toyworld import DatasetConfig, EnergyModelParams, ValidityParams

ARTIFACT_VERSION = "0.1.0"


class ConfigError(ValueError):
    pass


class ExperimentKind(str, Enum):
    GEN_DATASET = "gen_dataset"
    PRETRAIN = "pretrain"
    NOISE_SWEEP = "noise_sweep"
    REINFORCE_ENERGY = "reinforce_energy"
    REINFORCE_ANNEAL = "reinforce_anneal"
    EVALUATE = "evaluate"
    STEP_SWEEP = "step_sweep"
    RANDOM_SEARCH = "random_search"
    ANNEAL_BASELINE_SWEEP = "anneal_baseline_sweep"


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    n_steps: int = 50
    n_samples: int = 205
    seed: int = 0
    sweep_steps: tuple[int, ...] = (10, 20, 50, 100, 500)


@dataclass(frozen=True)
class CompositionSpace:
    n_species: int = 3
    n_min: int = 2
    n_max: int = 8


@dataclass(frozen=True)
class NoiseSweepConfig:
    # the largest scale respects the per-step noise bound at n_steps = 50
    scales: tuple[float, ...] = (0.0, 0.002, 0.005, 0.01, 0.02, 0.03)
    kinds: tuple[str, ...] = ("perturbed_ode", "score_sde")
    noise_kind: NoiseKind = NoiseKind.SQRT_RATIO
    bands: tuple[float, float, float] = (0.01, 0.05, 0.15)
    split: str = "val"
    n_samples: int = 240
    n_steps: int = 50


@dataclass(frozen=True)
class AnnealSweepConfig:
    budget: int = 50
    low: float = 0.0
    high: float = 15.0
    n_steps: int = 10
    split: str = "val"
    n_samples: int = 96
    seed: int = 0


@dataclass(frozen=True)
class SearchConfig:
    budget: int = 8
    iterations: int = 20
    space: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: ExperimentKind = ExperimentKind.EVALUATE
    out_dir: str = "runs/default"
    seed: int = 0
    refs_path: str = ""
    checkpoint: str = ""
    compositions: CompositionSpace = field(default_factory=CompositionSpace)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    energy: EnergyModelParams = field(default_factory=EnergyModelParams)
    validity: ValidityParams = field(default_factory=ValidityParams)
    matcher: MatcherTolerances = field(default_factory=MatcherTolerances)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    noise_sweep: NoiseSweepConfig = field(default_factory=NoiseSweepConfig)
    anneal_sweep: AnnealSweepConfig = field(default_factory=AnnealSweepConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    sampling_mode: str = "ode"
    sampling_noise: NoiseSchedule = field(default_factory=lambda: NoiseSchedule(NoiseKind.SQRT_RATIO, 0.0))
    anneal_hidden: tuple[int, ...] = (64, 64)
    anneal_shared_trunk: bool = True
    checkpoint_every: int = 50


# ---------------------------------------------------------------------------
# conversion


def to_plain(obj):
    """Dataclasses, enums and tuples to JSON/YAML-friendly builtins."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    return obj


def _convert(tp, value, path):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", typing.Union)):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(args[0], value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return from_plain(tp, value, path)
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(value)
        except ValueError:
            choices = ", ".join(e.value for e in tp)
            raise ConfigError(f"{path}: '{value}' is not one of {choices}") from None
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(tp)
        elem = args[0] if args else typing.Any
        return tuple(_convert(elem, v, f"{path}[]") for v in value)
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp in (int, float, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{path}: expected {tp.__name__}, got {value!r}")
    return value


def from_plain(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key '{(path + '.' if path else '') + unknown[0]}'")
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kw[f.name] = _convert(hints[f.name], data[f.name], f"{path}.{f.name}" if path else f.name)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path or cls.__name__}: {exc}") from None


def set_key(tree: dict, key: str, value) -> dict:
    """Set a dotted ``key`` in a plain config tree."""
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override key '{key}' is malformed")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override '{key}' descends into a non-mapping")
    node[parts[-1]] = value
    return tree


def apply_override(tree: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value``; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        raise ConfigError(f"override '{key}': value '{raw}' is not valid YAML") from None
    return set_key(tree, key, value)


def load_config(path=None, overrides=(), base: dict | None = None) -> ExperimentConfig:
    """Defaults, then ``base``, then each YAML file in ``path`` (one or a list), then overrides."""
    tree = to_plain(ExperimentConfig())
    _merge(tree, base or {})
    paths = [path] if isinstance(path, (str, os.PathLike)) else list(path or ())
    for p in paths:
        if not os.path.exists(p):
            raise ConfigError(f"config file '{p}' does not exist")
        with open(p) as fh:
            try:
                loaded = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"{p}: invalid YAML ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        _merge(tree, loaded)
    for ov in overrides:
        apply_override(tree, ov)
    return from_plain(ExperimentConfig, tree)


def _merge(dst: dict, src: dict):
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict) and k != "space":
            _merge(dst[k], v)
        else:
            dst[k] = v


HASH_EXCLUDED = ("out_dir",)


def config_hash(cfg) -> str:
    """Short sha256 of the canonical JSON config; the output location is left out."""
    tree = to_plain(cfg)
    if isinstance(tree, dict):
        tree = {k: v for k, v in tree.items() if k not in HASH_EXCLUDED}
    blob = json.dumps(tree, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def dump_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(to_plain(cfg), fh, sort_keys=True)
