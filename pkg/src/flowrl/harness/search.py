"""Random search over dotted config keys.

A space is written in the config as a mapping from dotted keys to one
distribution each::

    space:
      rl.lr: {loguniform: [1.0e-5, 1.0e-3]}
      rl.clip_eps: {uniform: [0.1, 0.3]}
      rl.group_size: {choice: [8, 16, 32]}
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import rng as _rng


@dataclass(frozen=True)
class Choice:
    options: tuple

    def __post_init__(self):
        if not self.options:
            raise ValueError("choice needs at least one option")

    def draw(self, gen):
        return self.options[int(gen.integers(len(self.options)))]


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"uniform needs lo < hi, got [{self.lo}, {self.hi}]")

    def draw(self, gen):
        return float(gen.uniform(self.lo, self.hi))


@dataclass(frozen=True)
class LogUniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 < self.lo < self.hi:
            raise ValueError(f"loguniform needs 0 < lo < hi, got [{self.lo}, {self.hi}]")

    def draw(self, gen):
        return float(math.exp(gen.uniform(math.log(self.lo), math.log(self.hi))))


_KINDS = {"choice": Choice, "uniform": Uniform, "loguniform": LogUniform}


@dataclass(frozen=True)
class SearchSpace:
    dists: tuple  # ((dotted key, distribution), ...) in sorted key order
    budget: int = 1

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("search budget must be >= 1")

    @classmethod
    def parse(cls, space: dict, budget: int) -> "SearchSpace":
        out = []
        for key in sorted(space):
            spec = space[key]
            if not isinstance(spec, dict) or len(spec) != 1:
                raise ValueError(f"search space entry '{key}' must be a one-key mapping like {{uniform: [lo, hi]}}")
            (name, args), = spec.items()
            if name not in _KINDS:
                raise ValueError(f"search space entry '{key}': unknown distribution '{name}'")
            if name == "choice":
                out.append((key, Choice(tuple(args))))
            else:
                lo, hi = args
                out.append((key, _KINDS[name](float(lo), float(hi))))
        return cls(tuple(out), budget)

    def draw(self, seed: int, trial: int) -> dict:
        gen = _rng.stream(seed, "search-trial", trial)
        return {k: d.draw(gen) for k, d in self.dists}


@dataclass
class Trial:
    index: int
    params: dict
    score: float | None
    error: str | None = None
    info: dict | None = None

    def to_dict(self) -> dict:
        d = {"trial": self.index, "params": self.params, "score": self.score}
        if self.error is not None:
            d["error"] = self.error
        if self.info:
            d["info"] = self.info
        return d


def random_search(space: SearchSpace, objective, seed: int, runner=None):
    """Draw ``space.budget`` i.i.d. trials and score them with ``objective``.

    ``objective(index, params)`` returns ``(score, info)``; higher is better.
    A trial that raises is logged with its error and skipped for selection.
    ``runner(fn, items)`` may map trials in parallel and must preserve order.
    Returns ``(best trial or None, all trials)``.
    """
    draws = [(i, space.draw(seed, i)) for i in range(space.budget)]
    results = (runner or _serial)(_Guarded(objective), draws)
    trials = [Trial(i, p, *res) for (i, p), res in zip(draws, results)]
    scored = [t for t in trials if t.score is not None and np.isfinite(t.score)]
    best = max(scored, key=lambda t: (t.score, -t.index)) if scored else None
    return best, trials


class _Guarded:
    def __init__(self, objective):
        self.objective = objective

    def __call__(self, item):
        i, params = item
        try:
            score, info = self.objective(i, params)
            return float(score), None, info
        except Exception as exc:  # noqa: BLE001 - failed trials are logged, not fatal
            return None, f"{type(exc).__name__}: {exc}", None


def _serial(fn, items):
    return [fn(x) for x in items]
