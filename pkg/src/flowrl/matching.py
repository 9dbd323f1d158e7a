"""Brute-force periodic structure matching for small toy cells.

``periodic_rmsd(a, b)`` compares a candidate structure ``a`` with a reference
``b`` of the same composition:

1. Cell check: no match if any ``a.cell / b.cell`` deviates from 1 by more
   than ``ltol``.
2. Every same-species assignment of ``a``'s atoms to ``b``'s atoms is tried.
   For each, the global translation starts at the circular mean of the
   minimum-image displacements, is corrected by their arithmetic mean, and is
   then refined on a ``5**d`` grid of offsets spaced ``grid_step`` apart.
3. Displacements are converted to Cartesian with the mean of the two cells.
   The root-mean-square displacement is divided by ``(V_b / N) ** (1 / d)``
   (the reference volume), so swapping the arguments only changes that factor.

The result is a normalized rmsd (``float``) for a match and ``None`` otherwise.
Assignments whose grid-free rmsd already exceeds the best candidate by more
than the largest grid offset are skipped; the triangle inequality on the
torus guarantees they cannot win, so the answer equals full enumeration.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .interpolants import min_image
from .toyworld import ToyStructure

N_MAX = 8


@dataclass(frozen=True)
class MatcherTolerances:
    stol: float = 0.5
    ltol: float = 0.3
    grid_step: float = 0.02
    grid_half_width: int = 2

    def __post_init__(self):
        if self.stol <= 0 or self.ltol <= 0:
            raise ValueError("stol and ltol must be positive")


@lru_cache(maxsize=None)
def _assignments(species: tuple[int, ...]) -> np.ndarray:
    """All same-species assignments for atoms listed in ``species`` order.

    Row ``p`` maps candidate atom ``i`` to reference atom ``P[p, i]``.
    """
    groups: dict[int, list[int]] = {}
    for idx, sp in enumerate(species):
        groups.setdefault(sp, []).append(idx)
    group_perms = [list(itertools.permutations(idx)) for idx in groups.values()]
    n = len(species)
    rows = []
    for combo in itertools.product(*group_perms):
        row = np.empty(n, dtype=np.int64)
        for idx, perm in zip(groups.values(), combo):
            row[list(idx)] = perm
        rows.append(row)
    return np.array(rows)


@lru_cache(maxsize=None)
def _grid(dim: int, half_width: int, step: float) -> np.ndarray:
    k = np.arange(-half_width, half_width + 1) * step
    return np.array(list(itertools.product(*([k] * dim))))


def _circular_mean(d: np.ndarray) -> np.ndarray:
    """Circular mean over axis -2 of fractional displacements."""
    ang = 2.0 * np.pi * d
    s = np.sin(ang).mean(axis=-2)
    c = np.cos(ang).mean(axis=-2)
    return np.arctan2(s, c) / (2.0 * np.pi)


def periodic_rmsd(a: ToyStructure, b: ToyStructure, tol: MatcherTolerances = MatcherTolerances()):
    if a.composition != b.composition:
        raise ValueError("cannot match structures of different composition")
    n = a.n_atoms
    if n > N_MAX:
        raise ValueError(f"brute-force matching is limited to N <= {N_MAX}")
    if np.any(np.abs(a.cell / b.cell - 1.0) > tol.ltol):
        return None
    best = _best_rms(a, b, tol)
    norm = (b.volume / n) ** (1.0 / b.dim)
    rmsd = best / norm
    return rmsd if rmsd <= tol.stol else None


def _best_rms(a: ToyStructure, b: ToyStructure, tol: MatcherTolerances) -> float:
    order_a = np.argsort(a.species, kind="stable")
    order_b = np.argsort(b.species, kind="stable")
    fa, fb = a.frac[order_a], b.frac[order_b]
    species = tuple(a.species[order_a].tolist())
    cell = 0.5 * (a.cell + b.cell)
    n = len(species)

    perms = _assignments(species)
    pair = min_image(fb[None, :, :] - fa[:, None, :])  # (n, n, d)
    disp = pair[np.arange(n)[None, :], perms]  # (P, n, d)
    shift = _circular_mean(disp)
    shift = shift + min_image(disp - shift[:, None, :]).mean(axis=1)
    resid = min_image(disp - shift[:, None, :])
    rms0 = np.sqrt(np.mean(np.sum((resid * cell) ** 2, axis=-1), axis=-1))

    grid = _grid(a.dim, tol.grid_half_width, tol.grid_step)
    reach = float(np.max(np.sqrt(np.sum((grid * cell) ** 2, axis=-1))))
    keep = rms0 - reach <= rms0.min()
    cand = resid[keep]  # (P', n, d)
    moved = min_image(cand[:, None, :, :] - grid[None, :, None, :])  # (P', G, n, d)
    rms = np.sqrt(np.mean(np.sum((moved * cell) ** 2, axis=-1), axis=-1))
    return float(rms.min())
