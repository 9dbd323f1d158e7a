"""Toy periodic structures, an analytic energy oracle and relaxed datasets.

A structure is a set of ``N`` particles with species labels, fractional
coordinates on the ``d``-torus and a diagonal cell (one length per axis).

Energy
------
Pairs interact through a 12-6 well with its minimum ``-eps_well`` at
``r = sigma_ij`` (``sigma_ij`` is the mean of the two radii)::

    phi(r) = eps_well * ((sigma_ij / r)**12 - 2 * (sigma_ij / r)**6)

summed over all periodic images closer than ``cutoff * sigma_ij`` (self
images included), multiplied by a C2 switching polynomial that goes from 1 at
``switch_on * sigma_ij`` to 0 at the cutoff. A ``pressure * volume`` term keeps
cells from inflating. With cells larger than twice the cutoff only the
minimum image of each pair can contribute.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import rng as _rng
from .interpolants import min_image, wrap

REFSET_FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True, order=True)
class Composition:
    """Multiset of species indices (0-based), stored sorted."""

    species: tuple[int, ...]

    def __post_init__(self):
        sp = tuple(sorted(int(s) for s in self.species))
        if not sp:
            raise ValueError("composition must be non-empty")
        if sp[0] < 0:
            raise ValueError("species indices must be non-negative")
        object.__setattr__(self, "species", sp)

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    def counts(self, n_species: int) -> np.ndarray:
        return np.bincount(np.asarray(self.species), minlength=n_species)

    def label(self) -> str:
        return "-".join(str(s) for s in self.species)

    @classmethod
    def parse(cls, label: str) -> "Composition":
        return cls(tuple(int(x) for x in label.split("-")))


@dataclass(frozen=True, eq=False)
class ToyStructure:
    species: np.ndarray  # (N,) ints
    frac: np.ndarray  # (N, d) in [0, 1)
    cell: np.ndarray  # (d,) > 0

    def __post_init__(self):
        species = np.asarray(self.species, dtype=int).reshape(-1)
        frac = np.asarray(self.frac, dtype=float)
        cell = np.asarray(self.cell, dtype=float).reshape(-1)
        if frac.ndim != 2 or frac.shape[0] != species.shape[0]:
            raise ValueError("frac must be (N, d) matching species")
        if frac.shape[1] != cell.shape[0]:
            raise ValueError("cell must have one length per axis")
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "frac", frac)
        object.__setattr__(self, "cell", cell)

    @property
    def n_atoms(self) -> int:
        return int(self.species.shape[0])

    @property
    def dim(self) -> int:
        return int(self.cell.shape[0])

    @property
    def volume(self) -> float:
        return float(np.prod(self.cell))

    @property
    def composition(self) -> Composition:
        return Composition(tuple(self.species.tolist()))

    def wrapped(self) -> "ToyStructure":
        return ToyStructure(self.species, wrap(self.frac), self.cell)

    def translated(self, shift) -> "ToyStructure":
        return ToyStructure(self.species, wrap(self.frac + np.asarray(shift)), self.cell)

    def permuted(self, perm) -> "ToyStructure":
        perm = np.asarray(perm)
        return ToyStructure(self.species[perm], self.frac[perm], self.cell)

    def to_dict(self) -> dict:
        return {"species": self.species.tolist(), "frac": self.frac.tolist(), "cell": self.cell.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyStructure":
        return cls(np.asarray(d["species"], dtype=int), np.asarray(d["frac"], dtype=float), np.asarray(d["cell"], dtype=float))

    def same_as(self, other: "ToyStructure") -> bool:
        return (
            np.array_equal(self.species, other.species)
            and np.array_equal(self.frac, other.frac)
            and np.array_equal(self.cell, other.cell)
        )


@dataclass(frozen=True)
class EnergyModelParams:
    radii: tuple[float, ...] = (1.0, 1.2, 1.4)
    eps_well: float = 1.0
    pressure: float = 0.02
    switch_on: float = 2.0  # in units of sigma_ij
    cutoff: float = 2.5  # in units of sigma_ij
    max_shift: int = 6  # image shells per axis; bounds work on collapsed cells

    def __post_init__(self):
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        if min(self.radii) <= 0 or self.eps_well <= 0 or self.pressure < 0:
            raise ValueError("radii and eps_well must be positive, pressure non-negative")
        if not 0 < self.switch_on < self.cutoff:
            raise ValueError("need 0 < switch_on < cutoff")

    @property
    def n_species(self) -> int:
        return len(self.radii)


@dataclass(frozen=True)
class ValidityParams:
    v_min: float = 0.05
    r_min: float = 0.25
    r_min_rel: float = 0.7  # pair threshold relative to sigma_ij


# ---------------------------------------------------------------------------
# energy


def _pair_sigma(species, params: EnergyModelParams):
    radii = np.asarray(params.radii)[species]
    return 0.5 * (radii[:, None] + radii[None, :])


def _shift_grid(cell, reach, max_shift):
    n = np.minimum(np.ceil(reach / cell + 0.5).astype(int), max_shift)
    axes = [np.arange(-k, k + 1) for k in n]
    return np.array(list(itertools.product(*axes)), dtype=float)


def _switch(x):
    """C2 step from 1 (x <= 0) to 0 (x >= 1), and its derivative."""
    x = np.clip(x, 0.0, 1.0)
    x2 = x * x
    s = 1.0 - x2 * x * (10.0 - 15.0 * x + 6.0 * x2)
    ds = -30.0 * x2 * (1.0 - x) ** 2
    return s, ds


def _pair_terms(s: ToyStructure, params: EnergyModelParams, want_grad: bool):
    """Per-image pair energies (and dE/dr) over the ordered double sum."""
    sig = _pair_sigma(s.species, params)
    delta = min_image(s.frac[None, :, :] - s.frac[:, None, :])  # (N, N, d): j - i
    shifts = _shift_grid(s.cell, params.cutoff * float(sig.max()), params.max_shift)
    disp = delta[None] + shifts[:, None, None, :]  # (M, N, N, d) fractional
    cart = disp * s.cell
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        r = np.sqrt(np.sum(cart * cart, axis=-1))  # (M, N, N)
        n = s.n_atoms
        zero_shift = np.all(shifts == 0, axis=1)
        self_pair = np.zeros((shifts.shape[0], n, n), dtype=bool)
        self_pair[zero_shift] = np.eye(n, dtype=bool)
        r_on = params.switch_on * sig
        r_c = params.cutoff * sig
        active = (~self_pair) & (r < r_c)
        sr6 = (sig / r) ** 6
        phi = np.where(r > 0, params.eps_well * (sr6 * sr6 - 2.0 * sr6), np.inf)
        sw, dsw = _switch((r - r_on) / (r_c - r_on))
        e = np.where(active, phi * sw, 0.0)
        if not want_grad:
            return e, None, None, disp
        dphi = 12.0 * params.eps_well / r * (sr6 - sr6 * sr6)
        de = np.where(active, dphi * sw + phi * dsw / (r_c - r_on), 0.0)
    return e, de, r, disp


def energy(s: ToyStructure, params: EnergyModelParams = EnergyModelParams()):
    """Return ``(total energy, energy per atom)``; overlaps give ``inf``."""
    e, _, _, _ = _pair_terms(s, params, want_grad=False)
    total = 0.5 * float(np.sum(e)) + params.pressure * s.volume
    return total, total / s.n_atoms


def energy_grad(s: ToyStructure, params: EnergyModelParams = EnergyModelParams()):
    """Exact gradient of :func:`energy` w.r.t. fractional coordinates and cell lengths."""
    _, g_frac, g_cell = energy_and_grad(s, params)
    return g_frac, g_cell


def energy_and_grad(s: ToyStructure, params: EnergyModelParams = EnergyModelParams()):
    """``(total energy, d/d frac, d/d cell)`` from a single pass over the pairs."""
    e, de, r, disp = _pair_terms(s, params, want_grad=True)
    offdiag = ~np.eye(s.n_atoms, dtype=bool)
    if np.any(r[:, offdiag] == 0.0):
        raise ValueError("coincident particles: energy gradient undefined")
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(de != 0.0, 0.5 * de / r, 0.0)  # (M, N, N)
    # d r / d delta_a = disp_a * L_a^2 / r ; delta_ij = f_j - f_i
    c = np.einsum("mij,mija->ija", w, disp) * (s.cell * s.cell)  # (N, N, d)
    g_frac = c.sum(axis=0) - c.sum(axis=1)
    vol = s.volume
    g_cell = np.einsum("mij,mija->a", w, disp * disp) * s.cell + params.pressure * vol / s.cell
    total = 0.5 * float(np.sum(e)) + params.pressure * vol
    return total, g_frac, g_cell


# ---------------------------------------------------------------------------
# relaxation


def _cart_grad_norm(s, g_frac, g_cell, relax_cell):
    n2 = float(np.sum((g_frac / s.cell) ** 2))
    if relax_cell:
        n2 += float(np.sum(g_cell**2))
    return math.sqrt(n2)


def relax(
    s: ToyStructure,
    params: EnergyModelParams = EnergyModelParams(),
    steps: int = 500,
    step_size: float = 0.01,
    relax_cell: bool = True,
    gtol: float = 1e-10,
    max_disp: float = 0.1,
    max_cell_change: float = 0.05,
) -> ToyStructure:
    """Gradient descent with step halving on energy increase.

    Positions move along the Cartesian force, cell lengths along their own
    gradient. No particle moves more than ``max_disp`` and no cell length
    changes by more than ``max_cell_change`` (relative) in one step. A
    rejected trial halves the step and an accepted one grows it by 10 %, so
    the energy sequence never increases.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cur = s.wrapped()
    try:
        e_cur, g_f, g_c = energy_and_grad(cur, params)
    except ValueError:
        return cur
    if not np.isfinite(e_cur):
        return cur
    eta = step_size
    for _ in range(steps):
        if _cart_grad_norm(cur, g_f, g_c, relax_cell) < gtol:
            break
        force = -g_f / cur.cell  # Cartesian
        longest = float(np.max(np.sqrt(np.sum(force**2, axis=1))))
        if longest > 0:
            eta = min(eta, max_disp / longest)  # halving must shrink the actual move
        frac = cur.frac + eta * force / cur.cell
        cell = cur.cell
        if relax_cell:
            dc = -eta * g_c
            dc = np.clip(dc, -max_cell_change * cell, max_cell_change * cell)
            cell = cell + dc
        trial = ToyStructure(cur.species, wrap(frac), cell)
        try:
            e_trial, tg_f, tg_c = energy_and_grad(trial, params)
        except ValueError:
            e_trial = math.inf
        if np.isfinite(e_trial) and e_trial <= e_cur:
            cur, e_cur, g_f, g_c = trial, e_trial, tg_f, tg_c
            eta *= 1.1
        else:
            eta *= 0.5
            if eta < 1e-14:
                break
    return cur


def canonical_axes(s: ToyStructure) -> ToyStructure:
    """Order axes by increasing cell length (diagonal cells have no other frame choice)."""
    order = np.argsort(s.cell, kind="stable")
    return ToyStructure(s.species, s.frac[:, order], s.cell[order])


# ---------------------------------------------------------------------------
# validity


def min_pair_distance(s: ToyStructure, relative_to: EnergyModelParams | None = None) -> float:
    """Smallest minimum-image distance including each particle's own images.

    With ``relative_to`` given, distances are divided by ``sigma_ij`` first.
    """
    delta = min_image(s.frac[None, :, :] - s.frac[:, None, :]) * s.cell
    r = np.sqrt(np.sum(delta * delta, axis=-1))
    np.fill_diagonal(r, float(np.min(s.cell)))
    if relative_to is not None:
        r = r / _pair_sigma(s.species, relative_to)
    return float(np.min(r))


def validity_check(
    s: ToyStructure,
    vparams: ValidityParams = ValidityParams(),
    eparams: EnergyModelParams = EnergyModelParams(),
) -> str | None:
    """``None`` when valid, otherwise a short reason (``"volume"`` / ``"min-distance"``)."""
    if not (np.all(np.isfinite(s.frac)) and np.all(np.isfinite(s.cell))) or s.volume < vparams.v_min:
        return "volume"
    if min_pair_distance(s) < vparams.r_min or min_pair_distance(s, eparams) < vparams.r_min_rel:
        return "min-distance"
    return None


# ---------------------------------------------------------------------------
# base distribution


@dataclass(frozen=True)
class CellPrior:
    mu_log: float = math.log(2.4)
    sigma_log: float = 0.3

    def __post_init__(self):
        if self.sigma_log <= 0:
            raise ValueError("sigma_log must be positive")


def sample_base(c: Composition, prior: CellPrior, seed, dim: int = 2) -> ToyStructure:
    gen = seed if isinstance(seed, np.random.Generator) else _rng.stream(seed, "base", c.label())
    frac = wrap(gen.random((c.n_atoms, dim)))
    cell = np.exp(prior.mu_log + prior.sigma_log * gen.standard_normal(dim))
    return ToyStructure(np.asarray(c.species), frac, cell)


# ---------------------------------------------------------------------------
# datasets


@lru_cache(maxsize=None)
def all_compositions(n_species: int = 3, n_min: int = 2, n_max: int = 8) -> tuple[Composition, ...]:
    out = []
    for n in range(n_min, n_max + 1):
        out.extend(Composition(c) for c in itertools.combinations_with_replacement(range(n_species), n))
    return tuple(out)


@dataclass(frozen=True)
class DatasetConfig:
    n_inits: int = 8
    relax_steps: int = 400
    relax_step_size: float = 0.01
    init_area_per_radius2: float = 0.9
    max_polymorphs: int = 4
    energy_window: float = 0.25  # per atom above the composition's minimum
    distinct_rmsd: float = 0.25  # stol / 2
    split_fractions: tuple[float, float, float] = (0.6, 0.15, 0.25)
    polymorph_split: bool = True
    dim: int = 2


@dataclass(eq=False)
class DatasetEntry:
    structure: ToyStructure
    energy_per_atom: float
    split: str
    polymorph_id: int
    is_reference: bool

    @property
    def composition(self) -> Composition:
        return self.structure.composition


@dataclass(eq=False)
class ReferenceSet:
    entries: list[DatasetEntry]
    polymorph_split: bool = True
    energy_params: EnergyModelParams = field(default_factory=EnergyModelParams)

    def split(self, name: str) -> list[DatasetEntry]:
        return [e for e in self.entries if e.split == name]

    def compositions(self, split: str | None = None) -> list[Composition]:
        seen = {}
        for e in self.entries:
            if split is None or e.split == split:
                seen.setdefault(e.composition, None)
        return list(seen)

    def polymorphs(self, c: Composition, split: str | None = None) -> list[DatasetEntry]:
        return [e for e in self.entries if e.composition == c and (split is None or e.split == split)]

    def reference(self, c: Composition) -> DatasetEntry:
        for e in self.entries:
            if e.is_reference and e.composition == c:
                return e
        raise KeyError(f"no reference structure for composition {c.label()}")

    # -- JSONL persistence ------------------------------------------------
    # line 1: {"format": "flowrl-refset", "format_version": 1,
    #          "polymorph_split": bool, "energy_params": {...}}
    # then one entry per line: {"species", "frac", "cell", "energy_per_atom",
    #                           "split", "polymorph_id", "is_reference"}

    def save(self, path, header_extra: dict | None = None):
        ep = self.energy_params
        header = dict(header_extra or {})
        header.update({
            "format": "flowrl-refset",
            "format_version": REFSET_FORMAT_VERSION,
            "polymorph_split": self.polymorph_split,
            "energy_params": {
                "radii": list(ep.radii),
                "eps_well": ep.eps_well,
                "pressure": ep.pressure,
                "switch_on": ep.switch_on,
                "cutoff": ep.cutoff,
                "max_shift": ep.max_shift,
            },
        })
        with open(path, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for e in self.entries:
                row = e.structure.to_dict()
                row.update(
                    energy_per_atom=e.energy_per_atom,
                    split=e.split,
                    polymorph_id=e.polymorph_id,
                    is_reference=e.is_reference,
                )
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ReferenceSet":
        with open(path) as fh:
            lines = [ln for ln in fh if ln.strip()]
        if not lines:
            raise ValueError(f"{path}: empty reference set")
        header = json.loads(lines[0])
        if header.get("format") != "flowrl-refset" or header.get("format_version") != REFSET_FORMAT_VERSION:
            raise ValueError(f"{path}: not a version-{REFSET_FORMAT_VERSION} flowrl reference set")
        ep = header["energy_params"]
        eparams = EnergyModelParams(
            radii=tuple(ep["radii"]),
            eps_well=ep["eps_well"],
            pressure=ep["pressure"],
            switch_on=ep["switch_on"],
            cutoff=ep["cutoff"],
            max_shift=ep["max_shift"],
        )
        entries = []
        for ln in lines[1:]:
            row = json.loads(ln)
            entries.append(
                DatasetEntry(
                    ToyStructure.from_dict(row),
                    float(row["energy_per_atom"]),
                    row["split"],
                    int(row["polymorph_id"]),
                    bool(row["is_reference"]),
                )
            )
        return cls(entries, bool(header["polymorph_split"]), eparams)


def _random_init(c: Composition, params: EnergyModelParams, cfg: DatasetConfig, gen) -> ToyStructure:
    radii = np.asarray(params.radii)[list(c.species)]
    area = cfg.init_area_per_radius2 * float(np.sum(radii**2))
    side = area ** (1.0 / cfg.dim)
    cell = side * np.exp(gen.uniform(-0.25, 0.25, size=cfg.dim))
    return ToyStructure(np.asarray(c.species), gen.random((c.n_atoms, cfg.dim)), cell)


def composition_polymorphs(
    c: Composition,
    seed: int,
    params: EnergyModelParams = EnergyModelParams(),
    cfg: DatasetConfig = DatasetConfig(),
) -> list[tuple[ToyStructure, float]]:
    """Relax random starts and keep distinct low-energy minima, lowest first."""
    from .matching import MatcherTolerances, periodic_rmsd

    gen = _rng.stream(seed, "dataset", c.label())
    relaxed = []
    for _ in range(cfg.n_inits):
        s = relax(_random_init(c, params, cfg, gen), params, cfg.relax_steps, cfg.relax_step_size)
        s = canonical_axes(s)
        e = energy(s, params)[1]
        if np.isfinite(e) and validity_check(s, eparams=params) is None:
            relaxed.append((s, e))
    relaxed.sort(key=lambda se: se[1])
    if not relaxed:
        return []
    tol = MatcherTolerances()
    e_min = relaxed[0][1]
    kept: list[tuple[ToyStructure, float]] = []
    for s, e in relaxed:
        if e > e_min + cfg.energy_window or len(kept) >= cfg.max_polymorphs:
            break
        distinct = True
        for k, _ in kept:
            d = periodic_rmsd(k, s, tol)
            if d is not None and d <= cfg.distinct_rmsd:
                distinct = False
                break
        if distinct:
            kept.append((s, e))
    return kept


def _assign(gen, fractions) -> str:
    u = gen.random()
    acc = 0.0
    for name, f in zip(SPLITS, fractions):
        acc += f
        if u < acc:
            return name
    return SPLITS[-1]


def generate_dataset(
    compositions,
    seed: int,
    params: EnergyModelParams = EnergyModelParams(),
    cfg: DatasetConfig = DatasetConfig(),
) -> ReferenceSet:
    compositions = list(compositions)
    if not compositions:
        raise ValueError("need at least one composition")
    entries = []
    for c in compositions:
        kept = composition_polymorphs(c, seed, params, cfg)
        split_gen = _rng.stream(seed, "split", c.label())
        comp_split = _assign(split_gen, cfg.split_fractions)
        for pid, (s, e) in enumerate(kept):
            split = comp_split if cfg.polymorph_split else _assign(split_gen, cfg.split_fractions)
            entries.append(DatasetEntry(s, float(e), split, pid, pid == 0))
    return ReferenceSet(entries, cfg.polymorph_split, params)


def fit_cell_prior(refs: ReferenceSet, split: str = "train") -> CellPrior:
    logs = np.concatenate([np.log(e.structure.cell) for e in refs.split(split)])
    return CellPrior(float(np.mean(logs)), float(max(np.std(logs), 1e-3)))


def with_cell(s: ToyStructure, cell) -> ToyStructure:
    return replace(s, cell=np.asarray(cell, dtype=float))
