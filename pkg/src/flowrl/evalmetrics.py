"""Evaluation metrics for generated toy structures.

Generated sets are plain lists of structures. A composition may appear more
than once; each generated structure is then scored on its own for the match
rate, and all samples of a composition compete for each reference polymorph
in the coverage metrics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .matching import MatcherTolerances, periodic_rmsd
from .toyworld import EnergyModelParams, ReferenceSet, ValidityParams, energy, validity_check


@dataclass
class EvalReport:
    match_rate: float
    rmse: float | None
    metre: float
    crmse: float
    mean_rel_energy: float | None
    invalid_energy_rate: float
    n_steps: int
    n_samples: int
    mean_energy: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("match_rate", "metre", "invalid_energy_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} outside [0, 1]")

    def to_dict(self) -> dict:
        d = {
            "match_rate": self.match_rate,
            "metre": self.metre,
            "crmse": self.crmse,
            "invalid_energy_rate": self.invalid_energy_rate,
            "n_steps": self.n_steps,
            "n_samples": self.n_samples,
        }
        # absent rather than a sentinel when nothing matched / nothing was valid
        if self.rmse is not None:
            d["rmse"] = self.rmse
        if self.mean_rel_energy is not None:
            d["mean_rel_energy"] = self.mean_rel_energy
        if self.mean_energy is not None:
            d["mean_energy"] = self.mean_energy
        d.update(self.extra)
        return d


def structure_energies(structures, eparams: EnergyModelParams = EnergyModelParams(), vparams: ValidityParams = ValidityParams()):
    """Per-atom energies and validity flags; invalid entries get NaN."""
    e = np.full(len(structures), np.nan)
    valid = np.zeros(len(structures), dtype=bool)
    for i, s in enumerate(structures):
        if validity_check(s, vparams, eparams) is None:
            _, epa = energy(s, eparams)
            if np.isfinite(epa):
                e[i], valid[i] = epa, True
    return e, valid


def reference_energies(structures, refs: ReferenceSet) -> np.ndarray:
    cache = {}
    out = np.empty(len(structures))
    for i, s in enumerate(structures):
        c = s.composition
        if c not in cache:
            cache[c] = refs.reference(c).energy_per_atom
        out[i] = cache[c]
    return out


def match_table(generated, refs: ReferenceSet, tol: MatcherTolerances = MatcherTolerances(), split: str | None = None):
    """rmsd of each generated structure against each same-composition polymorph.

    Returns ``{(i, polymorph index): rmsd or None}`` where polymorph indices
    refer to ``refs.polymorphs(composition, split)`` order.
    """
    table = {}
    for i, s in enumerate(generated):
        for j, p in enumerate(refs.polymorphs(s.composition, split)):
            table[(i, j)] = periodic_rmsd(s, p.structure, tol)
    return table


def match_rate(generated, refs: ReferenceSet, tol: MatcherTolerances = MatcherTolerances(), table=None):
    """Fraction of generated structures that match their composition's reference.

    Returns ``(rate, rmse)``; ``rmse`` averages over matched pairs and is
    ``None`` when nothing matched.
    """
    if not generated:
        raise ValueError("empty generated set")
    hits = []
    for i, s in enumerate(generated):
        ref = refs.reference(s.composition)
        if table is not None:
            pid = [e.polymorph_id for e in refs.polymorphs(s.composition)].index(ref.polymorph_id)
            r = table[(i, pid)]
        else:
            r = periodic_rmsd(s, ref.structure, tol)
        if r is not None:
            hits.append(r)
    rate = len(hits) / len(generated)
    return rate, (float(np.mean(hits)) if hits else None)


def metre_crmse(generated, refs: ReferenceSet, tol: MatcherTolerances = MatcherTolerances(), split: str | None = None, table=None):
    """Coverage of reference polymorphs by the generated set.

    Every polymorph (of the generated compositions, restricted to ``split``
    if given) takes its best rmsd over same-composition generated samples;
    unmatched polymorphs count as ``stol`` in the mean.
    """
    by_comp: dict = {}
    for i, s in enumerate(generated):
        by_comp.setdefault(s.composition, []).append(i)
    if split is not None:
        missing = [c for c in refs.compositions(split) if c not in by_comp]
        if missing:
            raise ValueError(f"no generated structure for composition {missing[0].label()}")
    matched, scores = 0, []
    for c, idx in by_comp.items():
        polys = refs.polymorphs(c)
        for j, p in enumerate(polys):
            if split is not None and p.split != split:
                continue
            best = None
            for i in idx:
                r = table[(i, j)] if table is not None else periodic_rmsd(generated[i], p.structure, tol)
                if r is not None and (best is None or r < best):
                    best = r
            if best is None:
                scores.append(tol.stol)
            else:
                matched += 1
                scores.append(best)
    if not scores:
        raise ValueError("no reference polymorphs for the generated compositions")
    return matched / len(scores), float(np.mean(scores))


def energy_stats(generated, refs: ReferenceSet, eparams: EnergyModelParams | None = None, vparams: ValidityParams = ValidityParams()):
    """``(mean relative energy per atom, invalid rate, mean energy per atom)``.

    Means run over valid samples only and are ``None`` when none is valid.
    """
    eparams = eparams or refs.energy_params
    e, valid = structure_energies(generated, eparams, vparams)
    rel = e - reference_energies(generated, refs)
    rate = 1.0 - valid.mean()
    if not valid.any():
        return None, float(rate), None
    return float(np.mean(rel[valid])), float(rate), float(np.mean(e[valid]))


def evaluation_compositions(refs: ReferenceSet, split: str, n_samples: int | None = None):
    """Compositions of ``split``, cycled until ``n_samples`` entries are listed."""
    comps = refs.compositions(split)
    if not comps:
        raise ValueError(f"split '{split}' is empty")
    n = n_samples or len(comps)
    return [comps[i % len(comps)] for i in range(max(n, len(comps)))]


def report(generated, refs: ReferenceSet, n_steps: int, tol: MatcherTolerances = MatcherTolerances(),
           vparams: ValidityParams = ValidityParams(), split: str | None = None, extra=None) -> EvalReport:
    table = match_table(generated, refs, tol)
    rate, rmse = match_rate(generated, refs, tol, table)
    metre, crmse = metre_crmse(generated, refs, tol, split, table)
    mean_rel, inv, mean_e = energy_stats(generated, refs, None, vparams)
    return EvalReport(rate, rmse, metre, crmse, mean_rel, inv, n_steps, len(generated), mean_e, dict(extra or {}))


def evaluate(policy, refs: ReferenceSet, split: str, n_steps: int, seed: int, n_samples: int | None = None,
             tol: MatcherTolerances = MatcherTolerances(), vparams: ValidityParams = ValidityParams(), extra=None) -> EvalReport:
    from .dynamics import sample

    comps = evaluation_compositions(refs, split, n_samples)
    generated = sample(policy, comps, n_steps, seed)
    return report(generated, refs, n_steps, tol, vparams, split, extra)


def step_sweep(policy, n_steps_list, refs: ReferenceSet, split: str, seed: int, n_samples: int | None = None,
               tol: MatcherTolerances = MatcherTolerances(), vparams: ValidityParams = ValidityParams()):
    """Evaluate the same compositions and seeds at each step count."""
    out = []
    for n in n_steps_list:
        if n < 1:
            raise ValueError("step counts must be >= 1")
        out.append(evaluate(policy, refs, split, int(n), seed, n_samples, tol, vparams))
    return out


REPORT_COLUMNS = ("n_steps", "n_samples", "match_rate", "rmse", "metre", "crmse", "mean_rel_energy", "mean_energy", "invalid_energy_rate")


def write_reports_csv(path, rows, columns=None):
    """Write dict rows as CSV; missing fields are left empty."""
    rows = list(rows)
    columns = list(columns or REPORT_COLUMNS)
    for r in rows:
        for k in r:
            if k not in columns:
                columns.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return v
