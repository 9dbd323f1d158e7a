import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowrl.evalmetrics import (
    EvalReport, energy_stats, evaluation_compositions, match_rate, metre_crmse, report, write_reports_csv,
)
from flowrl.matching import MatcherTolerances
from flowrl.toyworld import ToyStructure


def _collapsed(c):
    """A same-composition structure with every atom on one site (always invalid)."""
    return ToyStructure(np.asarray(c.species), np.zeros((c.n_atoms, 2)), np.array([2.0, 2.0]))


def test_references_scored_against_themselves(tiny_refs):
    gen = [e.structure for e in tiny_refs.entries]
    r = report(gen, tiny_refs, n_steps=1)
    assert r.metre == 1.0 and r.crmse == pytest.approx(0.0, abs=1e-9)
    # every polymorph is present, so at least the reference polymorphs match
    n_ref = len(tiny_refs.compositions())
    assert r.match_rate >= n_ref / len(gen)
    refs_only = [tiny_refs.reference(c).structure for c in tiny_refs.compositions()]
    r = report(refs_only, tiny_refs, n_steps=1)
    assert r.match_rate == 1.0 and r.rmse == pytest.approx(0.0, abs=1e-9)
    assert r.mean_rel_energy == pytest.approx(0.0, abs=1e-9) and r.invalid_energy_rate == 0.0


def test_invalid_samples_excluded_from_energy_means(tiny_refs):
    comps = tiny_refs.compositions()
    good = [tiny_refs.reference(c).structure for c in comps]
    bad = [_collapsed(c) for c in comps]
    rel, inv, mean_e = energy_stats(good + bad, tiny_refs)
    assert inv == pytest.approx(0.5)
    assert rel == pytest.approx(0.0, abs=1e-9)
    assert mean_e == pytest.approx(np.mean([tiny_refs.reference(c).energy_per_atom for c in comps]))
    assert energy_stats(bad, tiny_refs) == (None, 1.0, None)


def test_unmatched_polymorphs_count_as_stol(tiny_refs):
    comps = tiny_refs.compositions()
    bad = [_collapsed(c) for c in comps]
    tol = MatcherTolerances()
    metre, crmse = metre_crmse(bad, tiny_refs, tol)
    assert metre == 0.0 and crmse == pytest.approx(tol.stol)
    rate, rmse = match_rate(bad, tiny_refs, tol)
    assert rate == 0.0 and rmse is None


@given(st.lists(st.booleans(), min_size=6, max_size=6))
@settings(max_examples=20, deadline=None)
def test_adding_samples_never_worsens_coverage(tiny_refs, keep):
    comps = tiny_refs.compositions()
    base = [_collapsed(c) for c in comps]
    extra = [tiny_refs.reference(c).structure for c, k in zip(comps, keep) if k]
    m0, c0 = metre_crmse(base, tiny_refs)
    m1, c1 = metre_crmse(base + extra, tiny_refs)
    assert m1 >= m0 and c1 <= c0 + 1e-12


def test_split_restricted_coverage_requires_all_compositions(tiny_refs):
    test_comps = tiny_refs.compositions("test")
    gen = [tiny_refs.reference(c).structure for c in test_comps]
    metre, _ = metre_crmse(gen, tiny_refs, split="test")
    assert metre > 0
    if len(test_comps) > 1:
        with pytest.raises(ValueError):
            metre_crmse(gen[:1], tiny_refs, split="test")


def test_evaluation_compositions_cycle(tiny_refs):
    comps = tiny_refs.compositions("val")
    cyc = evaluation_compositions(tiny_refs, "val", 5 * len(comps))
    assert len(cyc) == 5 * len(comps) and cyc[: len(comps)] == comps and cyc[len(comps):2 * len(comps)] == comps
    with pytest.raises(ValueError):
        evaluation_compositions(tiny_refs, "nope")


def test_report_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        EvalReport(1.5, None, 0.0, 0.5, None, 0.0, 10, 1)
    r = EvalReport(0.5, None, 0.25, 0.4, None, 0.1, 10, 4, extra={"seed": 3})
    d = r.to_dict()
    assert "rmse" not in d and d["seed"] == 3
    write_reports_csv(tmp_path / "r.csv", [d])
    row = next(csv.DictReader(open(tmp_path / "r.csv")))
    assert row["rmse"] == "" and float(row["crmse"]) == 0.4 and row["seed"] == "3"
