import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowrl.matching import MatcherTolerances, periodic_rmsd
from flowrl.toyworld import ToyStructure
from oracles import naive_periodic_rmsd


def _structure(rng, n):
    species = np.sort(rng.integers(0, 3, size=n))
    return ToyStructure(species, rng.random((n, 2)), 2.0 + rng.random(2))


@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
@settings(max_examples=40, deadline=None)
def test_orbit_matches_at_zero(seed, n):
    rng = np.random.default_rng(seed)
    s = _structure(rng, n)
    t = s.translated(rng.random(2)).permuted(rng.permutation(n))
    t = ToyStructure(t.species, t.frac + rng.integers(-2, 3, size=t.frac.shape), t.cell).wrapped()
    r = periodic_rmsd(t, s)
    assert r is not None and r < 1e-9


def test_lattice_mismatch_rejected(rng):
    s = _structure(rng, 3)
    big = ToyStructure(s.species, s.frac, s.cell * 1.5)
    assert periodic_rmsd(big, s) is None


def test_composition_mismatch_raises(rng):
    a = ToyStructure(np.array([0, 0]), rng.random((2, 2)), np.ones(2))
    b = ToyStructure(np.array([0, 1]), rng.random((2, 2)), np.ones(2))
    with pytest.raises(ValueError):
        periodic_rmsd(a, b)


@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
@settings(max_examples=25, deadline=None)
def test_agrees_with_naive_matcher(seed, n):
    rng = np.random.default_rng(seed)
    b = _structure(rng, n)
    a = ToyStructure(b.species, b.frac + 0.05 * rng.normal(size=b.frac.shape), b.cell * (1 + 0.05 * rng.normal(size=2))).wrapped()
    tol = MatcherTolerances()
    got, want = periodic_rmsd(a, b, tol), naive_periodic_rmsd(a, b, tol.stol, tol.ltol, tol.grid_step)
    assert (got is None) == (want is None)
    if got is not None:
        assert abs(got - want) <= 1e-9


def test_small_displacement_rmsd_scale():
    b = ToyStructure(np.array([0, 1]), np.array([[0.0, 0.0], [0.5, 0.5]]), np.array([2.0, 2.0]))
    a = ToyStructure(b.species, np.array([[0.01, 0.0], [0.49, 0.5]]), b.cell)
    # displacements +-0.02 Cartesian along x, mean removed; normalised by sqrt(V / N) = sqrt(2)
    assert periodic_rmsd(a, b) == pytest.approx(0.02 / np.sqrt(2.0), abs=1e-12)
