"""Independent reference implementations used only by the tests.

Written with plain loops and closed forms, sharing no code with the package
beyond the structure container.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def _mi(x):
    return x - math.ceil(x - 0.5)


def naive_periodic_rmsd(a, b, stol=0.5, ltol=0.3, grid_step=0.02, half_width=2):
    """Exhaustive matcher over all permutations with an explicit species filter."""
    if sorted(a.species.tolist()) != sorted(b.species.tolist()):
        raise ValueError("different composition")
    for la, lb in zip(a.cell, b.cell):
        if abs(la / lb - 1.0) > ltol:
            return None
    n, d = a.n_atoms, a.dim
    cell = [0.5 * (a.cell[k] + b.cell[k]) for k in range(d)]
    offsets = [k * grid_step for k in range(-half_width, half_width + 1)]
    best = math.inf
    for perm in itertools.permutations(range(n)):
        if any(a.species[i] != b.species[perm[i]] for i in range(n)):
            continue
        disp = [[_mi(b.frac[perm[i], k] - a.frac[i, k]) for k in range(d)] for i in range(n)]
        shift = []
        for k in range(d):
            s = sum(math.sin(2 * math.pi * disp[i][k]) for i in range(n)) / n
            c = sum(math.cos(2 * math.pi * disp[i][k]) for i in range(n)) / n
            shift.append(math.atan2(s, c) / (2 * math.pi))
        for k in range(d):
            shift[k] += sum(_mi(disp[i][k] - shift[k]) for i in range(n)) / n
        resid = [[_mi(disp[i][k] - shift[k]) for k in range(d)] for i in range(n)]
        for off in itertools.product(offsets, repeat=d):
            total = 0.0
            for i in range(n):
                for k in range(d):
                    total += (_mi(resid[i][k] - off[k]) * cell[k]) ** 2
            best = min(best, math.sqrt(total / n))
    vol = 1.0
    for k in range(d):
        vol *= float(b.cell[k])
    rmsd = best / (vol / n) ** (1.0 / d)
    return rmsd if rmsd <= stol else None


def gaussian_flow_field(m, s):
    """Velocity of the linear bridge between N(0, 1) and N(m, s^2).

    The marginal at time t is N(t m, (1-t)^2 + t^2 s^2) and the field
    transporting it is mu' + v' / (2 v) (x - mu).
    """

    def b(t, x):
        mu, dmu = t * m, m
        v = (1 - t) ** 2 + t * t * s * s
        dv = -2 * (1 - t) + 2 * t * s * s
        return dmu + dv / (2 * v) * (x - mu)

    return b


def mc_gaussian_kl(mu_p, var_p, mu_q, var_q, n, rng):
    """Monte-Carlo estimate of KL[p || q] for 1-D Gaussians: (mean, standard error)."""
    x = mu_p + math.sqrt(var_p) * rng.standard_normal(n)
    lp = -0.5 * (np.log(2 * np.pi * var_p) + (x - mu_p) ** 2 / var_p)
    lq = -0.5 * (np.log(2 * np.pi * var_q) + (x - mu_q) ** 2 / var_q)
    w = lp - lq
    return float(w.mean()), float(w.std(ddof=1) / math.sqrt(n))


def lj_pair_brute(r, sigma, eps=1.0):
    return eps * ((sigma / r) ** 12 - 2 * (sigma / r) ** 6)


def central_diff(f, x, h=1e-6):
    """Central finite differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
