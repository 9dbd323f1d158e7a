"""Per-particle velocity / denoiser network on padded structure batches.

Every particle gets a feature vector built from the time, its own species,
global composition and cell information, and symmetric summaries of its
neighbours (Fourier modes of fractional displacements and Gaussian-weighted
Cartesian displacements, both per neighbour species). The same MLP is applied
to every particle, so outputs permute with same-species relabelling; all
features depend on coordinates only through displacements, so they are
wrap- and translation-invariant.

Per-particle outputs are split into heads: position velocity (``d``),
optional position denoiser (``d``), lattice velocity (``d``, averaged over the
particles of a structure).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import diffnet
from .interpolants import min_image
from .toyworld import ToyStructure


@dataclass(frozen=True)
class FeaturizerConfig:
    n_species: int = 3
    dim: int = 2
    harmonics: int = 2
    rbf_widths: tuple[float, ...] = (1.0, 1.6)
    time_freqs: int = 2

    @property
    def n_features(self) -> int:
        k, d = self.n_species, self.dim
        n_time = 1 + 2 * self.time_freqs
        n_global = k + 1 + d
        n_fourier = k * 2 * self.harmonics * d
        n_rbf = k * len(self.rbf_widths) * (1 + d)
        return n_time + k + n_global + n_fourier + n_rbf

    @property
    def n_pair_features(self) -> int:
        return self.n_species + 2 * self.harmonics * self.dim + self.dim + 1 + len(self.rbf_widths)

    def to_dict(self) -> dict:
        return {
            "n_species": self.n_species,
            "dim": self.dim,
            "harmonics": self.harmonics,
            "rbf_widths": list(self.rbf_widths),
            "time_freqs": self.time_freqs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeaturizerConfig":
        return cls(d["n_species"], d["dim"], d["harmonics"], tuple(d["rbf_widths"]), d["time_freqs"])


@dataclass
class Batch:
    """Padded batch of structures: ``species``/``mask`` are (B, N), ``frac`` (B, N, d), ``cell`` (B, d)."""

    species: np.ndarray
    mask: np.ndarray
    frac: np.ndarray
    cell: np.ndarray

    @property
    def n_atoms(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def with_state(self, frac, cell) -> "Batch":
        return Batch(self.species, self.mask, frac, cell)

    def structure(self, b: int) -> ToyStructure:
        m = self.mask[b]
        return ToyStructure(self.species[b, m], self.frac[b, m], self.cell[b])

    def structures(self) -> list[ToyStructure]:
        return [self.structure(b) for b in range(self.mask.shape[0])]


def stack(structures, n_max: int | None = None) -> Batch:
    structures = list(structures)
    n_max = n_max or max(s.n_atoms for s in structures)
    d = structures[0].dim
    B = len(structures)
    species = np.zeros((B, n_max), dtype=int)
    mask = np.zeros((B, n_max), dtype=bool)
    frac = np.zeros((B, n_max, d))
    cell = np.zeros((B, d))
    for b, s in enumerate(structures):
        n = s.n_atoms
        species[b, :n] = s.species
        mask[b, :n] = True
        frac[b, :n] = s.frac
        cell[b] = s.cell
    return Batch(species, mask, frac, cell)


def time_features(t, n_freqs: int) -> np.ndarray:
    t = np.asarray(t, dtype=float).reshape(-1)
    cols = [t]
    for k in range(1, n_freqs + 1):
        cols += [np.sin(np.pi * k * t), np.cos(np.pi * k * t)]
    return np.stack(cols, axis=-1)


def featurize(cfg: FeaturizerConfig, t, batch: Batch) -> np.ndarray:
    """Return (B, N, F) per-particle features; padded rows are zero."""
    B, N, d = batch.frac.shape
    K = cfg.n_species
    mask = batch.mask
    mf = mask.astype(float)
    n_at = mf.sum(axis=1)  # (B,)
    onehot = np.zeros((B, N, K))
    onehot[np.arange(B)[:, None], np.arange(N)[None, :], batch.species] = 1.0
    onehot *= mf[..., None]

    t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
    f_time = np.broadcast_to(time_features(t, cfg.time_freqs)[:, None, :], (B, N, 1 + 2 * cfg.time_freqs))
    frac_comp = onehot.sum(axis=1) / n_at[:, None]  # (B, K)
    f_global = np.concatenate([frac_comp, (1.0 / n_at)[:, None], np.log(batch.cell)], axis=1)
    f_global = np.broadcast_to(f_global[:, None, :], (B, N, f_global.shape[1]))

    # neighbour j of particle i, excluding i itself and padding
    pair_w = mf[:, :, None] * mf[:, None, :] * (1.0 - np.eye(N))[None]
    delta = min_image(batch.frac[:, None, :, :] - batch.frac[:, :, None, :])  # (B, i, j, d)
    nb = pair_w[..., None] * onehot[:, None, :, :]  # (B, i, j, K)
    denom = np.maximum(n_at - 1.0, 1.0)[:, None, None, None]

    four = []
    for h in range(1, cfg.harmonics + 1):
        ang = 2.0 * np.pi * h * delta
        four += [np.sin(ang), np.cos(ang)]
    four = np.stack(four, axis=-1)  # (B, i, j, d, 2H)
    f_four = np.einsum("bijk,bijdh->bikdh", nb, four) / denom[..., None]
    f_four = f_four.reshape(B, N, -1)

    cart = delta * batch.cell[:, None, None, :]
    r2 = np.sum(cart * cart, axis=-1)
    rbf = []
    for c in cfg.rbf_widths:
        w = np.exp(-r2 / (c * c))[..., None]
        rbf.append(np.concatenate([w, w * cart / c], axis=-1))  # (B, i, j, 1+d)
    rbf = np.stack(rbf, axis=-2)  # (B, i, j, C, 1+d)
    f_rbf = np.einsum("bijk,bijcf->bikcf", nb, rbf).reshape(B, N, -1)

    feats = np.concatenate([f_time, onehot, f_global, f_four, f_rbf], axis=-1)
    return feats * mf[..., None]


def pair_features(cfg: FeaturizerConfig, batch: Batch) -> np.ndarray:
    """(B, N, N, P) features of neighbour ``j`` seen from particle ``i``.

    Species of ``j``, Fourier modes and Cartesian form of the minimum-image
    displacement, its length and Gaussian weights of the length. Entries with
    ``i == j`` or padding are zero.
    """
    B, N, d = batch.frac.shape
    mf = batch.mask.astype(float)
    pm = mf[:, :, None] * mf[:, None, :] * (1.0 - np.eye(N))[None]
    onehot = np.zeros((B, N, cfg.n_species))
    onehot[np.arange(B)[:, None], np.arange(N)[None, :], batch.species] = 1.0
    delta = min_image(batch.frac[:, None, :, :] - batch.frac[:, :, None, :])
    cols = [np.broadcast_to(onehot[:, None, :, :], (B, N, N, cfg.n_species))]
    for h in range(1, cfg.harmonics + 1):
        ang = 2.0 * np.pi * h * delta
        cols += [np.sin(ang), np.cos(ang)]
    cart = delta * batch.cell[:, None, None, :]
    r = np.sqrt(np.sum(cart * cart, axis=-1, keepdims=True))
    cols += [cart, r]
    cols += [np.exp(-(r * r) / (c * c)) for c in cfg.rbf_widths]
    return np.concatenate(cols, axis=-1) * pm[..., None]


@dataclass
class Features:
    """Per-particle features plus, for pair models, per-pair features."""

    atom: np.ndarray
    pair: np.ndarray | None = None


@dataclass(frozen=True)
class FlowModel:
    """Featurizer, networks and head layout. Parameters are passed separately.

    Every particle's raw output is ``atom_net(f_i)``, plus, when ``pair_net``
    is set, the mean over neighbours ``j`` of ``pair_net([f_i, e_ij])``. The
    parameter vector is the atom network's followed by the pair network's.
    """

    featurizer: FeaturizerConfig
    net: diffnet.NetworkSpec
    has_denoiser: bool = False
    pair_net: diffnet.NetworkSpec | None = None

    @classmethod
    def build(cls, featurizer: FeaturizerConfig, hidden=(64, 64), activation="tanh", has_denoiser=False, pair_hidden=None):
        d = featurizer.dim
        out = (3 if has_denoiser else 2) * d
        spec = diffnet.NetworkSpec(featurizer.n_features, tuple(hidden), out, activation)
        pair = None
        if pair_hidden:
            n_in = featurizer.n_features + featurizer.n_pair_features
            pair = diffnet.NetworkSpec(n_in, tuple(pair_hidden), out, activation)
        return cls(featurizer, spec, has_denoiser, pair)

    @property
    def dim(self) -> int:
        return self.featurizer.dim

    @property
    def n_params(self) -> int:
        return self.net.n_params + (self.pair_net.n_params if self.pair_net else 0)

    def init(self, seed: int) -> np.ndarray:
        parts = [diffnet.net_init(self.net, seed)]
        if self.pair_net:
            parts.append(diffnet.net_init(self.pair_net, seed + 1))
        return np.concatenate(parts)

    def features(self, t, batch: Batch) -> Features:
        atom = featurize(self.featurizer, t, batch)
        pair = pair_features(self.featurizer, batch) if self.pair_net else None
        return Features(atom, pair)

    def _split(self, params):
        k = self.net.n_params
        if params.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {params.size}")
        return params[:k], params[k:]

    def forward_features(self, params, feats: Features, mask: np.ndarray):
        """Heads from precomputed features. Returns (heads dict, cache)."""
        B, N, F = feats.atom.shape
        d = self.dim
        p_atom, p_pair = self._split(params)
        y, cache = diffnet.mlp_forward(self.net, p_atom, feats.atom.reshape(B * N, F))
        y = y.reshape(B, N, -1)
        mf = mask.astype(float)
        pair_cache = None
        if self.pair_net:
            yp, pair_cache = _pair_forward(self.pair_net, p_pair, feats.atom, feats.pair, mf)
            y = y + yp
        heads = {"velocity": y[..., :d] * mf[..., None]}
        if self.has_denoiser:
            heads["denoiser"] = y[..., d : 2 * d] * mf[..., None]
        lat = y[..., -d:]
        n_at = mf.sum(axis=1, keepdims=True)
        heads["lattice"] = np.einsum("bn,bnd->bd", mf, lat) / n_at
        return heads, (cache, pair_cache, mf, n_at, B, N)

    def backward(self, aux, grads: dict) -> np.ndarray:
        """Parameter gradient given cotangents of the heads (missing heads count as zero)."""
        cache, pair_cache, mf, n_at, B, N = aux
        d = self.dim
        gy = np.zeros((B, N, self.net.output_dim))
        if "velocity" in grads:
            gy[..., :d] = grads["velocity"] * mf[..., None]
        if self.has_denoiser and "denoiser" in grads:
            gy[..., d : 2 * d] = grads["denoiser"] * mf[..., None]
        if "lattice" in grads:
            gy[..., -d:] = (grads["lattice"] / n_at)[:, None, :] * mf[..., None]
        g, _ = diffnet.mlp_backward(self.net, cache, gy.reshape(B * N, -1))
        if self.pair_net:
            g = np.concatenate([g, _pair_backward(self.pair_net, pair_cache, gy)])
        return g

    def forward(self, params, t, batch: Batch):
        heads, _ = self.forward_features(params, self.features(t, batch), batch.mask)
        return heads

    def to_dict(self) -> dict:
        return {
            "featurizer": self.featurizer.to_dict(),
            "net": self.net.to_dict(),
            "has_denoiser": self.has_denoiser,
            "pair_net": self.pair_net.to_dict() if self.pair_net else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlowModel":
        pair = diffnet.NetworkSpec.from_dict(d["pair_net"]) if d.get("pair_net") else None
        return cls(FeaturizerConfig.from_dict(d["featurizer"]), diffnet.NetworkSpec.from_dict(d["net"]), d["has_denoiser"], pair)


def _pair_forward(spec: diffnet.NetworkSpec, params, atom, pair, mf):
    """Mean over neighbours of an MLP on ``[f_i, e_ij]``.

    Only real (unpadded, off-diagonal) pairs are evaluated. The first layer is
    split so ``f_i`` is projected once per particle rather than once per pair,
    and a sparse averaging matrix scatters pair outputs back to particles.
    """
    B, N, F = atom.shape
    layers = spec.unpack(params)
    act = diffnet.ACTIVATIONS[spec.activation]
    w0, b0 = layers[0]
    pm = (mf[:, :, None] * mf[:, None, :] * (1.0 - np.eye(N))[None]) > 0
    bb, ii, jj = np.nonzero(pm)
    rows = bb * N + ii
    denom = np.maximum(mf.sum(axis=1) - 1.0, 1.0)
    cols = np.arange(rows.size)
    avg = sparse.csr_matrix((1.0 / denom[bb], (rows, cols)), shape=(B * N, rows.size))
    gather = sparse.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(B * N, rows.size))
    atom_f = _flat(atom)
    pair_p = pair[bb, ii, jj]
    pre = (atom_f @ w0[:F])[rows] + pair_p @ w0[F:] + b0
    h, back = act(pre)
    hs, backs = [h], [back]
    for w, b in layers[1:-1]:
        h, back = act(h @ w + b)
        hs.append(h)
        backs.append(back)
    w_out, b_out = layers[-1]
    out = h @ w_out + b_out
    y = np.asarray(avg @ out).reshape(B, N, -1)
    return y, (atom_f, pair_p, gather, avg, hs, backs, layers, F)


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def _pair_backward(spec: diffnet.NetworkSpec, cache, gy):
    atom_f, pair_p, gather, avg, hs, backs, layers, F = cache
    g_out = np.asarray(avg.T @ _flat(gy))
    grads = []
    w_out, _ = layers[-1]
    grads.append((hs[-1].T @ g_out, g_out.sum(axis=0)))
    g_h = g_out @ w_out.T
    for k in range(len(layers) - 2, 0, -1):
        g_pre = backs[k](g_h)
        w, _ = layers[k]
        grads.append((hs[k - 1].T @ g_pre, g_pre.sum(axis=0)))
        g_h = g_pre @ w.T
    g_pre = backs[0](g_h)
    g_w_atom = atom_f.T @ np.asarray(gather @ g_pre)
    g_w_pair = pair_p.T @ g_pre
    grads.append((np.concatenate([g_w_atom, g_w_pair], axis=0), g_pre.sum(axis=0)))
    grads.reverse()
    flat = np.zeros(spec.n_params)
    for (ws, bs), (gw, gb) in zip(spec.layout(), grads):
        flat[ws] = gw.ravel()
        flat[bs] = gb
    return flat


@dataclass(frozen=True)
class ScheduleNet:
    """Time-only annealing network ``t -> (s_pos(t), s_lat(t))``.

    With ``shared_trunk`` one MLP has two outputs; otherwise two separate
    single-output MLPs are concatenated in one parameter vector.
    """

    hidden: tuple[int, ...] = (64, 64)
    shared_trunk: bool = True
    time_freqs: int = 2
    activation: str = "tanh"

    @property
    def specs(self) -> list[diffnet.NetworkSpec]:
        n_in = 1 + 2 * self.time_freqs
        if self.shared_trunk:
            return [diffnet.NetworkSpec(n_in, self.hidden, 2, self.activation, final_layer_zero_init=True)]
        return [diffnet.NetworkSpec(n_in, self.hidden, 1, self.activation, final_layer_zero_init=True)] * 2

    @property
    def n_params(self) -> int:
        return sum(s.n_params for s in self.specs)

    def init(self, seed: int) -> np.ndarray:
        return np.concatenate([diffnet.net_init(s, seed + k) for k, s in enumerate(self.specs)])

    def _split(self, params):
        out, off = [], 0
        for s in self.specs:
            out.append(params[off : off + s.n_params])
            off += s.n_params
        return out

    def forward(self, params, t):
        """Return (values (T, 2), cache) at the times ``t``."""
        x = time_features(t, self.time_freqs)
        caches, cols = [], []
        for spec, p in zip(self.specs, self._split(params)):
            y, c = diffnet.mlp_forward(spec, p, x)
            cols.append(y)
            caches.append(c)
        return np.concatenate(cols, axis=1), caches

    def backward(self, caches, gy) -> np.ndarray:
        grads, col = [], 0
        for spec, c in zip(self.specs, caches):
            k = spec.output_dim
            g, _ = diffnet.mlp_backward(spec, c, gy[:, col : col + k])
            grads.append(g)
            col += k
        return np.concatenate(grads)

    def __call__(self, params, t):
        return self.forward(params, t)[0]

    def to_dict(self) -> dict:
        return {"hidden": list(self.hidden), "shared_trunk": self.shared_trunk, "time_freqs": self.time_freqs, "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleNet":
        return cls(tuple(d["hidden"]), d["shared_trunk"], d["time_freqs"], d["activation"])
