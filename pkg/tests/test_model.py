import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowrl.model import FeaturizerConfig, FlowModel, ScheduleNet, featurize, pair_features, stack, time_features
from flowrl.toyworld import ToyStructure
from oracles import central_diff, rel_err


def _batch(rng, sizes=(3, 5, 2)):
    structs = [ToyStructure(np.sort(rng.integers(0, 3, n)), rng.random((n, 2)), 2 + rng.random(2)) for n in sizes]
    return stack(structs, max(sizes) + 1)  # one extra padded slot


@pytest.mark.parametrize("pair", [None, (6,)])
def test_heads_gradient_matches_differences(pair, rng):
    m = FlowModel.build(FeaturizerConfig(), hidden=(6,), has_denoiser=True, pair_hidden=pair)
    p = m.init(0) + 0.1 * rng.normal(size=m.n_params)
    b = _batch(rng)
    t = rng.random(3)
    feats = m.features(t, b)
    cot = {k: rng.normal(size=v.shape) for k, v in m.forward_features(p, feats, b.mask)[0].items()}

    def f(q):
        heads, _ = m.forward_features(q, feats, b.mask)
        return sum(float(np.sum(heads[k] * cot[k])) for k in heads)

    heads, aux = m.forward_features(p, feats, b.mask)
    assert rel_err(m.backward(aux, cot), central_diff(f, p)) < 1e-6


@pytest.mark.parametrize("pair", [None, (6,)])
@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=10, deadline=None)
def test_permutation_equivariance_and_translation_invariance(pair, seed):
    rng = np.random.default_rng(seed)
    m = FlowModel.build(FeaturizerConfig(), hidden=(6,), has_denoiser=True, pair_hidden=pair)
    p = m.init(1)
    s = ToyStructure(np.array([0, 0, 1, 2]), rng.random((4, 2)), 2 + rng.random(2))
    perm = rng.permutation(4)
    h0 = m.forward(p, 0.3, stack([s]))
    h1 = m.forward(p, 0.3, stack([s.permuted(perm)]))
    h2 = m.forward(p, 0.3, stack([s.translated(rng.random(2))]))
    for k in h0:
        if k == "lattice":
            assert np.allclose(h0[k], h1[k], atol=1e-12)
        else:
            assert np.allclose(h0[k][0, perm], h1[k][0], atol=1e-12)
        assert np.allclose(h0[k], h2[k], atol=1e-10)


def test_padding_does_not_change_outputs(rng):
    m = FlowModel.build(FeaturizerConfig(), hidden=(6,), pair_hidden=(4,))
    p = m.init(2)
    s = ToyStructure(np.array([0, 1, 2]), rng.random((3, 2)), 2 + rng.random(2))
    a, b = m.forward(p, 0.5, stack([s], 3)), m.forward(p, 0.5, stack([s], 7))
    assert np.allclose(a["velocity"], b["velocity"][:, :3], atol=1e-12)
    assert np.all(b["velocity"][:, 3:] == 0)
    assert np.allclose(a["lattice"], b["lattice"], atol=1e-12)


def test_feature_sizes(rng):
    cfg = FeaturizerConfig()
    b = _batch(rng)
    assert featurize(cfg, 0.1, b).shape == (3, 6, cfg.n_features)
    assert pair_features(cfg, b).shape == (3, 6, 6, cfg.n_pair_features)
    assert time_features(np.array([0.0, 1.0]), 2).shape == (2, 5)


def test_parameter_count_check(rng):
    m = FlowModel.build(FeaturizerConfig(), hidden=(6,))
    with pytest.raises(ValueError):
        m.forward(np.zeros(m.n_params + 1), 0.1, _batch(rng))


def test_model_dict_roundtrip():
    m = FlowModel.build(FeaturizerConfig(harmonics=1), hidden=(5, 4), has_denoiser=True, pair_hidden=(3,))
    assert FlowModel.from_dict(m.to_dict()) == m


@pytest.mark.parametrize("shared", [True, False])
def test_schedule_net_zero_init_and_gradient(shared, rng):
    net = ScheduleNet(hidden=(5,), shared_trunk=shared)
    p = net.init(0)
    t = np.linspace(0, 1, 11)
    assert np.all(net(p, t) == 0.0)
    q = p + 0.2 * rng.normal(size=p.size)
    gy = rng.normal(size=(11, 2))
    y, caches = net.forward(q, t)
    g = net.backward(caches, gy)
    fd = central_diff(lambda v: float(np.sum(net(v, t) * gy)), q)
    assert rel_err(g, fd) < 1e-7
    assert ScheduleNet.from_dict(net.to_dict()) == net
