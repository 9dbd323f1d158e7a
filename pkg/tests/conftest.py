import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from flowrl.model import FeaturizerConfig, FlowModel
from flowrl.toyworld import Composition, generate_dataset, DatasetConfig


@pytest.fixture(scope="session")
def tiny_refs():
    """A small relaxed reference set (two-to-three atom compositions)."""
    comps = [Composition.parse(s) for s in ("0-0", "0-1", "1-2", "0-0-1", "0-1-2", "1-1-2")]
    cfg = DatasetConfig(n_inits=4, relax_steps=200, split_fractions=(0.5, 0.25, 0.25))
    return generate_dataset(comps, 3, cfg=cfg)


@pytest.fixture
def small_model():
    return FlowModel.build(FeaturizerConfig(), hidden=(8,), has_denoiser=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
