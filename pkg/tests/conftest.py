import numpy as np
import pytest

from spikefed.lif import LifConfig, NetworkArch
from spikefed.params import ModelParams


@pytest.fixture
def tiny_arch():
    return NetworkArch((6, 8, 4), LifConfig(beta_init=0.85, surrogate_slope=25.0))


@pytest.fixture
def tiny_params(tiny_arch):
    rng = np.random.default_rng(7)
    return ModelParams.init(tiny_arch, rng, w_scale=0.8)


@pytest.fixture
def tiny_batch(tiny_arch):
    rng = np.random.default_rng(11)
    spikes = (rng.random((5, 12, tiny_arch.n_inputs)) < 0.3).astype(np.float64)
    labels = rng.integers(0, tiny_arch.n_outputs, size=5)
    return spikes, labels
