import numpy as np
import pytest

from fbquant.fbcore import LayerRecord
from fbquant.runtime import available_backends


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# The seven projections of one transformer block, at toy sizes. Calibration
# is intentionally rank-deficient (fewer samples than features) for the
# layers the ill-posedness demo needs.
BLOCK_NAMES = ("q_proj", "k_proj", "v_proj", "o_proj", "down_proj", "gate_proj", "up_proj")


def make_block_layers(seed=7, in_dim=32, out_dim=24, n_samples=8):
    gen = np.random.default_rng(seed)
    layers = []
    for name in BLOCK_NAMES:
        w = gen.standard_normal((out_dim, in_dim))
        x = gen.standard_normal((n_samples, in_dim))
        layers.append(LayerRecord(name, w, x))
    return layers


@pytest.fixture
def block_layers():
    return make_block_layers()


def backend_params():
    return [pytest.param(b, id=b) for b in available_backends()]
