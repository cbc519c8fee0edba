import numpy as np
import pytest

from ebt.datapipe import SynthSpec, synth_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def center_edge():
    gt = np.zeros((3, 3), dtype=np.uint8)
    gt[1, 1] = 1
    return gt


@pytest.fixture
def small_synth():
    """Eight 32x32 scenes, enough for quick training and evaluation runs."""
    return synth_dataset(SynthSpec(seed=7, height=32, width=32, min_shapes=1, max_shapes=3), count=8)
