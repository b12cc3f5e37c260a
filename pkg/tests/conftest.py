import numpy as np
import pytest

from glgait.data import synth_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    """4 subjects x 4 sequences x 2 views, 12 frames each; cheap enough for unit tests."""
    return synth_dataset(4, 4, (0, 90), seed=7, n_frames=12)
