import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import rrrkit as rk


@pytest.fixture(scope="session")
def small_spec():
    """Minimal net on a 32px input: cheap enough for oracle comparisons."""
    return rk.make_arch(1, 1, 1, 1, 4, input_side=32)


@pytest.fixture(scope="session")
def small_store(small_spec):
    return rk.init_store(small_spec, seed=42)


@pytest.fixture(scope="session")
def template_store_64():
    """Full 51-block template store for a 64px, 4-class setup."""
    return rk.init_store(rk.template_spec(4, 64), seed=1)


@pytest.fixture(scope="session")
def synth_task():
    train = rk.synth_dataset(4, 20, 64, seed=5, split="train")
    test = rk.synth_dataset(4, 20, 64, seed=5, split="test")
    return train, test


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
