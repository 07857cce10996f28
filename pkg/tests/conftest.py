import os
from pathlib import Path

import hypothesis
import numpy as np
import pytest

from spikinghan.data_io import SyntheticSpec, generate_synthetic, load_dataset

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=200, deadline=None)
hypothesis.settings.register_profile("dev", max_examples=50, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "dev"))

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def acm_toy_dir() -> Path:
    return FIXTURES / "acm_toy"


@pytest.fixture
def acm_toy(acm_toy_dir):
    return load_dataset(acm_toy_dir)


@pytest.fixture(scope="session")
def synthetic_bundle():
    """The default synthetic dataset: 120 targets, 3 classes, meta-paths PAP and PSP."""
    return generate_synthetic(SyntheticSpec())


@pytest.fixture
def small_bundle():
    return generate_synthetic(SyntheticSpec(num_target=12, num_classes=2, d_in=4, seed=3))
