import os

import hypothesis
import numpy as np
import pytest

from app.core.data import toy_dataset
from app.core.models import TrainConfig


np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


def tiny_config(**overrides) -> TrainConfig:
    """A model small enough to train in well under a second per iteration"""
    values = dict(
        size=32,
        depth=2,
        base_channels=4,
        feature_channels=8,
        attention_reduction=4,
        disc_base_channels=4,
        disc_layers=2,
        batch_size=2,
        epochs=1,
        max_iterations=2,
        probe_iterations=2,
        toy_samples=4,
        log_every=1,
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def config(tmp_path) -> TrainConfig:
    return tiny_config(output_dir=str(tmp_path / "run"))


@pytest.fixture(scope="session")
def toy_samples():
    return toy_dataset(4, 32, seed=0)


