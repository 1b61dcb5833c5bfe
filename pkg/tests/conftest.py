from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from utils.agop_utils import AgopConfig
from utils.engine_utils import EngineConfig, PreparedModel, StreamConfig, prepare_model
from utils.stream_utils import SourceConfig


def desk_config(**overrides) -> EngineConfig:
    """A model small enough to pretrain in well under a second."""
    config = EngineConfig(
        source=SourceConfig(n_classes=4, input_dim=8, samples_per_class=50, mu_sep=1.5),
        feature_dim=16,
        pretrain_epochs=300,
        agop=AgopConfig(t_eig=2),
        stream=StreamConfig(batches_per_domain=3, batch_size=16),
    )
    return replace(config, **overrides)


@pytest.fixture
def small_config() -> EngineConfig:
    return desk_config()


@pytest.fixture(scope="module")
def prepared() -> PreparedModel:
    return prepare_model(desk_config())


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def make_config():
    return desk_config
