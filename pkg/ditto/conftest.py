"""Shared pytest fixtures for the ditto test modules."""

import os

import numpy as np
import pytest
import torch
from torch import nn

from ditto.schema import DatasetBundle, EmbeddingSpec, ModelConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale end-to-end run (set DITTO_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.getenv("DITTO_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="desk-scale run; set DITTO_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


def small_config(**overrides) -> ModelConfig:
    props = dict(variant="ditto", dimension=1, grid_shape=(16,), base_channels=8, channel_mults=(1, 2),
                 embedding=EmbeddingSpec(d_emb=16, mlp_hidden=16), time_scale=10.0)
    props.update(overrides)
    return ModelConfig(**props)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return small_config()


def make_toy_bundle(M: int = 6, T: int = 8, n: int = 16, splits=None) -> DatasetBundle:
    """Travelling sine waves with per-trajectory amplitude and phase."""
    x = np.arange(n) / n
    times = np.linspace(0.0, 1.0, T + 1)
    rng = np.random.default_rng(3)
    fields = np.empty((M, T + 1, n))
    for m in range(M):
        amplitude, phase = 1.0 + rng.random(), 2 * np.pi * rng.random()
        for i, t in enumerate(times):
            fields[m, i] = amplitude * np.sin(2 * np.pi * (x - 0.25 * t) + phase) * np.exp(-0.5 * t)
    tags = splits or (["train"] * (M - 2) + ["val", "test"])
    return DatasetBundle(kind="burgers", grid=[x], times=times, fields=fields, splits=list(tags),
                         seeds=list(range(M)))


@pytest.fixture
def toy_bundle() -> DatasetBundle:
    return make_toy_bundle()


class PersistenceModel(nn.Module):
    """Predicts u(t) = x0 for every t; a fixed reference operator for evaluation tests."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.anchor = nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, x0, t=None, coords=None):
        return x0 + 0.0 * self.anchor


@pytest.fixture
def persistence_model():
    return PersistenceModel(small_config())
