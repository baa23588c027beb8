"""Shared fixtures for the vifo test suite.

Everything is seeded; tests that need fresh noise build their own
generator from a fixed seed rather than sharing one across tests.
"""

import logging

import numpy as np
import pytest

from vifo.config import DatasetConfig, NetworkConfig, TrainConfig
from vifo.core import VariationalOutput
from vifo.data import gen_blobs
from vifo.networks import Link, MlpSpec, init_network


@pytest.fixture(autouse=True)
def restore_logging():
    """The CLI reconfigures the root logger; put it back after each test."""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


# ── generators and outputs ──────────────────────────────────────────


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_output(rng, shape, low=0.05, high=2.0):
    """A VariationalOutput with standard-normal means and uniform variances."""
    return VariationalOutput.of(rng.normal(size=shape), rng.uniform(low, high, size=shape))


@pytest.fixture
def output(rng):
    return random_output(rng, (6, 3))


# ── networks ────────────────────────────────────────────────────────


@pytest.fixture
def small_spec():
    return MlpSpec(input_dim=2, hidden=(5, 4), output_dim=3)


@pytest.fixture
def small_net(small_spec):
    return init_network(small_spec, 7)


@pytest.fixture
def regression_spec():
    return MlpSpec(input_dim=1, hidden=(6,), output_dim=2, link=Link(kind="exp"))


# ── data and configs ────────────────────────────────────────────────


@pytest.fixture
def blobs():
    return gen_blobs(90, 3, seed=3)


@pytest.fixture
def tiny_config():
    """A run small enough to train inside a unit test."""
    return TrainConfig(
        method="vifo",
        epochs=3,
        batch_size=16,
        ensemble_size=2,
        m_train=3,
        m_eval=8,
        network=NetworkConfig(hidden=(8,)),
        dataset=DatasetConfig(kind="blobs", n=60, n_classes=3, seed=1),
    )
