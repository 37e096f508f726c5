import numpy as np
import pytest
import torch

from modules.domains import BenchmarkConfig, build_benchmark
from modules.mpm_model import ModelConfig, build_model
from modules.trainer import train

TINY_MODEL = ModelConfig(
    feature_dim=16,
    patch_count=8,
    patch_size=8,
    n_blocks=2,
    n_heads=2,
    batch_size=8,
    epochs=2,
)

TINY_BENCH = BenchmarkConfig(
    n_train=3,
    n_test=2,
    n_points=128,
    sparse_count=32,
    kinds=("sphere", "box", "cylinder"),
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_benchmark():
    return build_benchmark(TINY_BENCH)


@pytest.fixture
def tiny_model():
    return build_model(TINY_MODEL)


@pytest.fixture
def tiny_model_f64():
    return build_model(TINY_MODEL, dtype=torch.float64)


@pytest.fixture(scope="session")
def trained_model(tiny_benchmark):
    model, _ = train(build_model(TINY_MODEL), tiny_benchmark.source, TINY_MODEL)
    return model
