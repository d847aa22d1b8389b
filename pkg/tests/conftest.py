"""Test configuration and fixtures for the test suite."""

import os
import shutil
import sys
import tempfile

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from assembly import build_model
from config import RunConfig
from datagen import generate_samples
from diffcore import set_default_dtype

# Small enough for gradient checks and a few training steps on a laptop
TINY_CONFIG = {
    "embed_dim": 16,
    "latent_dim": 8,
    "codebook_size": 4,
    "levels": 2,
    "patch_size": 8,
    "pixel_patch": 8,
    "highlight_queries": 2,
    "heads": 2,
    "blocks": 1,
    "decoder_blocks": 1,
    "max_patches": 8,
    "max_positions": 256,
    "dtype": "float64",
    "steps": 4,
    "batch_size": 2,
    "eval_interval": 0,
    "eval_samples": 4,
    "max_answer_tokens": 3,
    "workers": 1,
    "train_samples": 6,
    "eval_split_samples": 4,
    "generation": {
        "length": [32, 48],
        "period": [6, 10],
        "event_count": [0, 1],
    },
}


@pytest.fixture(autouse=True)
def double_precision():
    """Every test runs in float64 unless it builds a float32 model itself."""
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    """Keep a developer's MADI_* settings out of the tests."""
    monkeypatch.delenv("MADI_OUTPUT_DIR", raising=False)
    yield


@pytest.fixture
def rng():
    """Seeded generator for random test inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def temp_directory():
    """Create a temporary directory for testing."""
    temp_dir = tempfile.mkdtemp()
    yield temp_dir
    shutil.rmtree(temp_dir)


@pytest.fixture
def tiny_config(temp_directory):
    """RunConfig for a model with D=16, d=8, K=4, M=2 writing under a temporary directory."""
    return RunConfig.model_validate({**TINY_CONFIG, "output_dir": os.path.join(temp_directory, "run")})


@pytest.fixture
def tiny_samples(tiny_config):
    """Six generated samples alternating trend and period questions."""
    return generate_samples(
        6,
        0,
        tiny_config.generation,
        tiny_config.templates,
        tiny_config.trend_threshold,
        tiny_config.noise_threshold,
    )


@pytest.fixture
def tiny_model(tiny_config):
    """Freshly built model for the tiny config."""
    return build_model(tiny_config)
