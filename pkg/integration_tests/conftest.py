"""Fixtures and markers for the end-to-end tests."""

import os
import shutil
import sys
import tempfile

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from diffcore import set_default_dtype


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs, enabled with MADI_RUN_SLOW=1")


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    monkeypatch.delenv("MADI_OUTPUT_DIR", raising=False)
    yield
    set_default_dtype(np.float64)


@pytest.fixture
def temp_directory():
    """Create a temporary directory for testing."""
    temp_dir = tempfile.mkdtemp()
    yield temp_dir
    shutil.rmtree(temp_dir)
