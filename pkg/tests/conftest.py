import os
import sys

import numpy as np
import pytest

# Add parent directory to path so we can import the app package
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from tests.oracles import tiny_model as build_tiny_model


def pytest_collection_modifyitems(config, items):
    if os.getenv("YTT_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="slow run; set YTT_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_model():
    return build_tiny_model()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    """Run inside a temporary directory so logs and checkpoints stay out of the repo."""
    monkeypatch.chdir(tmp_path)
    return tmp_path
