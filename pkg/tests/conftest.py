import os
import sys

import numpy as np
import pytest

# Add project root to path (same as the entry script does)
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from tool_morph.diffsim import WorldConfig  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale end-to-end checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale end-to-end check, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def square_cage():
    return np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


@pytest.fixture
def short_world():
    return WorldConfig(gravity=(0.0, 0.0), dt=1e-3, horizon=20)
