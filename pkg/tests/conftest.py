import os
from pathlib import Path

import pytest


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help="run desk-scale reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def mnist_dir():
    directory = os.environ.get('STRUCTLEARN_MNIST_DIR')
    if not directory:
        pytest.skip("STRUCTLEARN_MNIST_DIR is not set")
    return Path(directory)
