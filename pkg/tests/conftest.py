import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def pytest_addoption(parser):
    parser.addoption("--nightly", action="store_true", default=False,
                     help="run the long training checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--nightly") or os.environ.get("COOPSAC_NIGHTLY") == "1":
        return
    skip = pytest.mark.skip(reason="long training run; use --nightly or COOPSAC_NIGHTLY=1")
    for item in items:
        if "nightly" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
