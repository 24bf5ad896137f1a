import os

import pytest
import torch

from settings import ProfileParams
from pipeline import WPlusPipeline
from constants import RUN_SLOW_ENV


def pytest_collection_modifyitems(config, items):
    if os.environ.get(RUN_SLOW_ENV) == "1":
        return
    skip_slow = pytest.mark.skip(reason="long behavioural run, set {}=1".format(RUN_SLOW_ENV))
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def toy_profile() -> ProfileParams:
    return ProfileParams()


@pytest.fixture
def pipe64(toy_profile) -> WPlusPipeline:
    """Random float64 base model with a freshly initialised adapter attached."""
    pipe = WPlusPipeline.build(toy_profile, seed=3, dtype=torch.float64)
    pipe.attach(pipe.new_adapter(seed=3))
    return pipe


@pytest.fixture
def base64(toy_profile) -> WPlusPipeline:
    return WPlusPipeline.build(toy_profile, seed=3, dtype=torch.float64)
