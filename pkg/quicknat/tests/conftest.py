import numpy as np
import pytest

from quicknat.models.network import NetworkPreset
from quicknat.models.volumes import LabelSpace, PhantomSpec, View
from quicknat.services.network_service import ViewNetwork, init_params


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training studies")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def phantom_space():
    return LabelSpace.phantom(6)


@pytest.fixture
def small_spec():
    return PhantomSpec(grid_size=32, num_classes=6, seed=3)


@pytest.fixture
def mini_net():
    return ViewNetwork(init_params(0, NetworkPreset.miniature(num_classes=3, num_channels=4)), View.CORONAL)
