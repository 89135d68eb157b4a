"""Shared fixtures and the --runslow switch for long acceptance runs."""

import numpy as np
import pytest

from utils.geometry_utils.cloud import PointCloud, sample_shape
from utils.network_utils.model import ModelConfig, init_model


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow acceptance tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config():
    return ModelConfig(feature_dim=8, encoder_widths=(6, 7), decoder_widths=(9, 5, 4), output_points=5)


@pytest.fixture
def toy_model(toy_config):
    return init_model(toy_config, seed=3)


@pytest.fixture
def small_model():
    return init_model(ModelConfig(feature_dim=32, encoder_widths=(16, 24), decoder_widths=(32, 24, 16),
                                  output_points=16), seed=5)


@pytest.fixture
def box_cloud():
    return sample_shape('composite', 128, 11, np.random.default_rng(11))


@pytest.fixture
def random_cloud(rng):
    return PointCloud(rng.uniform(0.0, 1.0, size=(64, 3)))
