import numpy as np
import pytest

from ttalab import desk
from ttalab.io import checkpoint_hash


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_cfg():
    return desk.DeskConfig()


@pytest.fixture(scope="session")
def desk_source(desk_cfg):
    return desk.source_dataset(desk_cfg)


@pytest.fixture(scope="session")
def desk_model(desk_cfg, desk_source):
    """The pretrained source model of the standard desk experiment (read-only for tests)."""
    return desk.pretrained_model(desk_cfg, desk_source)


@pytest.fixture(scope="session")
def desk_artifacts(desk_cfg, desk_model, desk_source):
    return desk.prepare_artifacts(desk_cfg, desk_model, desk_source, checkpoint_hash(desk_model))
