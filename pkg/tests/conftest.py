import numpy as np
import pytest
import torch

from duet.adapter import EncoderAdapter
from duet.composer import QueryComposer
from duet.fixtures import make_fixture_dataset


@pytest.fixture(scope="session")
def tiny_adapter():
    return EncoderAdapter.from_id("tiny")


@pytest.fixture(scope="session")
def tiny_composer(tiny_adapter):
    return QueryComposer(tiny_adapter, init_seed=0)


@pytest.fixture(scope="session")
def fixture_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("fixdata")
    return make_fixture_dataset(root, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def rand_image(adapter, seed=0):
    g = torch.Generator().manual_seed(seed)
    res = adapter.config.image_resolution
    return torch.rand(3, res, res, generator=g)
