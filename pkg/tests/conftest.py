import numpy as np
import pytest

from gmetafl import nn
from gmetafl.data import make_client


def random_client(client_id=0, n=40, n_features=4, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (n, n_features))
    y = rng.integers(0, classes, n)
    y[:classes] = np.arange(classes)
    return make_client(client_id, x, y, classes=classes)


@pytest.fixture
def small_mlp():
    spec = nn.MLPSpec(4, (5,), 3)
    client = random_client()
    w = nn.init_params(spec, 1).values
    return spec, client, w


def random_symmetric(d, rng, scale=1.0):
    M = rng.standard_normal((d, d))
    return scale * (M + M.T) / (2 * np.sqrt(d))
