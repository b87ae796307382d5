import numpy as np
import pytest

from tyrt.netzoo import build_graph
from tyrt.netzoo.weights import init_weights
from tyrt.quantizer import ptq


def _quantized(version, size, resolution=128, seed=1):
    g = build_graph(version, size, input_resolution=resolution)
    ws = init_weights(g, seed)
    rng = np.random.default_rng(seed)
    images = [rng.random((1, 3, resolution, resolution)) for _ in range(2)]
    return g, ptq(g, ws, images), images


@pytest.fixture(scope="session")
def v13_small():
    return _quantized("v1_3", "small")


@pytest.fixture(scope="session")
def v8_small():
    return _quantized("v8", "small")


@pytest.fixture(scope="session")
def v10_big():
    return _quantized("v10", "big")


@pytest.fixture(scope="session")
def quantized_nets(v13_small, v8_small, v10_big):
    return {"v1_3": v13_small, "v8": v8_small, "v10": v10_big}
