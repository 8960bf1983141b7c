import numpy as np
import pytest

from caver.tensor import make_rng
from caver.tipp import TippConfig, pyramid


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def small_config():
    """Four levels 8/4/2/1 with narrow channels; runs in milliseconds."""
    return TippConfig(dim=8, heads=2, levels=pyramid(32, channels=(6, 8, 10, 12)), patch=(2, 2, 2, 1))


def max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
