import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from giftlab.core import make_rng  # noqa: E402


@pytest.fixture
def rng():
    return make_rng(1234)


def uniform(rng, shape, low=-1.0, high=1.0):
    return rng.uniform(low, high, size=shape)


@pytest.fixture
def unif():
    return uniform


@pytest.fixture
def tiny_arch():
    from giftlab.models import ModelArch
    return ModelArch(d_f=3, h_f=4, L_f=2, d_e=4, adapter="glu", h_a=3, d_a=4, n_speakers=3)
