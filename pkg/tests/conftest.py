import math
import pathlib

import pytest

from walshlab import ModelSpec

PI = math.pi
DATA = pathlib.Path(__file__).parent / "data"


def make_spec(rays):
    """rays: iterable of (theta, weight, ell, b, s)."""
    return ModelSpec.build([{"theta": t, "weight": w, "ell": ell, "b": b, "s": s} for t, w, ell, b, s in rays])


def walsh_bm(weights=(0.5, 0.5), ell=1.0):
    thetas = [0.0, PI, PI / 2, 3 * PI / 2][:len(weights)]
    return make_spec([(t, w, ell, 0.0, 1.0) for t, w in zip(thetas, weights)])


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def unit_two_ray():
    return walsh_bm()


@pytest.fixture
def mixed_spec():
    return make_spec([(0.0, 0.5, 1.0, 0.0, 1.0), (PI, 0.5, math.inf, 1.0, 1.0)])
