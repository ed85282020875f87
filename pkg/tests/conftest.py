import numpy as np
import pytest

from risloc.codebook import build_codebook
from risloc.scenario import table1


@pytest.fixture(scope="session")
def sc():
    return table1()


@pytest.fixture(scope="session")
def random_cb(sc):
    return build_codebook("random", sc)


@pytest.fixture(scope="session")
def unit_delta(sc):
    return np.ones(sc.radio.n_transmissions)
