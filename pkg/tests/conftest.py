import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import pytest

from oydiff import equilibrium as eq
from oydiff import potential as pot


@pytest.fixture(scope="session")
def exp1():
    return pot.exponential(1.0)


@pytest.fixture(scope="session")
def exp1_measure(exp1):
    return eq.build(exp1, 1.0)


@pytest.fixture(scope="session")
def laplace2():
    return pot.laplace_measure([(1.0, 1.0), (2.0, 0.5)])
