import math

import numpy as np
import pytest

from oydiff import potential as pot


def _fd(spec, x, order, h=1e-5):
    return (pot.eval(spec, x + h, order - 1) - pot.eval(spec, x - h, order - 1)) / (2 * h)


def test_exponential_closed_form():
    s = pot.exponential(2.0)
    x = 0.3
    e = math.exp(-0.6)
    got = [pot.eval(s, x, k) for k in range(4)]
    assert got == pytest.approx([e, -2 * e, 4 * e, -8 * e], rel=1e-14)


def test_laplace_measure_closed_form(laplace2):
    x = 0.3
    v = math.exp(-x) + 0.5 * math.exp(-2 * x)
    assert pot.eval(laplace2, x, 0) == pytest.approx(v, rel=1e-14)


@pytest.mark.parametrize("spec", [pot.exponential(1.3),
                                  pot.laplace_measure([(0.5, 2.0), (3.0, 0.1)]),
                                  pot.perturbed(pot.exponential(1.0), 0.002, 1.0, 0.8)])
@pytest.mark.parametrize("order", [1, 2, 3])
def test_derivatives_match_finite_differences(spec, order):
    for x in (-0.7, 0.2, 0.9, 1.5):
        assert pot.eval(spec, x, order) == pytest.approx(_fd(spec, x, order), rel=1e-7, abs=1e-8)


def test_audit_exponential_and_laplace(laplace2):
    a = pot.audit_oy_type(pot.exponential(1.0))
    assert a.passed and a.c0 == pytest.approx(1.0)
    b = pot.audit_oy_type(laplace2)
    assert b.passed and b.c0 == pytest.approx(1.0, rel=1e-9)


def test_audit_rejects_quadratic_and_large_bump():
    assert not pot.audit_oy_type(pot.quadratic()).passed
    assert not pot.audit_oy_type(pot.perturbed(pot.exponential(1.0), 0.01, 2.0)).passed


def test_invalid_inputs():
    with pytest.raises(pot.PotentialError):
        pot.exponential(-1.0)
    with pytest.raises(pot.PotentialError):
        pot.laplace_measure([(0.0, 1.0)])
    with pytest.raises(pot.PotentialError):
        pot.from_dict({"variant": "cubic"})
    with pytest.raises(pot.PotentialError):
        pot.eval(pot.exponential(1.0), math.nan, 1)


def test_from_dict_round_trip():
    s = pot.from_dict({"variant": "laplace_measure", "atoms": [[1, 1], [2, 0.5]]})
    assert pot.eval(s, 0.1, 2) == pytest.approx(math.exp(-0.1) + 2 * math.exp(-0.2))


def test_exponential_overflow_is_infinite():
    v = pot.eval(pot.exponential(1.0), -1000.0, 1)
    assert np.isinf(v) and v < 0
