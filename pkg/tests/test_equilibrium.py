import math

import numpy as np
import pytest
from scipy import special

from oydiff import equilibrium as eq
from oydiff import potential as pot


@pytest.mark.parametrize("beta,theta", [(1.0, 1.0), (2.0, 0.7), (2.0, 3.0), (0.5, 1.5)])
def test_exponential_cumulants_are_polygammas(beta, theta):
    m = eq.build(pot.exponential(beta), theta)
    x = theta / beta
    assert m.log_Z == pytest.approx(math.lgamma(x) - math.log(beta), abs=1e-10)
    for k in range(3):
        ref = special.polygamma(k, x) / beta ** (k + 1)
        assert m.psi[k] == pytest.approx(ref, rel=1e-9, abs=1e-10)
    assert m.mean == pytest.approx(-m.psi[0], rel=1e-12)
    assert m.variance == pytest.approx(m.psi[1], rel=1e-12)


def test_zeta_values_at_unit_parameters(exp1_measure):
    assert exp1_measure.psi[1] == pytest.approx(math.pi ** 2 / 6, rel=1e-12)
    assert exp1_measure.psi[2] == pytest.approx(-2 * special.zeta(3), rel=1e-10)


def test_quadratic_is_gaussian():
    m = eq.build(pot.quadratic(), 2.0)
    assert m.psi[1] == pytest.approx(1.0, rel=1e-10)
    assert abs(m.psi[2]) < 1e-9
    assert float(eq.inverse_cdf(m, 0.5)) == pytest.approx(-2.0, abs=1e-9)
    q = np.array([0.01, 0.3, 0.9])
    assert eq.inverse_cdf(m, q) == pytest.approx(special.ndtri(q) - 2.0, abs=1e-9)
    assert eq.inverse_cdf_eta_derivative(m, q, 1) == pytest.approx(-np.ones(3), abs=1e-8)


def test_inverse_cdf_round_trip(exp1_measure):
    q = np.linspace(1e-6, 1 - 1e-6, 2001)
    x = eq.inverse_cdf(exp1_measure, q)
    assert np.all(np.diff(x) > 0)
    assert np.max(np.abs(exp1_measure.cdf_at(x) - q)) < 1e-10


def test_eta_derivatives_by_finite_difference(exp1):
    q = np.array([0.05, 0.4, 0.8, 0.99])
    h = 1e-4
    m0, mp, mm = (eq.build(exp1, 1.0 + d) for d in (0.0, h, -h))
    fd1 = (eq.inverse_cdf(mp, q) - eq.inverse_cdf(mm, q)) / (2 * h)
    fd2 = (eq.inverse_cdf(mp, q) - 2 * eq.inverse_cdf(m0, q) + eq.inverse_cdf(mm, q)) / h ** 2
    d1 = eq.inverse_cdf_eta_derivative(m0, q, 1)
    d2 = eq.inverse_cdf_eta_derivative(m0, q, 2)
    assert np.all(d1 <= 0)
    assert d1 == pytest.approx(fd1, rel=1e-6, abs=1e-7)
    assert d2 == pytest.approx(fd2, rel=1e-4, abs=1e-4)


def test_laplace_measure_by_direct_quadrature(laplace2):
    from scipy import integrate
    th = 1.2
    m = eq.build(laplace2, th)
    f = lambda x: math.exp(-th * x - pot.eval(laplace2, x, 0))
    Z = integrate.quad(f, -np.inf, np.inf, epsabs=0, epsrel=1e-12, limit=200)[0]
    assert m.log_Z == pytest.approx(math.log(Z), abs=1e-9)


def test_log_partition_difference_closed_forms(exp1):
    q = pot.quadratic()
    assert eq.log_partition_difference(q, 1.05, 1.0) == 0.5 * (1.05 ** 2 - 1.0)
    d = eq.log_partition_difference(exp1, 1.05, 1.0)
    assert d == pytest.approx(math.lgamma(1.05) - math.lgamma(1.0), abs=1e-15)


def test_psi2_nonpositive_on_small_grid(laplace2):
    vals = eq.psi2_grid_check(laplace2, np.linspace(0.25, 4.0, 6), 1e-8)
    assert max(v for _, v in vals) <= 1e-8


def test_characteristic_time(exp1_measure):
    assert eq.characteristic_time(exp1_measure, 10) == pytest.approx(10 * math.pi ** 2 / 6)
