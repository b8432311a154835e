import math

import numpy as np
import pytest

from oydiff import _kernels as K
from oydiff import dynamics as dyn
from oydiff import equilibrium as eq
from oydiff import potential as pot
from oydiff import sensitivity as sens


def _path(spec, theta, N, t, dt, seed=3, replica=0, scheme="tamed_euler", eta=None):
    m = eq.build(spec, theta if eta is None else eta)
    nb = dyn.NoiseBlock.for_horizon(seed, dt, t, replica=replica)
    return dyn.simulate(spec, m, theta, N, nb.n_steps * nb.dt, nb, scheme), m


def test_constant_coefficient_tangent_is_exact():
    # V'' = 1: dW/dtheta for one site is t - 1 + e^{-t}, whatever the path
    traj, m = _path(pot.quadratic(), 1.0, 1, 2.0, 0.05)
    b = sens.integrate_first_order(traj, measure_eta=m)
    t = traj.grid
    assert b.partial_W_theta == pytest.approx(t - 1 + np.exp(-t), abs=1e-13)
    assert b.partial_W_eta == pytest.approx(-np.exp(-t), abs=1e-8)


def test_cumulative_and_site_sum_forms_agree(exp1):
    traj, m = _path(exp1, 1.0, 5, 3.0, 0.01)
    b = sens.integrate_first_order(traj, measure_eta=m)
    assert b.partial_W_theta == pytest.approx(b.partial_W_theta_hsum, abs=1e-10)


@pytest.mark.parametrize("spec_name", ["exp", "laplace"])
def test_signs_hold_exactly(spec_name, exp1, laplace2):
    spec = exp1 if spec_name == "exp" else laplace2
    for r in range(5):
        traj, m = _path(spec, 1.0, 6, 4.0, 0.02, replica=r)
        b = sens.integrate_first_order(traj, measure_eta=m)
        sens.integrate_second_order(traj, b, c0=1.0, measure_eta=m)
        assert all(v == 0 for v in b.sign_report().values()), b.sign_report()


def test_first_order_against_finite_differences(exp1):
    N, t, dt, h = 3, 1.0, 1e-3, 1e-5
    traj, m = _path(exp1, 1.0, N, t, dt, scheme="semi_implicit")
    b = sens.integrate_first_order(traj, measure_eta=m)
    fam = dyn.coupled_family(exp1, traj.q, traj.noise,
                             [(1.0, 1.0 + h), (1.0, 1.0 - h), (1.0 + h, 1.0), (1.0 - h, 1.0)],
                             N, traj.t_end, "semi_implicit")
    W = [dyn.height(x, x.t_end).W for x in fam]
    assert (W[0] - W[1]) / (2 * h) == pytest.approx(b.partial_W_theta[-1], abs=5e-4)
    assert (W[2] - W[3]) / (2 * h) == pytest.approx(b.partial_W_eta[-1], rel=1e-3, abs=5e-4)


def test_second_order_against_tangent_differences(exp1):
    N, t, dt, h = 3, 1.0, 1e-3, 1e-4
    traj, m = _path(exp1, 1.0, N, t, dt, scheme="semi_implicit")
    b = sens.integrate_second_order(traj, sens.integrate_first_order(traj, measure_eta=m),
                                    c0=1.0, measure_eta=m)
    fam = dyn.coupled_family(exp1, traj.q, traj.noise, [(1.0, 1.0 + h), (1.0, 1.0 - h)],
                             N, traj.t_end, "semi_implicit")
    g = [sens.integrate_first_order(x, measure_eta=m).partial_W_theta[-1] for x in fam]
    assert (g[0] - g[1]) / (2 * h) == pytest.approx(b.d2W_theta[-1], rel=2e-2)
    mp, mm = eq.build(exp1, 1.0 + h), eq.build(exp1, 1.0 - h)
    fam = dyn.coupled_family(exp1, traj.q, traj.noise, [(1.0 + h, 1.0), (1.0 - h, 1.0)],
                             N, traj.t_end, "semi_implicit")
    g = [sens.integrate_first_order(x, measure_eta=mm_).partial_W_theta[-1]
         for x, mm_ in zip(fam, (mp, mm))]
    assert (g[0] - g[1]) / (2 * h) == pytest.approx(b.d2W_theta_eta[-1], rel=2e-2)


def test_ensemble_sensitivities_match_path(exp1, exp1_measure):
    N, t, dt, seed = 4, 1.5, 0.01, 21
    res = dyn.run_ensemble(exp1, 1.0, N, t, dt, seed, 2, tangents=True, second=True, c0=1.0,
                           measure_eta=exp1_measure)
    for r in range(2):
        traj, m = _path(exp1, 1.0, N, t, dt, seed=seed, replica=r)
        b = sens.integrate_second_order(traj, sens.integrate_first_order(traj, measure_eta=m),
                                        c0=1.0, measure_eta=m)
        row = res.sens[r]
        assert row[K.S_DTHETA] == pytest.approx(b.partial_W_theta[-1], abs=1e-10)
        assert row[K.S_DETA] == pytest.approx(b.partial_W_eta[-1], abs=1e-10)
        assert row[K.S_THTH] == pytest.approx(b.d2W_theta[-1], abs=1e-10)
        assert row[K.S_THETA_ETA] == pytest.approx(b.d2W_theta_eta[-1], abs=1e-10)
        assert row[K.S_MIXED] == pytest.approx(b.mixed_monitor[-1], abs=1e-10)


def test_forced_tangent_signs_and_total(exp1):
    traj, m = _path(exp1, 1.0, 4, 2.0, 0.01)
    f = sens.constant_forcing(traj.n_steps)
    ft = sens.integrate_forced(traj, f)
    assert np.all(ft.h_f <= 0)
    assert 0 <= ft.value <= traj.t_end
    # f = 1 is the theta direction
    b = sens.integrate_first_order(traj, measure_eta=m)
    assert ft.value == pytest.approx(b.partial_W_theta[-1], abs=1e-12)


def test_impulse_outside_grid_rejected():
    with pytest.raises(ValueError):
        sens.impulse_forcing(10, 11)


def test_positive_k0_rejected(exp1):
    traj, m = _path(exp1, 1.0, 2, 0.5, 0.1)
    with pytest.raises(ValueError):
        sens.integrate_first_order(traj, k0=np.array([0.1, -0.1]))
