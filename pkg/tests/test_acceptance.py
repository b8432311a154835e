"""Acceptance criteria 1-10, run at their stated tolerances.

Each test prints one line "[criterion k] PASS|FAIL ..." and a summary of all
lines is printed when the module finishes.  Runtime is dominated by the
scaling fit (criterion 8, about half an hour on one core).
"""
import math
import time

import numpy as np
import pytest

from oydiff import dynamics as dyn
from oydiff import equilibrium as eq
from oydiff import experiments as X
from oydiff import potential as pot
from oydiff import pseudo_gibbs as psg
from oydiff import sensitivity as sens
from oydiff.pseudo_gibbs import PsgQuery

LINES = {}


@pytest.fixture(scope="module", autouse=True)
def summary():
    yield
    print("\n" + "\n".join(LINES[k] for k in sorted(LINES)))


@pytest.fixture
def emit(capsys):
    def _emit(k, name, passed, detail):
        line = f"[criterion {k:2d}] {'PASS' if passed else 'FAIL'} {name}: {detail}"
        LINES[k] = line
        with capsys.disabled():
            print("\n" + line)
    return _emit


def _zmax(rows, key="z"):
    return max(abs(r[key]) for r in rows)


# --------------------------------------------------------------------------- 1

def test_c01_gaussian_closed_form(emit):
    t0 = time.time()
    exact = X.gaussian_closed_form((1, 4, 16), (0.5, 1.0, 2.0), 100_000, base_seed=101)
    z = [(r["estimate"] - r["bound"]) / r["stderr"] for r in exact.rows]
    # time-stepped cross-check at dt = 1e-3 on the small chains
    stepped = X.gaussian_closed_form((1, 4), (0.5, 1.0, 2.0), 20_000, base_seed=102,
                                     scheme="tamed_euler", dt=1e-3)
    zs = [(r["estimate"] - r["bound"]) / r["stderr"] for r in stepped.rows]
    elapsed = time.time() - t0
    ok = exact.passed and stepped.passed and elapsed < 600
    emit(1, "Gaussian closed form", ok,
         f"max|z| exact transition {max(map(abs, z)):.2f} (9 cells, 1e5 replicas), "
         f"tamed dt=1e-3 {max(map(abs, zs)):.2f} (N<=4, 2e4 replicas), {elapsed:.0f}s")
    assert ok


# --------------------------------------------------------------------------- 2

def test_c02_variance_representation(emit):
    cfg = X.ExperimentConfig(pot.exponential(1.0), 1.0, (8, 32), replicas=10_000, dt=0.05,
                             scheme="semi_implicit", base_seed=202)
    res = X.variance_via_representation(cfg)
    parts = []
    for r in res.rows:
        zs = (r["z_direct_form1"], r["z_direct_form2"], r["z_form1_form2"])
        parts.append(f"N={r['N']}: var {r['estimate']:.3f} form1 {r['form1']:.3f} "
                     f"form2 {r['form2']:.3f} max|z| {max(map(abs, zs)):.2f}")
    emit(2, "variance representation", res.passed, "; ".join(parts))
    assert res.passed


# --------------------------------------------------------------------------- 3

def test_c03_generating_function(emit):
    parts, ok = [], True
    cfg = X.ExperimentConfig(pot.exponential(1.0), 1.0, (8, 16), replicas=10_000, dt=0.05,
                             scheme="semi_implicit", base_seed=303)
    for off in (-0.05, 0.05):
        r = X.generating_function_check(cfg, 1.0 + off, richardson=True)
        ok &= r.passed
        parts.append(f"exp d={off:+.2f} max|z| {_zmax(r.rows):.2f} "
                     f"(plain dt/2 {max(abs(x['z_plain_fine']) for x in r.rows):.1f})")
    # quadratic at t = N exactly, where the right-hand side is identically 1
    for off in (-0.05, 0.05):
        rows = []
        for N in (8, 16):
            qcfg = X.ExperimentConfig(pot.quadratic(), 1.0, (N,), t_rule={"kind": "fixed", "t": N},
                                      replicas=10_000, dt=1e9, scheme="exact_gaussian",
                                      base_seed=304 + N)
            r = X.generating_function_check(qcfg, 1.0 + off)
            ok &= r.passed
            rows += r.rows
        exact_one = all(x["bound"] == 1.0 and x["t"] == x["N"] for x in rows)
        ok &= exact_one
        parts.append(f"quad d={off:+.2f} max|z| {_zmax(rows):.2f} rhs==1 {exact_one}")
    emit(3, "generating function", ok, "; ".join(parts))
    assert ok


# --------------------------------------------------------------------------- 4

SIGN_KEYS = ("h_pos", "k_pos", "minus_h_gt_t", "dW_theta_neg", "dW_eta_pos", "d2W_theta_neg",
             "d2W_theta_eta_neg", "mixed_A_neg", "forced_h_pos", "psg_out_of_range")


def test_c04_sign_suite(emit):
    parts, ok = [], True
    for name, spec in (("exponential", pot.exponential(1.0)),
                       ("laplace", pot.laplace_measure([(1.0, 1.0), (2.0, 0.5)]))):
        c0 = pot.audit_oy_type(spec).c0
        m = eq.build(spec, 1.0)
        N = 16
        t = N * m.psi[1]
        n, dt = dyn.snap_grid(t, 0.01)
        forcings = [PsgQuery.total_mass().forcing(n, dt), sens.impulse_forcing(n, n // 2),
                    sens.constant_forcing(n), sens.indicator_after(n, n // 3)]
        res = dyn.run_ensemble(spec, 1.0, N, n * dt, dt, 404, 1000, tangents=True, second=True,
                               c0=c0, forcings=forcings, measure_eta=m)
        v = res.violation_totals()
        bad = {k: v[k] for k in SIGN_KEYS if v[k]}
        mass = res.psg[res.ok, 0]
        in_range = bool(np.all((mass >= 0) & (mass <= 1)))
        ok &= not bad and in_range and res.n_failed == 0
        parts.append(f"{name}: {sum(v[k] for k in SIGN_KEYS)} violations over "
                     f"{res.ok.sum()} paths x {n} steps x {N} sites, total mass in "
                     f"[{mass.min():.3g}, {mass.max():.3g}]")
    emit(4, "sign suite", ok, "; ".join(parts))
    assert ok


# --------------------------------------------------------------------------- 5

def test_c05_pseudo_gibbs_oracle(emit):
    spec = pot.exponential(1.0)
    m = eq.build(spec, 1.0)
    t, dt = 1.0, 5e-4
    worst = 0.0
    for N in (1, 2, 3):
        for p in range(20):
            nb = dyn.NoiseBlock.for_horizon(505, dt, t, replica=p)
            traj = dyn.simulate(spec, m, 1.0, N, t, nb)
            for q in (PsgQuery.total_mass(), PsgQuery.mean_s0(), PsgQuery.tail(t / 2)):
                a = psg.evaluate_ode(traj, q).value
                b = psg.evaluate_quadrature(traj, q).value
                worst = max(worst, abs(a - b))
    ok = worst <= 1e-6
    emit(5, "pseudo-Gibbs oracle", ok,
         f"max |ODE - quadrature| = {worst:.2e} over N in 1..3, 20 paths, 3 queries, dt={dt}")
    assert ok


# --------------------------------------------------------------------------- 6

def test_c06_three_parameter_identity(emit):
    spec = pot.exponential(1.0)
    m = eq.build(spec, 1.0)
    N, Y, paths = 8, 0.5, 50
    t = N * m.psi[1]
    n, dt = dyn.snap_grid(t, 0.01)
    drive = dyn.ThreeParamDrive(1.0, 1.0, Y, N, dt)
    f = sens.indicator_after(n, drive.switch_idx)
    res = dyn.run_ensemble(spec, 1.0, N, n * dt, dt, 606, paths, drive=drive, tangents=True,
                           forcings=[f], measure_eta=m)
    worst = 0.0
    for r in range(paths):
        nb = dyn.NoiseBlock(606, dt, n, replica=r)
        traj = dyn.simulate(spec, m, drive, N, n * dt, nb)
        pp = psg.evaluate_ode(traj, PsgQuery.positive_part(drive.switch_time)).value
        tangent = sens.integrate_forced(traj, sens.drive_theta2_forcing(traj)).value
        worst = max(worst, abs(res.psg[r, 0] - pp), abs(tangent - pp))
    # the forced tangent is the theta2 derivative: finite-difference sanity check
    h = 1e-5
    nb = dyn.NoiseBlock(606, dt, n, replica=0)
    fam = [dyn.simulate(spec, m, dyn.ThreeParamDrive(1.0, 1.0 + s * h, Y, N, dt), N, n * dt, nb,
                        "semi_implicit") for s in (1, -1)]
    base = dyn.simulate(spec, m, drive, N, n * dt, nb, "semi_implicit")
    fd = (dyn.height(fam[0], n * dt).W - dyn.height(fam[1], n * dt).W) / (2 * h)
    tg = sens.integrate_forced(base, sens.drive_theta2_forcing(base)).value
    ok = worst <= 1e-12
    emit(6, "three-parameter identity", ok,
         f"max pathwise |dW~/dtheta2 - E[(s0 - Y N^(2/3))_+]| = {worst:.1e} over {paths} paths; "
         f"FD check {fd:.4f} vs tangent {tg:.4f}")
    assert ok
    assert fd == pytest.approx(tg, rel=2e-2)


# --------------------------------------------------------------------------- 7

def test_c07_stationarity(emit):
    spec = pot.exponential(1.0)
    cfg = X.ExperimentConfig(spec, 1.0, (8,), replicas=10_000, dt=0.02,
                             scheme="semi_implicit", base_seed=707)
    marg = X.marginal_stationarity(cfg)
    pmin = min(r["pvalue"] for r in marg.rows)
    m = eq.build(spec, 1.0)
    t = 8 * m.psi[1]
    shift = psg.stationarity_shift_check(spec, 1.0, 8, t, t / 2, 0.02, 708, 10_000,
                                         scheme="semi_implicit")
    ok = bool(marg.passed) and shift["pvalue"] >= 1e-3
    emit(7, "stationarity", ok,
         f"marginal KS min p over 8 sites {pmin:.3g}; shift KS p {shift['pvalue']:.3g} "
         f"(means {shift['mean_a']:.4f} vs {shift['mean_b']:.4f})")
    assert ok


# --------------------------------------------------------------------------- 8

def test_c08_exponent_fit(emit):
    t0 = time.time()
    cfg = X.ExperimentConfig(pot.exponential(1.0), 1.0, (16, 32, 64, 128, 256),
                             replicas=10_000, dt=0.2, scheme="semi_implicit", base_seed=808)
    with pytest.warns(UserWarning):
        main = X.exponent_fit(cfg, (0.55, 0.80))
    qcfg = X.ExperimentConfig(pot.quadratic(), 1.0, (16, 32, 64, 128, 256), replicas=10_000,
                              dt=1e9, scheme="exact_gaussian", base_seed=809)
    with pytest.warns(UserWarning):
        ctrl = X.exponent_fit(qcfg, (0.40, 0.60))
    elapsed = time.time() - t0
    ok = bool(main.passed and ctrl.passed) and elapsed <= 3600
    d, c = main.details, ctrl.details
    emit(8, "exponent fit", ok,
         f"exponential slope {d['slope']:.3f} +- {d['stderr']:.3f} (band 0.55-0.80), "
         f"quadratic control {c['slope']:.3f} +- {c['stderr']:.3f} (band 0.40-0.60), "
         f"{elapsed / 60:.1f} min")
    assert ok


# --------------------------------------------------------------------------- 9

def test_c09_derivative_validation(emit):
    r = X.derivative_validation(pot.exponential(1.0), 1.0, 4, 2.0, 0.02, 0.02, 909,
                                paths=8, levels=3)
    rt, re = r.details["ratios_theta"], r.details["ratios_eta"]
    emit(9, "derivative validation", r.passed,
         f"error ratios under halving h and dt: theta {', '.join(f'{x:.2f}' for x in rt)}; "
         f"eta {', '.join(f'{x:.2f}' for x in re)}")
    assert r.passed


# --------------------------------------------------------------------------- 10

CATALOGUE = {
    "exponential(1)": pot.exponential(1.0),
    "exponential(2)": pot.exponential(2.0),
    "laplace{(1,1),(2,.5)}": pot.laplace_measure([(1.0, 1.0), (2.0, 0.5)]),
    "laplace{(.5,2),(3,.1)}": pot.laplace_measure([(0.5, 2.0), (3.0, 0.1)]),
    "perturbed(exp, .01, -1, 1)": pot.perturbed(pot.exponential(1.0), 0.01, -1.0, 1.0),
    "perturbed(exp, .005, -2, 1)": pot.perturbed(pot.exponential(1.0), 0.005, -2.0, 1.0),
}


def test_c10_psi2_nonpositive(emit):
    grid = np.linspace(0.25, 4.0, 64)
    worst = {}
    for name, spec in CATALOGUE.items():
        assert pot.audit_oy_type(spec).passed, name
        worst[name] = max(v for _, v in eq.psi2_grid_check(spec, grid, 1e-10))
    ok = max(worst.values()) <= 1e-8
    emit(10, "psi2 nonpositivity", ok,
         f"max psi2 over 64 thetas in [0.25, 4]: " +
         ", ".join(f"{k} {v:.3g}" for k, v in worst.items()))
    assert ok
