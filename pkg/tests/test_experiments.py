import json
import math

import mpmath
import numpy as np
import pytest

from oydiff import experiments as X
from oydiff import potential as pot


def _gauss_oracle(N, t):
    # direct evaluation of the integral form with mpmath
    mpmath.mp.dps = 30
    P = mpmath.quad(lambda s: s ** (N - 1) * mpmath.e ** (-s), [0, t]) / mpmath.factorial(N - 1)
    return float((N - t) * (1 - 2 * P) + 2 * mpmath.mpf(t) ** N * mpmath.e ** (-t)
                 / mpmath.factorial(N - 1))


@pytest.mark.parametrize("N,t", [(1, 0.5), (1, 1.0), (4, 2.0), (16, 16.0), (16, 32.0), (64, 50.0)])
def test_gaussian_variance_closed_form(N, t):
    assert X.gaussian_variance(N, t) == pytest.approx(_gauss_oracle(N, t), rel=1e-12)


def test_gaussian_variance_special_values():
    assert X.gaussian_variance(1, 1.0) == pytest.approx(2 / math.e, rel=1e-14)
    assert X.gaussian_variance(5, 0.0) == 5.0


def test_quadratic_generating_function_rhs_is_one_at_t_equal_N():
    for N in (8, 16):
        for eta in (0.95, 1.05):
            assert X.gf_rhs(pot.quadratic(), N, float(N), 1.0, eta) == 1.0


def test_t_rules():
    c = X.ExperimentConfig(pot.exponential(1.0), replicas=2)
    assert c.t_for(8, 1.5) == 12.0
    c.t_rule = {"kind": "fixed", "t": 3.0}
    assert c.t_for(8, 1.5) == 3.0
    c.t_rule = {"kind": "offset", "c": 2.0}
    assert c.t_for(8, 1.5) == pytest.approx(12.0 + 8.0)
    c.t_rule = {"kind": "scaled", "c": 0.5}
    assert c.t_for(8, 1.5) == 6.0


def test_replicas_must_exceed_one():
    with pytest.raises(ValueError):
        X.ExperimentConfig(pot.exponential(1.0), replicas=1)


def test_seeds_differ_by_N_and_tag():
    c = X.ExperimentConfig(pot.exponential(1.0), replicas=2, base_seed=4)
    s = {c.seed_for(N, tag) for N in (8, 16) for tag in (0, 1)}
    assert len(s) == 4 and c.seed_for(8) == c.seed_for(8)


def test_small_gaussian_closed_form_run():
    r = X.gaussian_closed_form((1, 4), (1.0,), 20000, base_seed=2)
    assert r.passed is True
    assert all(row["experiment"] == "gaussian_closed_form" for row in r.rows)


def test_representation_forms_agree_small():
    cfg = X.ExperimentConfig(pot.exponential(1.0), 1.0, (4,), replicas=600, dt=0.02,
                             base_seed=3)
    r = X.variance_via_representation(cfg)
    assert r.passed is True and r.rows[0]["sign_violations"] == 0


def test_offchar_refuses_near_characteristic_line():
    cfg = X.ExperimentConfig(pot.exponential(1.0), 1.0, (8,), replicas=10, dt=0.1)
    with pytest.raises(X.PreconditionError):
        X.offchar_normality(cfg)


def test_quadratic_control_slope_near_one_half():
    cfg = X.ExperimentConfig(pot.quadratic(), 1.0, (16, 64, 256), replicas=4000, dt=1e9,
                             scheme="exact_gaussian", base_seed=1)
    with pytest.warns(UserWarning):
        r = X.exponent_fit(cfg, (0.40, 0.60))
    assert r.passed is True
    closed = [X.gaussian_variance(N, N) for N in (16, 64, 256)]
    assert np.polyfit(np.log([16, 64, 256]), np.log(closed), 1)[0] == pytest.approx(0.5, abs=0.02)


def test_tail_audit_small():
    cfg = X.ExperimentConfig(pot.exponential(1.0), 1.0, (4,), replicas=300, dt=0.05)
    r = X.tail_bound_audit(cfg, [0.0, 1.0, 3.0])
    vals = [row["estimate"] for row in r.rows]
    assert vals == sorted(vals, reverse=True)
    assert r.passed is True


def test_write_reports(tmp_path):
    res = X.ExperimentResult("demo", [X._row("demo", 4, 1.0, np.float64(2.5), 0.1, None, True,
                                             extra=np.int64(3))], True)
    X.write_reports([res], tmp_path / "r.csv", tmp_path / "r.json")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines == ["experiment,N,t,estimate,stderr,bound,verdict", "demo,4,1.0,2.5,0.1,,True"]
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc[0]["rows"][0]["extra"] == 3
