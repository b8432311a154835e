import math

import numpy as np
import pytest
from statsmodels.stats.diagnostic import normal_ad

from oydiff import estimators as est


def test_jackknife_of_mean_equals_batch_means():
    x = np.random.default_rng(0).standard_normal(640)
    v, se, b = est.jackknife(np.mean, [x], 32)
    rep = est.mean_report(x, 32)
    assert b == 32 and v == pytest.approx(rep.estimate)
    assert se == pytest.approx(rep.stderr, rel=1e-10)


def test_variance_report_coverage():
    rng = np.random.default_rng(1)
    z = [est.variance_report(rng.standard_normal(400) * 2.0).z(4.0) for _ in range(200)]
    assert np.mean(np.abs(z) <= 2.0) > 0.85


def test_small_samples_use_one_replica_per_batch():
    ids, b = est.batch_ids(7)
    assert b == 7 and list(ids) == list(range(7))


def test_anderson_darling_matches_statsmodels():
    rng = np.random.default_rng(2)
    for x in (rng.standard_normal(300), rng.exponential(size=300), rng.uniform(size=50)):
        a2, p = est.anderson_darling_normal(x)
        ref_a2, ref_p = normal_ad(x)
        assert a2 == pytest.approx(ref_a2, rel=1e-6)
        assert p == pytest.approx(ref_p, abs=1e-8)


def test_wls_slope_recovers_exact_line():
    x = np.log([16, 32, 64, 128])
    y = 0.3 + 2.0 / 3.0 * x
    s, se, ci, b = est.wls_slope(x, y, np.full(4, 0.01))
    assert s == pytest.approx(2 / 3, abs=1e-12) and b == pytest.approx(0.3, abs=1e-12)
    assert ci[0] <= s <= ci[1]


def test_wls_slope_weights():
    x = np.array([0.0, 1.0, 2.0])
    y = np.array([0.0, 1.0, 5.0])
    s_heavy_last, *_ = est.wls_slope(x, y, np.array([1.0, 1.0, 1e-3]))
    s_light_last, *_ = est.wls_slope(x, y, np.array([1e-3, 1e-3, 10.0]))
    assert s_light_last == pytest.approx(1.0, abs=1e-3)
    assert s_heavy_last > 2.0
