"""Batch-means / jackknife error bars, normality and slope fits."""
from dataclasses import dataclass, field, asdict
import math

import numpy as np
from scipy import stats

MIN_BATCHES = 30
Z95 = 1.959963984540054


@dataclass
class EstimateReport:
    estimate: float
    stderr: float
    replicas: int
    ci: tuple
    batches: int
    moments: dict = field(default_factory=dict)
    n_failed: int = 0

    def as_dict(self):
        d = asdict(self)
        d["ci"] = list(self.ci)
        return d

    def z(self, target):
        return (self.estimate - target) / self.stderr if self.stderr > 0 else math.inf


def batch_ids(n, n_batches=32):
    """Contiguous batch labels; uses one replica per batch when n is small."""
    b = min(max(n_batches, MIN_BATCHES), n)
    return np.minimum((np.arange(n) * b) // n, b - 1), b


def jackknife(stat, columns, n_batches=32):
    """Delete-one-batch jackknife of ``stat(*columns)``; returns (value, se, batches)."""
    columns = [np.asarray(c, dtype=float) for c in columns]
    n = columns[0].shape[0]
    ids, b = batch_ids(n, n_batches)
    full = float(stat(*columns))
    leave = np.empty(b)
    for i in range(b):
        keep = ids != i
        leave[i] = stat(*(c[keep] for c in columns))
    se = math.sqrt((b - 1) / b * np.sum((leave - leave.mean()) ** 2))
    return full, se, b


def _report(value, se, n, b, moments=None, n_failed=0):
    return EstimateReport(value, se, n, (value - Z95 * se, value + Z95 * se), b,
                          moments or {}, n_failed)


def mean_report(x, n_batches=32, n_failed=0):
    x = np.asarray(x, dtype=float)
    ids, b = batch_ids(x.size, n_batches)
    means = np.bincount(ids, weights=x) / np.bincount(ids)
    se = float(np.std(means, ddof=1) / math.sqrt(b)) if b > 1 else math.nan
    m = float(x.mean())
    return _report(m, se, x.size, b, {"mean": m, "m2": float(np.mean(x * x))}, n_failed)


def variance_report(x, n_batches=32, n_failed=0):
    x = np.asarray(x, dtype=float)
    v, se, b = jackknife(lambda y: np.var(y, ddof=1), [x], n_batches)
    return _report(v, se, x.size, b, {"mean": float(x.mean()), "m2": float(np.mean(x * x)),
                                      "m3c": float(np.mean((x - x.mean()) ** 3))}, n_failed)


def anderson_darling_normal(x):
    """A^2 for normality with estimated mean and variance and its p-value.

    The statistic comes from scipy; the p-value uses Stephens' modified
    statistic A* = A^2 (1 + 0.75/n + 2.25/n^2) and his piecewise fit.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    a2 = float(stats.anderson(x, dist="norm").statistic)
    a = a2 * (1.0 + 0.75 / n + 2.25 / n ** 2)
    if a >= 0.6:
        p = math.exp(1.2937 - 5.709 * a + 0.0186 * a * a)
    elif a >= 0.34:
        p = math.exp(0.9177 - 4.279 * a - 1.38 * a * a)
    elif a >= 0.2:
        p = 1.0 - math.exp(-8.318 + 42.796 * a - 59.938 * a * a)
    else:
        p = 1.0 - math.exp(-13.436 + 101.14 * a - 223.73 * a * a)
    return a2, min(max(p, 0.0), 1.0)


def wls_slope(x, y, se_y):
    """Weighted least-squares slope of y on x with a 95% t interval."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = 1.0 / np.asarray(se_y, dtype=float) ** 2
    X = np.column_stack([np.ones_like(x), x])
    XtW = X.T * w
    cov = np.linalg.inv(XtW @ X)
    beta = cov @ (XtW @ y)
    resid = y - X @ beta
    dof = max(x.size - 2, 1)
    # inflate by the reduced chi-square when the scatter exceeds the error bars
    scale = max(1.0, float(np.sum(w * resid ** 2)) / dof)
    se = math.sqrt(cov[1, 1] * scale)
    tq = float(stats.t.ppf(0.975, dof))
    return float(beta[1]), se, (float(beta[1] - tq * se), float(beta[1] + tq * se)), float(beta[0])
