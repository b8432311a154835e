"""Pseudo-Gibbs functional E_{N,t}[F] for F(s) = int_0^s f.

The ODE route reads it off the forced tangent, E[F] = sum_j h^(f)_j(t) + F(t).
The quadrature route evaluates the recursion

    E_n(t) = int_0^t exp(-int_s^t a_n) a_n(s) E_{n-1}(s) ds,   E_0 = F,

with a_n = V''(u_n) frozen per step, by composite Simpson on the trajectory's
own grid.  It is O(M^2) per level and only offered for N <= 3.
"""
from dataclasses import dataclass, field
import csv
import warnings

import numpy as np
from scipy import stats

from . import dynamics as dyn
from . import potential as pot
from . import sensitivity as sens
from .dynamics import Forcing

KINDS = ("total_mass", "tail_indicator", "positive_part", "integral_of")


@dataclass(frozen=True)
class PsgQuery:
    kind: str
    threshold: float = 0.0                      # t0 for tail_indicator, Y' for positive_part
    rates: tuple = field(default=None)          # f per step for integral_of (None means f = 1)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown query kind {self.kind!r}")
        if self.threshold < 0:
            raise ValueError("threshold must be non-negative")
        if self.rates is not None and min(self.rates) < 0:
            raise ValueError("integral_of needs f >= 0")

    @classmethod
    def total_mass(cls):
        return cls("total_mass")

    @classmethod
    def tail(cls, t0):
        return cls("tail_indicator", float(t0))

    @classmethod
    def positive_part(cls, y):
        return cls("positive_part", float(y))

    @classmethod
    def mean_s0(cls):
        return cls("integral_of")

    def label(self):
        if self.kind in ("tail_indicator", "positive_part"):
            return f"{self.kind}({self.threshold:g})"
        return self.kind

    def forcing(self, n_steps, dt):
        """Grid forcing for this query; thresholds are snapped to the grid."""
        t = n_steps * dt
        if self.kind == "total_mass":
            return sens.impulse_forcing(n_steps, 0)
        if self.kind == "integral_of":
            if self.rates is None:
                return sens.constant_forcing(n_steps)
            r = np.asarray(self.rates, dtype=float)
            if r.shape[0] != n_steps:
                raise ValueError("integral_of rates must have one value per step")
            return Forcing(r)
        if self.threshold > t * (1 + 1e-12):
            raise ValueError(f"threshold {self.threshold} beyond t = {t}")
        idx = int(round(self.threshold / dt))
        if abs(idx * dt - self.threshold) > 1e-9 * max(1.0, self.threshold):
            warnings.warn(f"threshold {self.threshold} snapped to grid time {idx * dt}")
        if self.kind == "tail_indicator":
            return sens.impulse_forcing(n_steps, idx)
        return sens.indicator_after(n_steps, idx)


@dataclass(frozen=True)
class PsgEvaluation:
    value: float
    method: str
    path_id: int
    query: PsgQuery


def evaluate_ode(traj, query, path_id=None):
    """sum_j h^(f)_j(t) + F(t) via the forced tangent."""
    f = query.forcing(traj.n_steps, traj.dt)
    ft = sens.integrate_forced(traj, f)
    v = ft.value
    sup = f.total(traj.dt)
    if not -1e-9 <= v <= sup + 1e-9:
        raise AssertionError(f"pseudo-Gibbs value {v} outside [0, {sup}]")
    return PsgEvaluation(v, "ode", traj.noise.replica if path_id is None else path_id, query)


def _level0(f, dt):
    """One-sided F values per step: left (t_m+), mid, right (t_{m+1}-)."""
    rates = f.rates
    Fc = np.concatenate([[0.0], np.cumsum(rates * dt)])
    n = rates.shape[0]
    jump = np.zeros(n)
    if f.impulse_idx >= 0:
        jump[np.arange(n) >= f.impulse_idx] = f.impulse_weight
    left = Fc[:-1] + jump
    mid = Fc[:-1] + 0.5 * dt * rates + jump
    right = Fc[1:] + jump
    return left, mid, right


def _next_level(a, dt, left, mid, right, need_all):
    """E_n at every node and midpoint (or only at the final node)."""
    M = a.shape[0]
    An = np.concatenate([[0.0], np.cumsum(a * dt)])
    Amid = An[:-1] + 0.5 * a * dt
    w6 = dt / 6.0

    def full_panels(A_target, upto):
        i = slice(0, upto)
        return np.sum(w6 * a[i] * (np.exp(-(A_target - An[:upto])) * left[i]
                                   + 4.0 * np.exp(-(A_target - Amid[:upto])) * mid[i]
                                   + np.exp(-(A_target - An[1:upto + 1])) * right[i]))

    if not need_all:
        return full_panels(An[M], M)
    node = np.empty(M + 1)
    midv = np.empty(M)
    h = 0.5 * dt
    for k in range(M + 1):
        node[k] = full_panels(An[k], k)
    for k in range(M):
        base = full_panels(Amid[k], k)
        g0 = np.exp(-(Amid[k] - An[k])) * left[k]
        g1 = mid[k]
        g2 = np.exp(-(Amid[k] - An[k + 1])) * right[k]
        midv[k] = base + h * a[k] * (5.0 / 12.0 * g0 + 8.0 / 12.0 * g1 - 1.0 / 12.0 * g2)
    return node, midv


def evaluate_quadrature(traj, query, path_id=None):
    """Nested composite-Simpson evaluation of the recursion (N <= 3)."""
    if traj.N > 3:
        raise ValueError("quadrature oracle is limited to N <= 3")
    f = query.forcing(traj.n_steps, traj.dt)
    M = traj.n_steps
    pid = traj.noise.replica if path_id is None else path_id
    if M == 0:
        return PsgEvaluation(0.0, "quadrature", pid, query)
    dt = traj.dt
    a_all = pot.eval(traj.spec, traj.u[:-1], 2)
    left, mid, right = _level0(f, dt)
    val = None
    for n in range(traj.N):
        last = n == traj.N - 1
        res = _next_level(a_all[:, n], dt, left, mid, right, need_all=not last)
        if last:
            val = float(res)
        else:
            node, midv = res
            left, mid, right = node[:-1], midv, node[1:]
    return PsgEvaluation(val, "quadrature", pid, query)


def stationarity_shift_check(spec, theta, N, t, tau, dt, seed, replicas, scheme="tamed_euler"):
    """Two-sample KS test of E_{N,t}[1{s0 >= tau}] against E_{N,t-tau}[1{s0 >= 0}].

    The two ensembles use independent seeds (seed and seed + 1).
    """
    if not 0 <= tau <= t:
        raise ValueError("need 0 <= tau <= t")
    n_total, dt_eff = dyn.snap_grid(t, dt)
    tau_idx = int(round(tau / dt_eff)) if n_total else 0
    n_short = n_total - tau_idx
    fa = sens.impulse_forcing(n_total, tau_idx)
    ra = dyn.run_ensemble(spec, theta, N, n_total * dt_eff, dt_eff, seed, replicas,
                          scheme=scheme, tangents=True, forcings=[fa])
    fb = sens.impulse_forcing(n_short, 0)
    rb = dyn.run_ensemble(spec, theta, N, n_short * dt_eff, dt_eff, seed + 1, replicas,
                          scheme=scheme, tangents=True, forcings=[fb])
    xa = ra.psg[ra.ok, 0]
    xb = rb.psg[rb.ok, 0]
    if np.all(xa == xa[0]) and np.all(xb == xa[0]):
        stat, p = 0.0, 1.0
    else:
        res = stats.ks_2samp(xa, xb)
        stat, p = float(res.statistic), float(res.pvalue)
    return {"N": N, "t": n_total * dt_eff, "tau": tau_idx * dt_eff, "statistic": stat,
            "pvalue": p, "n_a": int(xa.size), "n_b": int(xb.size),
            "mean_a": float(xa.mean()), "mean_b": float(xb.mean())}


def write_csv(evals, path, replica_ids=None):
    """Rows (replica, query, value)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["replica", "query", "value"])
        for i, ev in enumerate(evals):
            rid = ev.path_id if replica_ids is None else replica_ids[i]
            wr.writerow([rid, ev.query.label(), repr(ev.value)])
