"""Time stepping of the coupled interacting-diffusion system.

    du_1 = -V'(u_1) dt - theta dt + dB_0 + dB_1
    du_j = (V'(u_{j-1}) - V'(u_j)) dt + dB_j - dB_{j-1},   j = 2..N

with height W = sum_j u_j(t) - B_0(t) + int_0^t theta.  Initial data are
u_j(0) = H_eta(q_j) for shared uniforms q_j, so runs at different (eta, theta)
are coupled through q and the Brownian paths.
"""
from dataclasses import dataclass, field
import csv
import math

import numpy as np
from scipy import linalg

from . import _kernels as K
from . import equilibrium as eq
from .potential import PotentialSpec
from .rng import coupling_uniforms

DEFAULT_BOUND = 1e3


class ExplosionError(RuntimeError):
    """Raised when |u_j| leaves the configured bound or turns non-finite."""

    def __init__(self, msg, step=None, last_state=None):
        super().__init__(msg)
        self.step = step
        self.last_state = last_state


def snap_grid(t_end, dt):
    """Number of steps and effective dt so that t_end lies on the grid."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if t_end < 0:
        raise ValueError("t_end must be non-negative")
    if t_end == 0:
        return 0, float(dt)
    n = max(1, math.ceil(t_end / dt - 1e-12))
    return n, t_end / n


@dataclass(frozen=True)
class NoiseBlock:
    """Counter-based Brownian increments for B_0..B_N.

    Increments are a pure function of (seed, replica, stream, step, level).
    ``level`` > 0 refines a coarse grid of step dt * 2**level by Brownian
    bridges, so NoiseBlock(s, dt/2, 2n, level=1) sees the same path as
    NoiseBlock(s, dt, n).  ``scale`` = 0 gives the noiseless system.
    """
    seed: int
    dt: float
    n_steps: int
    level: int = 0
    scale: float = 1.0
    replica: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 0 or self.level < 0:
            raise ValueError("n_steps and level must be non-negative")

    @classmethod
    def for_horizon(cls, seed, dt, t_end, **kw):
        n, dt_eff = snap_grid(t_end, dt)
        return cls(seed, dt_eff, n, **kw)

    def refined(self):
        """The same Brownian path on a grid of half the step."""
        return NoiseBlock(self.seed, self.dt / 2, 2 * self.n_steps, self.level + 1,
                          self.scale, self.replica)

    def increments(self, n_streams):
        out = np.empty((self.n_steps, n_streams))
        row = np.empty(n_streams)
        for m in range(self.n_steps):
            K.step_increments(np.uint64(self.seed), self.replica, m, n_streams, self.level,
                              self.dt, self.scale, row)
            out[m] = row
        return out


@dataclass(frozen=True)
class ThreeParamDrive:
    """theta1 before the switch time Y N^(2/3), theta2 after (snapped to the grid)."""
    theta1: float
    theta2: float
    Y: float
    N: int
    dt: float
    switch_idx: int = field(init=False)
    switch_time: float = field(init=False)
    snap: float = field(init=False)

    def __post_init__(self):
        if not (self.theta1 > 0 and self.theta2 > 0):
            raise ValueError("drive parameters must be positive")
        if self.Y < 0:
            raise ValueError("Y must be non-negative")
        raw = self.Y * self.N ** (2.0 / 3.0)
        idx = int(round(raw / self.dt))
        object.__setattr__(self, "switch_idx", idx)
        object.__setattr__(self, "switch_time", idx * self.dt)
        object.__setattr__(self, "snap", idx * self.dt - raw)


def _drive_params(drive, n_steps):
    if isinstance(drive, ThreeParamDrive):
        return float(drive.theta1), float(drive.theta2), int(drive.switch_idx)
    theta = float(drive)
    if not theta > 0:
        raise ValueError("theta must be positive")
    return theta, theta, 0


@dataclass
class Trajectory:
    spec: PotentialSpec
    drive: object
    eta: float
    N: int
    dt: float
    u: np.ndarray          # shape (n_steps + 1, N)
    B0_path: np.ndarray    # shape (n_steps + 1,)
    dB: np.ndarray         # shape (n_steps, N + 1)
    q: np.ndarray
    scheme: str
    noise: NoiseBlock

    @property
    def n_steps(self):
        return self.u.shape[0] - 1

    @property
    def grid(self):
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def t_end(self):
        return self.n_steps * self.dt

    def drive_params(self):
        return _drive_params(self.drive, self.n_steps)

    def step_index(self, t):
        m = t / self.dt
        idx = int(round(m))
        if abs(m - idx) > 1e-9 * max(1.0, abs(m)) or not 0 <= idx <= self.n_steps:
            raise ValueError(f"t = {t} is not a grid time")
        return idx


@dataclass(frozen=True)
class HeightSample:
    W: float
    N: int
    t: float
    eta: float
    drive: object
    sum_u: float
    B0: float
    drift: float


def gaussian_transition(N, dt):
    """Matrices of the exact one-step law for V(x) = x^2 / 2.

    Returns (P, phiG, c, R): u(t+dt) = P u - theta c + phiG dB + R z with dB
    the Brownian increments of the step and z iid N(0,1) independent of dB.
    """
    A = np.zeros((N, N))
    np.fill_diagonal(A, -1.0)
    A[np.arange(1, N), np.arange(N - 1)] = 1.0
    G = np.zeros((N, N + 1))
    G[0, 0] = 1.0
    G[0, 1] = 1.0
    for j in range(1, N):
        G[j, j + 1] = 1.0
        G[j, j] = -1.0
    aug = np.zeros((2 * N, 2 * N))
    aug[:N, :N] = A * dt
    aug[:N, N:] = np.eye(N) * dt
    ex = linalg.expm(aug)
    P = np.tril(ex[:N, :N])
    S = ex[:N, N:]                      # int_0^dt e^{As} ds = dt phi1(A dt)
    phiG = S @ G / dt                   # E[stochastic integral | dB] = phiG dB
    c = S[:, 0].copy()
    Pinf = linalg.solve_continuous_lyapunov(A, -G @ G.T)
    Q = Pinf - P @ Pinf @ P.T
    resid = Q - dt * (phiG @ phiG.T)
    resid = 0.5 * (resid + resid.T)
    lam, vec = np.linalg.eigh(resid)
    R = vec * np.sqrt(np.clip(lam, 0.0, None))
    return P, phiG, c, R


def _scheme_mats(scheme, spec, N, dt):
    code = K.SCHEMES.get(scheme)
    if code is None:
        raise ValueError(f"unknown scheme {scheme!r}")
    if code == K.EXACT_GAUSSIAN:
        if spec.variant != "quadratic":
            raise ValueError("exact_gaussian requires the quadratic potential")
        P, phiG, c, R = gaussian_transition(N, dt)
    else:
        P = np.zeros((1, 1))
        phiG = np.zeros((1, 1))
        c = np.zeros(1)
        R = np.zeros((1, 1))
    return code, P, phiG, c, R


def initial_state(measure_eta, q):
    return np.asarray(eq.inverse_cdf(measure_eta, np.asarray(q, dtype=float)), dtype=float)


def simulate(spec, measure_eta, drive, N, t_end, noise, scheme="tamed_euler", q=None,
             u0=None, bound=DEFAULT_BOUND):
    """Simulate one path and store it.

    ``q`` defaults to the coupling uniforms of ``noise.replica``; ``u0``
    overrides the initial data H_eta(q) (used for deterministic checks).
    """
    if not (isinstance(N, (int, np.integer)) and N >= 1):
        raise ValueError("N must be a positive integer")
    n_steps = int(round(t_end / noise.dt))
    if abs(n_steps * noise.dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError("t_end must lie on the noise grid (use NoiseBlock.for_horizon)")
    if n_steps > noise.n_steps:
        raise ValueError("noise block does not cover t_end")
    if q is None:
        q = coupling_uniforms(noise.seed, [noise.replica], N)[0]
    q = np.asarray(q, dtype=float)[:N]
    if u0 is None:
        u0 = initial_state(measure_eta, q)
    u0 = np.ascontiguousarray(u0, dtype=float)
    th1, th2, sw = _drive_params(drive, n_steps)
    code, P, phiG, c, R = _scheme_mats(scheme, spec, N, noise.dt)
    s, w, params = spec.packed()
    U = np.empty((n_steps + 1, N))
    B0 = np.empty(n_steps + 1)
    dB = np.empty((n_steps, N + 1))
    done = K.simulate_path(s, w, params, code, noise.dt, n_steps, th1, th2, sw, u0,
                           np.uint64(noise.seed), noise.replica, noise.level, noise.scale,
                           P, phiG, c, R, bound, U, B0, dB)
    if done < n_steps:
        raise ExplosionError(f"|u| exceeded {bound} at step {done + 1}", done + 1, U[done].copy())
    return Trajectory(spec, drive, float(measure_eta.theta), N, noise.dt, U, B0, dB, q,
                      scheme, noise)


def height(traj, t):
    """W at grid time t with its components."""
    m = traj.step_index(t)
    t_grid = m * traj.dt
    th1, th2, sw = traj.drive_params()
    su = 0.0
    for x in traj.u[m]:
        su += x
    b0 = float(traj.B0_path[m])
    drift = th2 * t_grid + (th1 - th2) * min(t_grid, sw * traj.dt)
    return HeightSample(su - b0 + drift, traj.N, t_grid, traj.eta, traj.drive, su, b0, drift)


def coupled_family(spec, q, noise, params, N, t_end, scheme="tamed_euler",
                   tail_tol=1e-14, quad_tol=1e-10, bound=DEFAULT_BOUND):
    """One trajectory per (eta, drive) pair, all with the same q and noise."""
    q = np.asarray(q, dtype=float)
    if q.shape[0] < N:
        raise ValueError("need at least N uniforms")
    cache = {}
    out = []
    for eta, drive in params:
        if eta not in cache:
            cache[eta] = eq.build(spec, eta, tail_tol=tail_tol, quad_tol=quad_tol)
        out.append(simulate(spec, cache[eta], drive, N, t_end, noise, scheme, q=q, bound=bound))
    return out


def dump_trajectory(traj, path):
    """Write the path as CSV rows (site, time, u)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["site", "time", "u"])
        for m in range(traj.u.shape[0]):
            t = m * traj.dt
            for j in range(traj.N):
                wr.writerow([j + 1, repr(t), repr(float(traj.u[m, j]))])


@dataclass
class Forcing:
    """Piecewise-constant f >= 0 on the grid with an optional impulse."""
    rates: np.ndarray
    impulse_idx: int = -1
    impulse_weight: float = 0.0

    @property
    def nonnegative(self):
        return bool(np.all(self.rates >= 0) and self.impulse_weight >= 0)

    def total(self, dt):
        return float(np.sum(self.rates) * dt + max(self.impulse_weight, 0.0))


@dataclass
class EnsembleResult:
    W: np.ndarray
    parts: np.ndarray           # columns: sum u, B0(t), drift integral
    sens: np.ndarray
    psg: np.ndarray
    violations: np.ndarray
    status: np.ndarray
    u_final: np.ndarray
    t: float
    dt: float
    n_steps: int

    @property
    def ok(self):
        return self.status == K.STATUS_OK

    @property
    def n_failed(self):
        return int(np.sum(~self.ok))

    def sens_col(self, name):
        return self.sens[:, getattr(K, "S_" + name.upper())]

    def violation_totals(self):
        tot = self.violations[self.ok].sum(axis=0)
        return dict(zip(K.VIOLATION_NAMES, (int(v) for v in tot)))


def run_ensemble(spec, theta, N, t_end, dt, seed, replicas, eta=None, drive=None,
                 scheme="tamed_euler", tangents=False, second=False, forcings=(),
                 c0=0.0, level=0, scale=1.0, bound=DEFAULT_BOUND, tol_hi=1e-12,
                 measure_eta=None):
    """Stream ``replicas`` coupled replicas (ids 0..R-1 or an explicit array).

    Initial data come from the shared coupling uniforms of each replica id, so
    two calls with the same seed and ids but different (eta, theta) are
    pathwise coupled.
    """
    ids = np.arange(replicas, dtype=np.int64) if np.isscalar(replicas) else \
        np.asarray(replicas, dtype=np.int64)
    R = ids.shape[0]
    eta = theta if eta is None else eta
    drive = theta if drive is None else drive
    n_steps, dt_eff = snap_grid(t_end, dt)
    if isinstance(drive, ThreeParamDrive) and abs(drive.dt - dt_eff) > 1e-15 * dt_eff:
        raise ValueError("ThreeParamDrive must be built on the snapped grid dt")
    m_eta = measure_eta or eq.build(spec, eta)
    q = coupling_uniforms(seed, ids, N)
    u0 = np.ascontiguousarray(eq.inverse_cdf(m_eta, q).reshape(R, N))
    if tangents:
        k0 = np.ascontiguousarray(eq.inverse_cdf_eta_derivative(m_eta, q, 1, x=u0).reshape(R, N))
        kk0 = np.ascontiguousarray(eq.inverse_cdf_eta_derivative(m_eta, q, 2, x=u0).reshape(R, N)) \
            if second else np.zeros((R, N))
    else:
        k0 = np.zeros((R, N))
        kk0 = np.zeros((R, N))
    th1, th2, sw = _drive_params(drive, n_steps)
    code, P, phiG, c, Rm = _scheme_mats(scheme, spec, N, dt_eff if n_steps else 1.0)
    nq = len(forcings)
    f_rates = np.zeros((nq, n_steps))
    imp_idx = np.full(nq, -1, dtype=np.int64)
    imp_w = np.zeros(nq)
    for i, f in enumerate(forcings):
        f_rates[i] = f.rates[:n_steps]
        imp_idx[i] = f.impulse_idx
        imp_w[i] = f.impulse_weight
    s, w, params = spec.packed()
    out_W = np.empty(R)
    parts = np.empty((R, 3))
    sens = np.full((R, K.N_SENS), np.nan)
    psg = np.full((R, nq), np.nan)
    viol = np.zeros((R, K.N_VIOL), dtype=np.int64)
    status = np.zeros(R, dtype=np.int64)
    u_fin = np.empty((R, N))
    K.ensemble(s, w, params, code, dt_eff, n_steps, th1, th2, sw, u0, k0, kk0,
               np.uint64(seed), ids, level, scale, P, phiG, c, Rm,
               bool(tangents), bool(second), float(c0), f_rates, imp_idx, imp_w,
               float(bound), float(tol_hi), out_W, parts, sens, psg, viol, status, u_fin)
    return EnsembleResult(out_W, parts, sens, psg, viol, status, u_fin,
                          n_steps * dt_eff, dt_eff, n_steps)
