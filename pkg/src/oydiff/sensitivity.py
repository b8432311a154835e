"""Pathwise parameter derivatives along a stored trajectory.

The tangent systems are lower triangular:

    h_1' = -V''(u_1) h_1 - f,   h_j' = V''(u_{j-1}) h_{j-1} - V''(u_j) h_j

and their cumulative sums E_j = F + h_1 + ... + h_j obey E_j' = a_j (E_{j-1} - E_j)
with a_j = V''(u_j).  Each step freezes a_j at the left end and integrates
exactly against the linear interpolant of E_{j-1}; the update is a convex
combination, so h <= 0, 0 <= E <= sup F and the second-order signs hold
exactly in floating point rather than to a tolerance.
"""
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import equilibrium as eq
from . import potential as pot
from .dynamics import Forcing


class SensitivityError(ArithmeticError):
    pass


@dataclass
class SensitivityBundle:
    h: np.ndarray                # (n_steps + 1, N), d u_j / d theta
    k: np.ndarray                # (n_steps + 1, N), d u_j / d eta
    E: np.ndarray                # cumulative theta tangent, E[:, N] = dW/dtheta
    K: np.ndarray                # cumulative eta tangent, K[:, N] = dW/deta
    dt: float
    c0: float = 0.0
    S_thth: np.ndarray = None    # cumulative second-order families, shape (n+1, N+1)
    S_theta_eta: np.ndarray = None
    S_etaeta: np.ndarray = None
    A: np.ndarray = None         # mixed monitor, cumulative form
    X_bound: float = None

    @property
    def partial_W_theta(self):
        return self.E[:, -1]

    @property
    def partial_W_eta(self):
        return self.K[:, -1]

    @property
    def partial_W_theta_hsum(self):
        """sum_j h_j + t, the site-sum form of dW/dtheta."""
        return self.h.sum(axis=1) + np.arange(self.h.shape[0]) * self.dt

    @property
    def has_second(self):
        return self.S_thth is not None

    def _sites(self, S):
        return np.diff(S, axis=1)

    @property
    def u_thth(self):
        return self._sites(self.S_thth)

    @property
    def u_theta_eta(self):
        return self._sites(self.S_theta_eta)

    @property
    def u_etaeta(self):
        return self._sites(self.S_etaeta)

    @property
    def d2W_theta(self):
        return self.S_thth[:, -1]

    @property
    def d2W_theta_eta(self):
        return self.S_theta_eta[:, -1]

    @property
    def d2W_eta(self):
        return self.S_etaeta[:, -1]

    @property
    def mixed_monitor(self):
        return self.A[:, -1]

    def sign_report(self, tol=1e-12):
        """Counts of violated sign invariants over all grid times and sites."""
        t = np.arange(self.h.shape[0]) * self.dt
        rep = {
            "h_pos": int(np.sum(self.h > 0)),
            "k_pos": int(np.sum(self.k > 0)),
            "minus_h_gt_t": int(np.sum(-self.h > (t * (1 + tol))[:, None])),
            "dW_theta_neg": int(np.sum(self.partial_W_theta < 0)),
            "dW_eta_pos": int(np.sum(self.partial_W_eta > 0)),
        }
        if self.has_second:
            rep["d2W_theta_neg"] = int(np.sum(self.d2W_theta < 0))
            rep["d2W_theta_eta_neg"] = int(np.sum(self.d2W_theta_eta < 0))
            rep["mixed_A_neg"] = int(np.sum(self.mixed_monitor < 0))
            xb = self.X_bound
            rep["d2W_eta_below_bound"] = int(np.sum(self.d2W_eta < -xb - tol * (1 + xb)))
        return rep


@dataclass
class ForcedTangent:
    forcing: Forcing
    h_f: np.ndarray              # (n_steps + 1, N)
    E_f: np.ndarray              # cumulative, E_f[:, N] = sum h_f + F
    F: np.ndarray                # F(t_m) on the grid (right limits)
    sign_checked: bool

    @property
    def value(self):
        """sum_j h^(f)_j(t) + F(t) at the final time (cumulative form)."""
        return float(self.E_f[-1, -1])

    @property
    def values(self):
        return self.E_f[:, -1]


def _check_path(traj):
    for order in (2, 3):
        vals = pot.eval(traj.spec, traj.u, order)
        bad = np.argwhere(~np.isfinite(vals))
        if bad.size:
            m, j = bad[0]
            raise SensitivityError(f"non-finite V^({order}) at site {j + 1}, time {m * traj.dt}")


def default_k0(traj, measure_eta=None):
    m = measure_eta or eq.build(traj.spec, traj.eta)
    return np.asarray(eq.inverse_cdf_eta_derivative(m, traj.q, 1, x=traj.u[0]))


def integrate_first_order(traj, k0=None, measure_eta=None):
    """h = du/dtheta and k = du/deta along the stored path."""
    _check_path(traj)
    if k0 is None:
        k0 = default_k0(traj, measure_eta)
    k0 = np.ascontiguousarray(k0, dtype=float)
    if np.any(k0 > 0):
        raise ValueError("k0 = dH/deta must be non-positive")
    n, N = traj.u.shape[0], traj.N
    H = np.empty((n, N))
    Eo = np.empty((n, N + 1))
    Kk = np.empty((n, N))
    Ko = np.empty((n, N + 1))
    s, w, params = traj.spec.packed()
    K.first_order_path(s, w, params, traj.dt, traj.u, k0, H, Eo, Kk, Ko)
    return SensitivityBundle(H, Kk, Eo, Ko, traj.dt)


def integrate_second_order(traj, first, kk0=None, c0=0.0, measure_eta=None):
    """Fill the second-order families and the mixed monitor A_N.

    ``kk0`` is d^2 H_eta / d eta^2 at q_j; ``c0`` the constant in
    c0 V'' <= -V''' (from the potential audit).
    """
    if kk0 is None:
        m = measure_eta or eq.build(traj.spec, traj.eta)
        kk0 = eq.inverse_cdf_eta_derivative(m, traj.q, 2, x=traj.u[0])
    kk0 = np.ascontiguousarray(kk0, dtype=float)
    n, N = traj.u.shape[0], traj.N
    S1 = np.empty((n, N + 1))
    S2 = np.empty((n, N + 1))
    S3 = np.empty((n, N + 1))
    Am = np.empty((n, N + 1))
    s, w, params = traj.spec.packed()
    K.second_order_path(s, w, params, traj.dt, float(c0), traj.u, first.h, first.k, kk0,
                        S1, S2, S3, Am)
    first.S_thth, first.S_theta_eta, first.S_etaeta, first.A = S1, S2, S3, Am
    first.c0 = float(c0)
    first.X_bound = float(np.sum(np.abs(kk0)))
    return first


def constant_forcing(n_steps, value=1.0):
    return Forcing(np.full(n_steps, float(value)))


def impulse_forcing(n_steps, idx, weight=1.0):
    if not 0 <= idx <= n_steps:
        raise ValueError("impulse index outside the grid")
    return Forcing(np.zeros(n_steps), int(idx), float(weight))


def indicator_after(n_steps, idx):
    """f = 1 on steps m >= idx, i.e. F(s) = (s - t_idx)_+."""
    f = np.zeros(n_steps)
    f[max(idx, 0):] = 1.0
    return Forcing(f)


def drive_theta2_forcing(traj):
    """Forcing whose tangent is d W / d theta2 for a three-parameter drive."""
    _, _, sw = traj.drive_params()
    return indicator_after(traj.n_steps, sw)


def integrate_forced(traj, forcing):
    """Forced tangent h^(f) with the shared integrating-factor discretization."""
    n, N = traj.u.shape[0], traj.N
    rates = np.ascontiguousarray(forcing.rates[: n - 1], dtype=float)
    if rates.shape[0] != n - 1:
        raise ValueError("forcing must cover every step of the trajectory")
    Hf = np.empty((n, N))
    Ef = np.empty((n, N + 1))
    s, w, params = traj.spec.packed()
    K.forced_path(s, w, params, traj.dt, traj.u, rates, int(forcing.impulse_idx),
                  float(forcing.impulse_weight), Hf, Ef)
    F = np.concatenate([[0.0], np.cumsum(rates * traj.dt)]) if n > 1 else np.zeros(1)
    if forcing.impulse_idx >= 0:
        F[forcing.impulse_idx:] += forcing.impulse_weight
    return ForcedTangent(forcing, Hf, Ef, F, forcing.nonnegative)
