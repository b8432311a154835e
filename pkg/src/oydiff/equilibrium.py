"""Single-site invariant law nu_theta(dx) = exp(-theta x - V(x)) dx / Z(theta).

Builds log Z, the signed cumulants psi_k = d^{k+1}/dtheta^{k+1} log Z, a CDF
table for inverse-CDF sampling, and eta-derivatives of the inverse CDF used
as initial data for the initial-data tangents.
"""
from dataclasses import dataclass
import math
import warnings

import numpy as np
from scipy import integrate
from scipy.interpolate import PchipInterpolator

from . import potential as pot


class QuadratureError(ArithmeticError):
    def __init__(self, msg, achieved=None):
        super().__init__(msg if achieved is None else f"{msg} (achieved {achieved:.3g})")
        self.achieved = achieved


_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)
N_TABLE = 4096


@dataclass(frozen=True, eq=False)
class EquilibriumMeasure:
    spec: pot.PotentialSpec
    theta: float
    log_Z: float
    psi: dict
    x_lo: float
    x_hi: float
    tail_tol: float
    quad_tol: float
    inv_tol: float
    shift: float           # log-sum-exp offset: integrand is exp(-(theta x + V) + shift)
    nodes: np.ndarray      # table abscissae
    cdf: np.ndarray        # F at nodes
    cm1: np.ndarray        # int_{x_lo}^{x} (y - mean) nu(y) dy at nodes
    cm2: np.ndarray        # int_{x_lo}^{x} ((y - mean)^2 - psi1) nu(y) dy at nodes

    @property
    def mean(self):
        return -self.psi[0]

    @property
    def variance(self):
        return self.psi[1]

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        return -self.theta * x - pot.eval(self.spec, x, 0) - self.log_Z

    def density(self, x):
        return np.exp(self.log_density(x))

    def cdf_at(self, x):
        """F_theta(x), table value plus a local Gauss-Legendre correction."""
        return self._partial(x, 0)

    def _partial(self, x, k):
        x = np.asarray(x, dtype=float)
        xc = np.clip(x, self.x_lo, self.x_hi)
        idx = np.clip(np.searchsorted(self.nodes, xc) - 1, 0, len(self.nodes) - 2)
        # integrate from the nearer of the two bracketing nodes
        left = self.nodes[idx]
        right = self.nodes[idx + 1]
        use_right = (xc - left) > (right - xc)
        anchor = np.where(use_right, right, left)
        aidx = np.where(use_right, idx + 1, idx)
        base = (self.cdf, self.cm1, self.cm2)[k][aidx]
        half = 0.5 * (xc - anchor)
        mid = 0.5 * (xc + anchor)
        y = mid[..., None] + half[..., None] * _GL_X
        dens = np.exp(self.log_density(y))
        if k == 1:
            dens = dens * (y - self.mean)
        elif k == 2:
            dens = dens * ((y - self.mean) ** 2 - self.psi[1])
        return base + half * (dens * _GL_W).sum(axis=-1)


def _integrand_bounds(spec, theta, tail_tol):
    """Expand [x_lo, x_hi] until the integrand at both ends is below tail_tol * peak."""
    def phi(x):
        return theta * x + pot.eval(spec, x, 0)
    # phi is convex (theta x + convex V) so the minimiser is unique
    lo, hi = -1.0, 1.0
    while pot.eval(spec, lo, 1) + theta > 0:
        lo *= 2.0
    while pot.eval(spec, hi, 1) + theta < 0:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if pot.eval(spec, mid, 1) + theta > 0:
            hi = mid
        else:
            lo = mid
    x_star = 0.5 * (lo + hi)
    peak = phi(x_star)
    drop = -math.log(tail_tol)
    step = 1.0
    x_lo = x_star - step
    while phi(x_lo) - peak < drop:
        step *= 1.5
        x_lo = x_star - step
    step = 1.0
    x_hi = x_star + step
    while phi(x_hi) - peak < drop:
        step *= 1.5
        x_hi = x_star + step
    return x_star, peak, x_lo, x_hi


def build(spec, theta, tail_tol=1e-14, quad_tol=1e-10, inv_tol=1e-10):
    """Build the equilibrium measure nu_theta for ``spec``.

    log Z and the central moments come from adaptive quadrature of the
    peak-shifted integrand; psi_k (k = -1..3) follow from the cumulant
    identities psi_{-1} = log Z, psi_0 = -m1, psi_1 = mu2, psi_2 = -mu3,
    psi_3 = mu4 - 3 mu2^2.
    """
    if not theta > 0:
        raise ValueError("theta must be positive")
    for name, tol in (("tail_tol", tail_tol), ("quad_tol", quad_tol), ("inv_tol", inv_tol)):
        if not 0 < tol <= 1e-3:
            raise ValueError(f"{name} must lie in (0, 1e-3]")
    x_star, peak, x_lo, x_hi = _integrand_bounds(spec, theta, tail_tol)

    def f(x, k=0, c=0.0):
        return (x - c) ** k * math.exp(-(theta * x + pot.eval(spec, x, 0)) + peak)

    def quad(k, c=0.0):
        with warnings.catch_warnings():
            # convergence is judged from the returned error estimate below
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            val, err = integrate.quad(f, x_lo, x_hi, args=(k, c), points=[x_star],
                                      epsabs=0.0, epsrel=1e-13, limit=500)
        return val, err

    z0, err = quad(0)
    if not err <= quad_tol * z0:
        raise QuadratureError("normalisation quadrature did not converge", err / z0)
    m1 = quad(1)[0] / z0
    mu = {}
    for k in (2, 3, 4):
        val, err = quad(k, m1)
        mu[k] = val / z0
        # judge the k-th central moment in its natural unit mu2^(k/2)
        unit = max(1.0, mu[2] ** (0.5 * k)) if k > 2 else 1.0
        if not err <= max(quad_tol * z0 * unit, 1e-300):
            raise QuadratureError(f"central moment {k} quadrature did not converge", err / z0)
    log_Z = math.log(z0) - peak
    psi = {-1: log_Z, 0: -m1, 1: mu[2], 2: -mu[3], 3: mu[4] - 3.0 * mu[2] ** 2}

    # Chebyshev-clustered table with Gauss-Legendre cumulative integrals
    k = np.arange(N_TABLE)
    nodes = 0.5 * (x_lo + x_hi) - 0.5 * (x_hi - x_lo) * np.cos(np.pi * k / (N_TABLE - 1))
    nodes[0], nodes[-1] = x_lo, x_hi
    a, b = nodes[:-1], nodes[1:]
    y = 0.5 * (a + b)[:, None] + 0.5 * (b - a)[:, None] * _GL_X
    dens = np.exp(-(theta * y + pot.eval(spec, y, 0)) - log_Z)
    wts = 0.5 * (b - a)[:, None] * _GL_W
    pieces0 = (dens * wts).sum(axis=1)
    pieces1 = (dens * (y - m1) * wts).sum(axis=1)
    pieces2 = (dens * ((y - m1) ** 2 - mu[2]) * wts).sum(axis=1)
    cdf = np.concatenate([[0.0], np.cumsum(pieces0)])
    total = cdf[-1]
    if abs(total - 1.0) > 1e3 * quad_tol:
        raise QuadratureError("table mass disagrees with adaptive quadrature", abs(total - 1.0))
    cm1 = np.concatenate([[0.0], np.cumsum(pieces1)])
    cm2 = np.concatenate([[0.0], np.cumsum(pieces2)])
    return EquilibriumMeasure(spec, float(theta), log_Z, psi, x_lo, x_hi, tail_tol,
                              quad_tol, inv_tol, peak, nodes, cdf, cm1, cm2)


def inverse_cdf(m, q, max_iter=60):
    """x with |F_theta(x) - q| <= m.inv_tol; vectorised over q.

    A monotone (PCHIP) interpolant of the inverted table gives the starting
    point, then safeguarded Newton steps on the analytic density refine it,
    falling back to bisection inside the current bracket.  q outside the
    tabulated mass (probability below tail_tol) maps to the table ends.
    """
    qa = np.asarray(q, dtype=float)
    if np.any(~(qa > 0) | ~(qa < 1)):
        raise ValueError("q must lie in (0, 1)")
    flat = qa.reshape(-1)
    interp = _table_inverse(m)
    x = interp(np.clip(flat, m.cdf[0], m.cdf[-1]))
    idx = np.clip(np.searchsorted(m.cdf, flat) - 1, 0, len(m.nodes) - 2)
    lo = m.nodes[idx].copy()
    hi = m.nodes[idx + 1].copy()
    x = np.clip(x, lo, hi)
    for _ in range(max_iter):
        err = m.cdf_at(x) - flat
        lo = np.where(err < 0, x, lo)
        hi = np.where(err > 0, x, hi)
        done = np.abs(err) <= 0.25 * m.inv_tol
        if np.all(done):
            break
        dens = m.density(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = x - err / dens
        ok = (newton > lo) & (newton < hi) & np.isfinite(newton)
        x = np.where(done, x, np.where(ok, newton, 0.5 * (lo + hi)))
    out = x.reshape(qa.shape)
    return float(out) if qa.ndim == 0 else out


def _table_inverse(m):
    cache = m.__dict__.get("_inv_interp")
    if cache is None:
        cdf, keep = np.unique(m.cdf, return_index=True)
        cache = PchipInterpolator(cdf, m.nodes[keep], extrapolate=True)
        object.__setattr__(m, "_inv_interp", cache)
    return cache


def inverse_cdf_eta_derivative(m, q, order=1, x=None):
    """d/deta H_eta(q) (order 1) or d^2/deta^2 H_eta(q) (order 2) at eta = m.theta.

    With G(eta, x) = F_eta(x), implicit differentiation of G(eta, H) = q gives
    H' = -G_eta / G_x and H'' = -(G_etaeta + 2 G_etax H' + G_xx H'^2) / G_x,
    where G_eta(x) = -int_{-inf}^x (y - m1) nu and
    G_etaeta(x) = int_{-inf}^x ((y - m1)^2 - psi1) nu.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if x is None:
        x = inverse_cdf(m, q)
    x = np.asarray(x, dtype=float)
    dens = m.density(x)
    g_eta = -m._partial(x, 1)
    h1 = -g_eta / dens
    # partial-mean integral is <= 0; clip round-off of the wrong sign
    h1 = np.minimum(h1, 0.0)
    if order == 1:
        return float(h1) if h1.ndim == 0 else h1
    g_etaeta = m._partial(x, 2)
    g_etax = -(x - m.mean) * dens
    g_xx = -(m.theta + pot.eval(m.spec, x, 1)) * dens
    h2 = -(g_etaeta + 2.0 * g_etax * h1 + g_xx * h1 ** 2) / dens
    return float(h2) if h2.ndim == 0 else h2


def characteristic_time(m, N):
    """t = N psi_1(theta), the characteristic direction."""
    if not (isinstance(N, (int, np.integer)) and N >= 1):
        raise ValueError("N must be a positive integer")
    return N * m.psi[1]


def psi2_grid_check(spec, theta_grid, quad_tol=1e-10):
    """psi_2(theta) on a grid; values above quad_tol are reported, not raised."""
    out = []
    for th in theta_grid:
        m = build(spec, float(th), quad_tol=quad_tol)
        out.append((float(th), m.psi[2]))
        if m.psi[2] > quad_tol:
            warnings.warn(f"psi_2({th}) = {m.psi[2]:.3e} > 0 for {spec.describe()}")
    return out


def log_partition(spec, theta):
    """log Z(theta), closed form where one exists, quadrature otherwise.

    quadratic: theta^2/2 + log sqrt(2 pi); exponential(beta): log Gamma(theta/beta) - log beta.
    """
    if spec.variant == "quadratic":
        return 0.5 * theta * theta + 0.5 * math.log(2.0 * math.pi)
    if spec.variant == "exponential":
        beta = spec.atoms[0][0]
        return math.lgamma(theta / beta) - math.log(beta)
    return build(spec, theta).log_Z


def log_partition_difference(spec, a, b):
    """log Z(a) - log Z(b); exact cancellation of constants in the closed forms."""
    if spec.variant == "quadratic":
        return 0.5 * (a * a - b * b)
    if spec.variant == "exponential":
        beta = spec.atoms[0][0]
        return math.lgamma(a / beta) - math.lgamma(b / beta)
    return build(spec, a).log_Z - build(spec, b).log_Z
