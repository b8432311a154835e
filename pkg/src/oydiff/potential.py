"""Convex potentials of O'Connell-Yor type and a grid audit of their constants.

Every potential is stored in one closed form

    V(x) = q * x**2 / 2 + sum_i w_i exp(-s_i x) + eps * bump((x - c) / width)

so the exponential, Laplace-transform, quadratic and perturbed families share
one exact derivative routine, usable from numpy and from numba kernels.
"""
from dataclasses import dataclass, field
import math

import numba
import numpy as np

LOG_OVERFLOW = 700.0


class PotentialError(ValueError):
    pass


@dataclass(frozen=True)
class Bump:
    """Compactly supported smooth bump exp(-1/(1-r^2)), r = (x-center)/width."""
    center: float = 0.0
    width: float = 1.0

    def __post_init__(self):
        if not self.width > 0:
            raise PotentialError("bump width must be positive")


@dataclass(frozen=True)
class PotentialSpec:
    """Immutable potential descriptor.

    Build instances with :func:`exponential`, :func:`laplace_measure`,
    :func:`quadratic` or :func:`perturbed` rather than directly.
    """
    variant: str
    atoms: tuple = ()
    quad: float = 0.0
    eps: float = 0.0
    bump: Bump = field(default_factory=Bump)
    base: "PotentialSpec | None" = None

    @property
    def s(self):
        return np.array([a[0] for a in self.atoms], dtype=float)

    @property
    def w(self):
        return np.array([a[1] for a in self.atoms], dtype=float)

    def packed(self):
        """Flat float arrays consumed by the numba kernels."""
        params = np.array([self.quad, self.eps, self.bump.center, self.bump.width])
        return self.s, self.w, params

    def describe(self):
        d = {"variant": self.variant}
        if self.variant == "exponential":
            d["beta"] = self.atoms[0][0]
        elif self.variant == "laplace_measure":
            d["atoms"] = [list(a) for a in self.atoms]
        elif self.variant == "perturbed":
            d["base"] = self.base.describe()
            d["eps"] = self.eps
            d["bump"] = {"center": self.bump.center, "width": self.bump.width}
        return d


def exponential(beta=1.0):
    if not (beta > 0 and math.isfinite(beta)):
        raise PotentialError("exponential potential needs beta > 0")
    return PotentialSpec("exponential", atoms=((float(beta), 1.0),))


def laplace_measure(atoms):
    atoms = tuple((float(s), float(w)) for s, w in atoms)
    if not atoms:
        raise PotentialError("laplace_measure needs at least one atom")
    for s, w in atoms:
        if not (s > 0 and w > 0):
            raise PotentialError(f"atom ({s}, {w}) must have s > 0 and w > 0")
    return PotentialSpec("laplace_measure", atoms=atoms)


def quadratic():
    return PotentialSpec("quadratic", quad=1.0)


def perturbed(base, eps, center=0.0, width=1.0):
    if base.variant == "perturbed":
        raise PotentialError("nested perturbations are not supported")
    return PotentialSpec("perturbed", atoms=base.atoms, quad=base.quad, eps=float(eps),
                         bump=Bump(float(center), float(width)), base=base)


def from_dict(d):
    """Build a spec from a config table such as {'variant': 'exponential', 'beta': 1}."""
    variant = d.get("variant")
    if variant == "exponential":
        return exponential(float(d.get("beta", 1.0)))
    if variant == "laplace_measure":
        return laplace_measure(d["atoms"])
    if variant == "quadratic":
        return quadratic()
    if variant == "perturbed":
        bump = d.get("bump", {})
        return perturbed(from_dict(d["base"]), float(d["eps"]),
                         float(bump.get("center", 0.0)), float(bump.get("width", 1.0)))
    raise PotentialError(f"unknown potential variant {variant!r}")


@numba.njit
def _bump_derivs(r):
    # derivatives of exp(-1/(1-r^2)) in r, orders 0..3
    if abs(r) >= 1.0:
        return 0.0, 0.0, 0.0, 0.0
    d = 1.0 - r * r
    phi = math.exp(-1.0 / d)
    g1 = -2.0 * r / (d * d)
    g2 = -2.0 / (d * d) - 8.0 * r * r / (d * d * d)
    g3 = -24.0 * r / (d * d * d) - 48.0 * r ** 3 / (d ** 4)
    return phi, g1 * phi, (g2 + g1 * g1) * phi, (g3 + 3.0 * g1 * g2 + g1 ** 3) * phi


@numba.njit
def vderivs(s, w, params, x):
    """(V, V', V'', V''') at x; +inf/-inf on exponential overflow."""
    quad = params[0]
    v0 = 0.5 * quad * x * x
    v1 = quad * x
    v2 = quad
    v3 = 0.0
    for i in range(s.shape[0]):
        si = s[i]
        arg = -si * x
        if arg > LOG_OVERFLOW:
            return math.inf, -math.inf, math.inf, -math.inf
        e = w[i] * math.exp(arg)
        v0 += e
        v1 -= si * e
        v2 += si * si * e
        v3 -= si * si * si * e
    eps = params[1]
    if eps != 0.0:
        width = params[3]
        b0, b1, b2, b3 = _bump_derivs((x - params[2]) / width)
        v0 += eps * b0
        v1 += eps * b1 / width
        v2 += eps * b2 / width ** 2
        v3 += eps * b3 / width ** 3
    return v0, v1, v2, v3


@numba.njit
def _eval_array(s, w, params, xs, order, out):
    for i in range(xs.shape[0]):
        out[i] = vderivs(s, w, params, xs[i])[order]


def eval(spec, x, order=0):
    """Exact V^(order)(x) for order in 0..3; accepts scalars or arrays.

    Values whose exponent exceeds ``LOG_OVERFLOW`` come back as signed
    infinities; use :func:`log_abs_eval` in that regime.
    """
    if order not in (0, 1, 2, 3):
        raise PotentialError(f"order must be 0..3, got {order!r}")
    xa = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(xa)):
        raise PotentialError("x must be finite")
    s, w, params = spec.packed()
    flat = np.ascontiguousarray(xa.reshape(-1))
    out = np.empty_like(flat)
    _eval_array(s, w, params, flat, order, out)
    if xa.ndim == 0:
        return float(out[0])
    return out.reshape(xa.shape)


def log_abs_eval(spec, x, order=0):
    """log|V^(order)(x)| for the exponential part, valid far past overflow.

    Only defined for pure exponential / laplace_measure potentials, where
    V^(k)(x) = sum_i w_i (-s_i)^k exp(-s_i x) has a single sign (-1)^k.
    """
    if spec.variant not in ("exponential", "laplace_measure"):
        raise PotentialError("log-space channel only exists for exponential-type variants")
    xa = np.asarray(x, dtype=float)
    s, w = spec.s, spec.w
    terms = np.log(w)[:, None] + order * np.log(s)[:, None] - np.outer(s, xa.reshape(-1))
    m = terms.max(axis=0)
    out = m + np.log(np.exp(terms - m).sum(axis=0))
    return float(out[0]) if xa.ndim == 0 else out.reshape(xa.shape)


@dataclass(frozen=True)
class OyTypeAudit:
    grid: np.ndarray
    c_lower: float
    c_upper: float
    C_ind: float
    c_growth: float
    growth_ok: bool
    passed: bool
    reason: str = ""

    @property
    def c0(self):
        """Constant for the lower derivative inequality c0 V'' <= -V'''."""
        return self.c_lower


def audit_oy_type(spec, x_min=-30.0, x_max=30.0, n_grid=4096):
    """Certify the O'Connell-Yor-type constants of ``spec`` on a finite grid.

    Reports the largest ``c_lower`` with c_lower V'' <= -V''', the far-field
    slope ``c_upper`` (max of -V'''/V'' over x <= 0) with the smallest
    ``C_ind`` such that -V''' <= c_upper V'' + C_ind 1{x >= -C_ind}, and a
    quadratic growth constant on x <= -C.  Grid certification only: nothing
    is claimed between or beyond grid points.
    """
    if not x_min < x_max:
        raise PotentialError("need x_min < x_max")
    if n_grid < 16:
        raise PotentialError("need n_grid >= 16")
    x = np.linspace(x_min, x_max, n_grid)
    # stay inside the binary64 range of exp
    if spec.atoms:
        smax = max(a[0] for a in spec.atoms)
        x = x[-smax * x < LOG_OVERFLOW]
    v0, v1, v2, v3 = (eval(spec, x, k) for k in range(4))
    fail = []
    if np.any(v0 < 0):
        fail.append("V < 0")
    if np.any(v1 > 0):
        fail.append("V' > 0")
    if np.any(v2 < 0):
        fail.append("V'' < 0 (not convex)")
    pos = v2 > 0
    if not np.any(pos):
        return OyTypeAudit(x, 0.0, 0.0, 0.0, 0.0, False, False,
                           "V'' vanishes on the grid")
    ratio = np.where(pos, -v3 / np.where(pos, v2, 1.0), np.inf)
    c_lower = float(ratio[pos].min())
    if not np.all(pos) and np.any(v3[~pos] > 0):
        c_lower = 0.0
    if c_lower <= 0:
        if spec.variant == "quadratic" or np.all(v3 == 0):
            fail.append("V'''≡0 violates c₀V'' ≤ −V'''")
        else:
            fail.append("no c0 > 0 with c0 V'' <= -V''' on the grid")
    left = (x <= 0) & pos
    c_upper = float(ratio[left].max()) if np.any(left) else float(ratio[pos].max())
    excess = -v3 - c_upper * v2
    bad = excess > 1e-12 * np.maximum(1.0, np.abs(v3))
    C_ind = 0.0
    if np.any(bad):
        C_ind = max(float(excess[bad].max()), float(-x[bad].min()), 0.0)
    tail = x <= -C_ind
    if np.any(tail & (x < 0)):
        xt = x[tail & (x < 0)]
        c_growth = float((v0[tail & (x < 0)] / xt ** 2).min())
    else:
        c_growth = 0.0
    growth_ok = c_growth > 0
    if not growth_ok:
        fail.append("no quadratic lower growth on x <= -C")
    return OyTypeAudit(x, c_lower, c_upper, C_ind, c_growth, growth_ok,
                       not fail, "; ".join(fail))
