"""Counter-based random numbers for reproducible, parallel-safe Monte Carlo.

Every Gaussian increment and every coupling uniform is a pure function of
``(seed, replica, stream, step, level)``.  The block cipher is Philox4x64-10
(Salmon et al., Random123), implemented here so it can be called inside
numba kernels; it reproduces ``numpy.random.Philox`` bit for bit.
"""
import math

import numba
import numpy as np

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_MASK32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)

# key[1] domain tags: separate families of draws never share a counter
TAG_NOISE = 0x6E6F697365
TAG_UNIFORM = 0x756E69666F
TAG_RESIDUAL = 0x7265736964

@numba.njit(inline="always")
def _mulhilo(a, b):
    a_lo = a & _MASK32
    a_hi = a >> _S32
    b_lo = b & _MASK32
    b_hi = b >> _S32
    lo_lo = a_lo * b_lo
    hi_lo = a_hi * b_lo
    lo_hi = a_lo * b_hi
    hi_hi = a_hi * b_hi
    cross = (lo_lo >> _S32) + (hi_lo & _MASK32) + lo_hi
    hi = hi_hi + (hi_lo >> _S32) + (cross >> _S32)
    return hi, a * b


@numba.njit
def philox4x64(c0, c1, c2, c3, k0, k1):
    """Ten-round Philox4x64 block: 4 x uint64 counter, 2 x uint64 key."""
    for _ in range(10):
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = k0 + _W0
        k1 = k1 + _W1
    return c0, c1, c2, c3


@numba.njit(inline="always")
def to_unit(x):
    """Map a uint64 to the open interval (0, 1) with 53-bit resolution."""
    # x >> 11 < 2**53, so the signed conversion is exact and avoids the slow uint64 path
    return (float(np.int64(x >> _S11)) + 0.5) * (1.0 / 9007199254740992.0)


@numba.njit(inline="always")
def _poly7(c0, c1, c2, c3, c4, c5, c6, c7, r):
    return (((((((c7 * r + c6) * r + c5) * r + c4) * r + c3) * r + c2) * r + c1) * r + c0)


@numba.njit
def ndtri(p):
    """Inverse standard normal CDF (Wichura, AS241 PPND16), ~1e-16 relative."""
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = _poly7(3.3871328727963666080e0, 1.3314166789178437745e+2,
                     1.9715909503065514427e+3, 1.3731693765509461125e+4,
                     4.5921953931549871457e+4, 6.7265770927008700853e+4,
                     3.3430575583588128105e+4, 2.5090809287301226727e+3, r)
        den = _poly7(1.0, 4.2313330701600911252e+1, 6.8718700749205790830e+2,
                     5.3941960214247511077e+3, 2.1213794301586595867e+4,
                     3.9307895800092710610e+4, 2.8729085735721942674e+4,
                     5.2264952788528545610e+3, r)
        return q * num / den
    r = p if q < 0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        num = _poly7(1.42343711074968357734e0, 4.63033784615654529590e0,
                     5.76949722146069140550e0, 3.64784832476320460504e0,
                     1.27045825245236838258e0, 2.41780725177450611770e-1,
                     2.27238449892691845833e-2, 7.74545014278341407640e-4, r)
        den = _poly7(1.0, 2.05319162663775882187e0, 1.67638483018380384940e0,
                     6.89767334985100004550e-1, 1.48103976427480074590e-1,
                     1.51986665636164571966e-2, 5.47593808499534494600e-4,
                     1.05075007164441684324e-9, r)
    else:
        r -= 5.0
        num = _poly7(6.65790464350110377720e0, 5.46378491116411436990e0,
                     1.78482653991729133580e0, 2.96560571828504891230e-1,
                     2.65321895265761230930e-2, 1.24266094738807843860e-3,
                     2.71155556874348757815e-5, 2.01033439929228813265e-7, r)
        den = _poly7(1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1,
                     1.48753612908506148525e-2, 7.86869131145613259100e-4,
                     1.84631831751005468180e-5, 1.42151175831644588870e-7,
                     2.04426310338993978564e-15, r)
    x = num / den
    return -x if q < 0 else x


@numba.njit
def normal4(seed, tag, c0, c1, c2, c3):
    """Four independent standard normals from one Philox block (inverse CDF)."""
    x0, x1, x2, x3 = philox4x64(np.uint64(c0), np.uint64(c1), np.uint64(c2),
                                np.uint64(c3), np.uint64(seed), np.uint64(tag))
    return ndtri(to_unit(x0)), ndtri(to_unit(x1)), ndtri(to_unit(x2)), ndtri(to_unit(x3))


@numba.njit
def unit_normal(seed, replica, stream, step, level):
    """Standard normal addressed by (replica, stream, step, refinement level)."""
    z = normal4(seed, TAG_NOISE, step, stream >> 2, replica, level)
    return z[stream & 3]


@numba.njit
def fill_step_normals(seed, replica, step, n_streams, out):
    """Level-0 normals of all streams at one step (one Philox block per 4 streams)."""
    for g in range((n_streams + 3) // 4):
        z = normal4(seed, TAG_NOISE, step, g, replica, 0)
        for lane in range(4):
            s = 4 * g + lane
            if s < n_streams:
                out[s] = z[lane]


@numba.njit
def refined_increment(seed, replica, stream, step, level, dt0):
    """Brownian increment on the grid dt0 / 2**level.

    Level 0 increments are sqrt(dt0) * N(0, 1).  Each finer level splits the
    parent increment by a Brownian bridge, so the two children always sum to
    the parent and a run at dt/2 sees the same Brownian path as a run at dt.
    """
    inc = math.sqrt(dt0) * unit_normal(seed, replica, stream, step >> level, 0)
    dtl = dt0
    for lev in range(1, level + 1):
        dtl *= 0.5
        child = step >> (level - lev)
        z = unit_normal(seed, replica, stream, child >> 1, lev)
        half = 0.5 * inc
        if child & 1:
            inc = half - math.sqrt(0.5 * dtl) * z
        else:
            inc = half + math.sqrt(0.5 * dtl) * z
    return inc


@numba.njit
def _uniform_block(seed, replicas, n, out):
    for i in range(replicas.shape[0]):
        r = replicas[i]
        for g in range((n + 3) // 4):
            x = philox4x64(np.uint64(g), np.uint64(r), np.uint64(0), np.uint64(0),
                           np.uint64(seed), np.uint64(TAG_UNIFORM))
            for lane in range(4):
                j = 4 * g + lane
                if j < n:
                    out[i, j] = to_unit(x[lane])


def coupling_uniforms(seed, replicas, n):
    """iid U(0,1) variates q_j, shape (len(replicas), n), keyed by replica id."""
    replicas = np.atleast_1d(np.asarray(replicas, dtype=np.int64))
    out = np.empty((replicas.shape[0], n))
    _uniform_block(np.uint64(seed), replicas, n, out)
    return out


def philox_block(counter, key):
    """Python entry point to one Philox4x64-10 block (used by tests)."""
    c = [np.uint64(v) for v in counter]
    k = [np.uint64(v) for v in key]
    return np.array(philox4x64(c[0], c[1], c[2], c[3], k[0], k[1]), dtype=np.uint64)
