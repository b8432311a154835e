"""Numba kernels shared by the per-trajectory API and the ensemble driver.

Both code paths call the same step helpers in the same order, so a replica
streamed through :func:`ensemble` is bit-identical to the stored
trajectory and tangents computed one path at a time.
"""
import math

import numba
import numpy as np
from numba import prange

from .potential import vderivs
from .rng import TAG_NOISE, TAG_RESIDUAL, normal4, refined_increment

TAMED_EULER = 0
SEMI_IMPLICIT = 1
EXACT_GAUSSIAN = 2
SCHEMES = {"tamed_euler": TAMED_EULER, "semi_implicit": SEMI_IMPLICIT,
           "exact_gaussian": EXACT_GAUSSIAN}

# sensitivity outputs (column index into the per-replica sens array)
S_DTHETA, S_DETA, S_THTH, S_THETA_ETA, S_ETAETA, S_MIXED, S_MIXED_DIRECT, S_XBOUND, S_HSUM = range(9)
N_SENS = 9

# violation counters
(V_H_POS, V_K_POS, V_H_GT_T, V_DTHETA_NEG, V_DETA_POS, V_THTH_NEG, V_THETA_ETA_NEG,
 V_MIXED_NEG, V_FORCED_POS, V_PSG_RANGE, V_ETAETA_LOW, V_C0_RATIO) = range(12)
N_VIOL = 12
VIOLATION_NAMES = ("h_pos", "k_pos", "minus_h_gt_t", "dW_theta_neg", "dW_eta_pos",
                   "d2W_theta_neg", "d2W_theta_eta_neg", "mixed_A_neg", "forced_h_pos",
                   "psg_out_of_range", "d2W_eta_below_bound", "c0_ratio")

STATUS_OK = 0
STATUS_EXPLODED = 1


@numba.njit(cache=True)
def step_increments(seed, replica, step, n_streams, level, dt, scale, out):
    """Brownian increments of streams 0..n_streams-1 over one step."""
    if level == 0:
        sq = math.sqrt(dt) * scale
        for g in range((n_streams + 3) // 4):
            z = normal4(seed, TAG_NOISE, step, g, replica, 0)
            for lane in range(4):
                s = 4 * g + lane
                if s < n_streams:
                    out[s] = sq * z[lane]
    else:
        dt0 = dt * 2.0 ** level
        for s in range(n_streams):
            out[s] = scale * refined_increment(seed, replica, s, step, level, dt0)


@numba.njit(cache=True)
def residual_normals(seed, replica, step, level, n, scale, out):
    for g in range((n + 3) // 4):
        z = normal4(seed, TAG_RESIDUAL, step, g, replica, level)
        for lane in range(4):
            j = 4 * g + lane
            if j < n:
                out[j] = scale * z[lane]


@numba.njit(cache=True)
def _implicit_site(s, w, params, x0, rhs, dt):
    # solve x + dt V'(x) = rhs.  For audited potentials g is increasing and
    # concave, so plain Newton from x0 converges monotonically after one step.
    x = x0
    for _ in range(60):
        d = vderivs(s, w, params, x)
        g = x + dt * d[1] - rhs
        gp = 1.0 + dt * d[2]
        if not (math.isfinite(g) and math.isfinite(gp) and gp > 0.0):
            break
        dx = g / gp
        x -= dx
        if abs(dx) <= 1e-13 * (1.0 + abs(x)):
            return x
    return _bracketed_site(s, w, params, x0, rhs, dt)


@numba.njit(cache=True)
def _bracketed_site(s, w, params, x0, rhs, dt):
    x = x0
    g = x + dt * vderivs(s, w, params, x)[1] - rhs
    if g == 0.0:
        return x
    step = 1.0
    if g > 0:
        hi = x
        lo = x - step
        while lo + dt * vderivs(s, w, params, lo)[1] - rhs > 0:
            step *= 2.0
            lo = x - step
    else:
        lo = x
        hi = x + step
        while hi + dt * vderivs(s, w, params, hi)[1] - rhs < 0:
            step *= 2.0
            hi = x + step
    x = 0.5 * (lo + hi)
    for _ in range(200):
        d = vderivs(s, w, params, x)
        g = x + dt * d[1] - rhs
        if g > 0:
            hi = x
        elif g < 0:
            lo = x
        else:
            return x
        gp = 1.0 + dt * d[2]
        xn = x - g / gp
        if not (xn > lo and xn < hi):
            xn = 0.5 * (lo + hi)
        if abs(xn - x) <= 1e-15 * (1.0 + abs(x)) or hi - lo <= 1e-15 * (1.0 + abs(x)):
            return xn
        x = xn
    return x


@numba.njit(cache=True)
def state_step(scheme, s, w, params, u, unew, vp, dB, theta, dt, Pm, phiG, cvec, Rm, zres):
    """Advance all sites by one step; dB holds increments of B_0..B_N."""
    n = u.shape[0]
    if scheme == TAMED_EULER:
        for j in range(n):
            vp[j] = vderivs(s, w, params, u[j])[1]
        for j in range(n):
            if j == 0:
                d = -vp[0] - theta
                noise = dB[0] + dB[1]
            else:
                d = vp[j - 1] - vp[j]
                noise = dB[j + 1] - dB[j]
            if math.isinf(d):
                drift = 1.0 if d > 0 else -1.0
            else:
                drift = dt * d / (1.0 + dt * abs(d))
            unew[j] = u[j] + drift + noise
    elif scheme == SEMI_IMPLICIT:
        # dt V'(unew[j-1]) = rhs_{j-1} - unew[j-1] by the implicit equation itself
        prev = 0.0
        for j in range(n):
            if j == 0:
                rhs = u[0] - theta * dt + dB[0] + dB[1]
            else:
                rhs = u[j] + prev + dB[j + 1] - dB[j]
            unew[j] = _implicit_site(s, w, params, u[j], rhs, dt)
            prev = rhs - unew[j]
    else:
        for i in range(n):
            acc = -theta * cvec[i]
            for j in range(i + 1):
                acc += Pm[i, j] * u[j]
            for j in range(n + 1):
                acc += phiG[i, j] * dB[j]
            for j in range(n):
                acc += Rm[i, j] * zres[j]
            unew[i] = acc


@numba.njit(cache=True)
def if_weights(a, dt, e, ome, al, be, ah, bh):
    """Integrating-factor weights for x' = a (y - x) with y linear over the step.

    e = exp(-z), al and be weight the left and right values of y, z = a dt;
    ah = al / z and bh = be / z weight a forcing term.
    """
    for j in range(a.shape[0]):
        z = a[j] * dt
        if z < 1e-3:
            z2 = z * z
            e[j] = math.exp(-z)
            ome[j] = -math.expm1(-z)
            ah[j] = 0.5 - z / 3.0 + z2 / 8.0 - z2 * z / 30.0 + z2 * z2 / 144.0
            bh[j] = 0.5 - z / 6.0 + z2 / 24.0 - z2 * z / 120.0 + z2 * z2 / 720.0
            al[j] = z * ah[j]
            be[j] = z * bh[j]
        else:
            ez = math.exp(-z)
            om = -math.expm1(-z)
            phi1 = om / z
            e[j] = ez
            ome[j] = om
            al[j] = max(phi1 - ez, 0.0)
            be[j] = max(1.0 - phi1, 0.0)
            ah[j] = al[j] / z
            bh[j] = be[j] / z


@numba.njit(cache=True)
def cascade_step(e, ome, be, al, x, X, DX, inc, x0_next):
    """One step of the lower-triangular tangent cascade.

    x are site values, X[j] = X[0] + x_1 + ... + x_j the cumulative form with
    X[0] the drive F.  On return DX[j] holds X_j(new) - X_j(old) and
    X[0] = x0_next.  Every update is a non-negative combination, so signs of
    x, X and DX are preserved exactly in floating point.
    """
    n = x.shape[0]
    DX[0] = inc
    prev_old = X[0]
    X[0] = x0_next
    for j in range(1, n + 1):
        xo = x[j - 1]
        x[j - 1] = e[j - 1] * xo - (1.0 - be[j - 1]) * DX[j - 1]
        DX[j] = -ome[j - 1] * xo + be[j - 1] * DX[j - 1]
        cur_old = X[j]
        X[j] = e[j - 1] * cur_old + al[j - 1] * prev_old + be[j - 1] * X[j - 1]
        prev_old = cur_old


@numba.njit(cache=True)
def second_step(e, al, be, ah, bh, nb, dt, S, x, DX, y, DY):
    """Cumulative second-order step S_j' = a_j (S_{j-1} - S_j) + (-V''') x_j y_j.

    x, y are the first-order site values at the left end of the step and
    DX, DY the cascade increments of the same step.
    """
    n = x.shape[0]
    prev_old = S[0]
    for j in range(1, n + 1):
        xj = x[j - 1]
        yj = y[j - 1]
        g = xj * yj
        gt = (xj - DX[j - 1]) * (yj - DY[j - 1])
        q = nb[j - 1] * dt * (ah[j - 1] * g + bh[j - 1] * gt)
        cur_old = S[j]
        S[j] = e[j - 1] * cur_old + al[j - 1] * prev_old + be[j - 1] * S[j - 1] + q
        prev_old = cur_old


@numba.njit(cache=True)
def mixed_step(e, ome, al, be, ah, bh, a, nb, dt, c0, A, h, D, k, DK):
    """Recursion for A_j = S^{theta eta}_j + c0 E_j K_j written with
    manifestly non-negative forcing when -V''' >= c0 V''."""
    n = h.shape[0]
    prev_old = A[0]
    for j in range(1, n + 1):
        hj = h[j - 1]
        kj = k[j - 1]
        Dm = D[j - 1]
        DKm = DK[j - 1]
        hk = hj * kj
        gt = (hj - Dm) * (kj - DKm)
        # (-V''' - c0 V'') dt times the forcing weights; >= 0 on OY-type paths
        slack = (nb[j - 1] - c0 * a[j - 1]) * dt
        excess = slack * (ah[j - 1] * hk + bh[j - 1] * gt)
        conv = (ome[j - 1] * al[j - 1] * hk
                + ome[j - 1] * be[j - 1] * (hk - hj * DKm - kj * Dm)
                + be[j - 1] * be[j - 1] * Dm * DKm)
        cur_old = A[j]
        A[j] = (e[j - 1] * cur_old + al[j - 1] * prev_old + be[j - 1] * A[j - 1]
                + excess + c0 * conv)
        prev_old = cur_old


@numba.njit(cache=True)
def site_coeffs(s, w, params, u, a, nb):
    for j in range(u.shape[0]):
        d = vderivs(s, w, params, u[j])
        a[j] = d[2]
        nb[j] = -d[3]


@numba.njit(cache=True)
def theta_at(m, theta1, theta2, switch_idx):
    return theta1 if m < switch_idx else theta2


@numba.njit(cache=True)
def drift_integral(t, theta1, theta2, ts):
    return theta2 * t + (theta1 - theta2) * min(t, ts)


@numba.njit(cache=True)
def _replica(r, s, w, params, scheme, dt, n_steps, theta1, theta2, switch_idx,
             u0, k0, kk0, seed, rid, level, scale, Pm, phiG, cvec, Rm,
             want_tangent, want_second, c0, f_rates, imp_idx, imp_w, bound, tol_hi,
             out_W, out_parts, out_sens, out_psg, out_viol, out_status, u_final):
    n = u0.shape[1]
    nq = f_rates.shape[0]
    u = u0[r].copy()
    unew = np.empty(n)
    vp = np.empty(n)
    dB = np.empty(n + 1)
    zres = np.zeros(n)
    a = np.empty(n)
    nb = np.empty(n)
    e = np.empty(n)
    ome = np.empty(n)
    al = np.empty(n)
    be = np.empty(n)
    ah = np.empty(n)
    bh = np.empty(n)
    h = np.zeros(n)
    E = np.zeros(n + 1)
    D = np.zeros(n + 1)
    k = k0[r].copy()
    K = np.zeros(n + 1)
    DK = np.zeros(n + 1)
    Stt = np.zeros(n + 1)
    Ste = np.zeros(n + 1)
    See = np.zeros(n + 1)
    A = np.zeros(n + 1)
    h_old = np.empty(n)
    k_old = np.empty(n)
    xbound = 0.0
    for j in range(n):
        K[j + 1] = K[j] + k[j]
        See[j + 1] = See[j] + kk0[r, j]
        xbound += abs(kk0[r, j])
    hf = np.zeros((nq, n))
    Ef = np.zeros((nq, n + 1))
    Df = np.zeros(n + 1)
    Fc = np.zeros(nq)
    supF = np.zeros(nq)
    for q in range(nq):
        tot = 0.0
        for m in range(n_steps):
            tot += f_rates[q, m] * dt
        supF[q] = tot + imp_w[q]
    viol = out_viol[r]
    B0 = 0.0
    status = STATUS_OK
    steps_done = 0
    for m in range(n_steps):
        t_new = (m + 1) * dt
        if want_tangent:
            for q in range(nq):
                if imp_idx[q] == m:
                    hf[q, 0] -= imp_w[q]
                    Ef[q, 0] += imp_w[q]
            site_coeffs(s, w, params, u, a, nb)
            if_weights(a, dt, e, ome, al, be, ah, bh)
            for j in range(n):
                if nb[j] < c0 * a[j]:
                    viol[V_C0_RATIO] += 1
            h_old[:] = h
            k_old[:] = k
            cascade_step(e, ome, be, al, h, E, D, dt, t_new)
            cascade_step(e, ome, be, al, k, K, DK, 0.0, 0.0)
            if want_second:
                second_step(e, al, be, ah, bh, nb, dt, Stt, h_old, D, h_old, D)
                second_step(e, al, be, ah, bh, nb, dt, Ste, h_old, D, k_old, DK)
                second_step(e, al, be, ah, bh, nb, dt, See, k_old, DK, k_old, DK)
                mixed_step(e, ome, al, be, ah, bh, a, nb, dt, c0, A, h_old, D, k_old, DK)
            for q in range(nq):
                fnext = Fc[q] + f_rates[q, m] * dt
                cascade_step(e, ome, be, al, hf[q], Ef[q], Df, f_rates[q, m] * dt,
                             fnext + (imp_w[q] if imp_idx[q] <= m else 0.0))
                Fc[q] = fnext
            # invariants at t_{m+1}
            for j in range(n):
                if h[j] > 0.0:
                    viol[V_H_POS] += 1
                if k[j] > 0.0:
                    viol[V_K_POS] += 1
                if -h[j] > t_new * (1.0 + tol_hi):
                    viol[V_H_GT_T] += 1
                for q in range(nq):
                    if hf[q, j] > 0.0:
                        viol[V_FORCED_POS] += 1
            if E[n] < 0.0:
                viol[V_DTHETA_NEG] += 1
            if K[n] > 0.0:
                viol[V_DETA_POS] += 1
            if want_second:
                if Stt[n] < 0.0:
                    viol[V_THTH_NEG] += 1
                if Ste[n] < 0.0:
                    viol[V_THETA_ETA_NEG] += 1
                if A[n] < 0.0:
                    viol[V_MIXED_NEG] += 1
                if See[n] < -xbound - tol_hi * (1.0 + xbound):
                    viol[V_ETAETA_LOW] += 1
            for q in range(nq):
                if Ef[q, n] < 0.0 or Ef[q, n] > supF[q] * (1.0 + tol_hi):
                    viol[V_PSG_RANGE] += 1
        theta = theta_at(m, theta1, theta2, switch_idx)
        step_increments(seed, rid, m, n + 1, level, dt, scale, dB)
        if scheme == EXACT_GAUSSIAN:
            residual_normals(seed, rid, m, level, n, scale, zres)
        state_step(scheme, s, w, params, u, unew, vp, dB, theta, dt, Pm, phiG, cvec, Rm, zres)
        bad = False
        for j in range(n):
            if not (abs(unew[j]) <= bound):
                bad = True
        if bad:
            status = STATUS_EXPLODED
            break
        u[:] = unew
        B0 += dB[0]
        steps_done = m + 1
    if want_tangent and status == STATUS_OK:
        for q in range(nq):
            if imp_idx[q] == n_steps:
                hf[q, 0] -= imp_w[q]
                Ef[q, 0] += imp_w[q]
    t = steps_done * dt
    su = 0.0
    for j in range(n):
        su += u[j]
    drift = drift_integral(t, theta1, theta2, switch_idx * dt)
    out_W[r] = su - B0 + drift
    out_parts[r, 0] = su
    out_parts[r, 1] = B0
    out_parts[r, 2] = drift
    out_status[r] = status
    u_final[r] = u
    if want_tangent:
        hs = 0.0
        for j in range(n):
            hs += h[j]
        out_sens[r, S_DTHETA] = E[n]
        out_sens[r, S_DETA] = K[n]
        out_sens[r, S_THTH] = Stt[n]
        out_sens[r, S_THETA_ETA] = Ste[n]
        out_sens[r, S_ETAETA] = See[n]
        out_sens[r, S_MIXED] = A[n]
        out_sens[r, S_MIXED_DIRECT] = Ste[n] + c0 * E[n] * K[n]
        out_sens[r, S_XBOUND] = xbound
        out_sens[r, S_HSUM] = hs + t
        for q in range(nq):
            out_psg[r, q] = Ef[q, n]


@numba.njit(parallel=True, cache=True)
def ensemble(s, w, params, scheme, dt, n_steps, theta1, theta2, switch_idx,
             u0, k0, kk0, seed, replica_ids, level, scale, Pm, phiG, cvec, Rm,
             want_tangent, want_second, c0, f_rates, imp_idx, imp_w, bound, tol_hi,
             out_W, out_parts, out_sens, out_psg, out_viol, out_status, u_final):
    """Stream replicas through state and tangent steps without storing paths."""
    for r in prange(u0.shape[0]):
        _replica(r, s, w, params, scheme, dt, n_steps, theta1, theta2, switch_idx,
                 u0, k0, kk0, seed, replica_ids[r], level, scale, Pm, phiG, cvec, Rm,
                 want_tangent, want_second, c0, f_rates, imp_idx, imp_w, bound, tol_hi,
                 out_W, out_parts, out_sens, out_psg, out_viol, out_status, u_final)


@numba.njit(cache=True)
def simulate_path(s, w, params, scheme, dt, n_steps, theta1, theta2, switch_idx, u0,
                  seed, rid, level, scale, Pm, phiG, cvec, Rm, bound, U, B0, dBs):
    """Store the whole path; returns the number of completed steps."""
    n = u0.shape[0]
    u = u0.copy()
    unew = np.empty(n)
    vp = np.empty(n)
    dB = np.empty(n + 1)
    zres = np.zeros(n)
    U[0] = u
    B0[0] = 0.0
    acc = 0.0
    for m in range(n_steps):
        theta = theta_at(m, theta1, theta2, switch_idx)
        step_increments(seed, rid, m, n + 1, level, dt, scale, dB)
        if scheme == EXACT_GAUSSIAN:
            residual_normals(seed, rid, m, level, n, scale, zres)
        state_step(scheme, s, w, params, u, unew, vp, dB, theta, dt, Pm, phiG, cvec, Rm, zres)
        for j in range(n):
            if not (abs(unew[j]) <= bound):
                return m
        u[:] = unew
        acc += dB[0]
        U[m + 1] = u
        B0[m + 1] = acc
        dBs[m] = dB
    return n_steps


@numba.njit(cache=True)
def first_order_path(s, w, params, dt, U, k0, H, Eo, Kk, Ko):
    """h, k site arrays and their cumulative sums along a stored path."""
    n_steps = U.shape[0] - 1
    n = U.shape[1]
    a = np.empty(n)
    nb = np.empty(n)
    e = np.empty(n)
    ome = np.empty(n)
    al = np.empty(n)
    be = np.empty(n)
    ah = np.empty(n)
    bh = np.empty(n)
    h = np.zeros(n)
    E = np.zeros(n + 1)
    D = np.zeros(n + 1)
    k = k0.copy()
    K = np.zeros(n + 1)
    DK = np.zeros(n + 1)
    for j in range(n):
        K[j + 1] = K[j] + k[j]
    H[0] = h
    Eo[0] = E
    Kk[0] = k
    Ko[0] = K
    for m in range(n_steps):
        site_coeffs(s, w, params, U[m], a, nb)
        if_weights(a, dt, e, ome, al, be, ah, bh)
        cascade_step(e, ome, be, al, h, E, D, dt, (m + 1) * dt)
        cascade_step(e, ome, be, al, k, K, DK, 0.0, 0.0)
        H[m + 1] = h
        Eo[m + 1] = E
        Kk[m + 1] = k
        Ko[m + 1] = K


@numba.njit(cache=True)
def second_order_path(s, w, params, dt, c0, U, H, Kk, kk0, Stt, Ste, See, Am):
    """Cumulative second-order families and the mixed monitor along a path.

    First-order cascades are re-run in lockstep so that D and DK are the
    exact increments used by the first-order arrays.
    """
    n_steps = U.shape[0] - 1
    n = U.shape[1]
    a = np.empty(n)
    nb = np.empty(n)
    e = np.empty(n)
    ome = np.empty(n)
    al = np.empty(n)
    be = np.empty(n)
    ah = np.empty(n)
    bh = np.empty(n)
    h = H[0].copy()
    E = np.zeros(n + 1)
    D = np.zeros(n + 1)
    k = Kk[0].copy()
    K = np.zeros(n + 1)
    DK = np.zeros(n + 1)
    for j in range(n):
        K[j + 1] = K[j] + k[j]
    S1 = np.zeros(n + 1)
    S2 = np.zeros(n + 1)
    S3 = np.zeros(n + 1)
    A = np.zeros(n + 1)
    for j in range(n):
        S3[j + 1] = S3[j] + kk0[j]
    h_old = np.empty(n)
    k_old = np.empty(n)
    Stt[0] = S1
    Ste[0] = S2
    See[0] = S3
    Am[0] = A
    for m in range(n_steps):
        site_coeffs(s, w, params, U[m], a, nb)
        if_weights(a, dt, e, ome, al, be, ah, bh)
        h_old[:] = h
        k_old[:] = k
        cascade_step(e, ome, be, al, h, E, D, dt, (m + 1) * dt)
        cascade_step(e, ome, be, al, k, K, DK, 0.0, 0.0)
        second_step(e, al, be, ah, bh, nb, dt, S1, h_old, D, h_old, D)
        second_step(e, al, be, ah, bh, nb, dt, S2, h_old, D, k_old, DK)
        second_step(e, al, be, ah, bh, nb, dt, S3, k_old, DK, k_old, DK)
        mixed_step(e, ome, al, be, ah, bh, a, nb, dt, c0, A, h_old, D, k_old, DK)
        Stt[m + 1] = S1
        Ste[m + 1] = S2
        See[m + 1] = S3
        Am[m + 1] = A


@numba.njit(cache=True)
def forced_path(s, w, params, dt, U, f_rates, imp_idx, imp_w, Hf, Ef_out):
    """Forced tangent for one piecewise-constant forcing with optional impulse."""
    n_steps = U.shape[0] - 1
    n = U.shape[1]
    a = np.empty(n)
    nb = np.empty(n)
    e = np.empty(n)
    ome = np.empty(n)
    al = np.empty(n)
    be = np.empty(n)
    ah = np.empty(n)
    bh = np.empty(n)
    hf = np.zeros(n)
    Ef = np.zeros(n + 1)
    Df = np.zeros(n + 1)
    Fc = 0.0
    for m in range(n_steps):
        if imp_idx == m:
            hf[0] -= imp_w
            Ef[0] += imp_w
        if m == 0:
            Hf[0] = hf
            Ef_out[0] = Ef
        site_coeffs(s, w, params, U[m], a, nb)
        if_weights(a, dt, e, ome, al, be, ah, bh)
        fnext = Fc + f_rates[m] * dt
        cascade_step(e, ome, be, al, hf, Ef, Df, f_rates[m] * dt,
                     fnext + (imp_w if imp_idx <= m else 0.0))
        Fc = fnext
        Hf[m + 1] = hf
        Ef_out[m + 1] = Ef
    if imp_idx == n_steps:
        hf[0] -= imp_w
        Ef[0] += imp_w
        Hf[n_steps] = hf
        Ef_out[n_steps] = Ef
    if n_steps == 0 and imp_idx != 0:
        Hf[0] = hf
        Ef_out[0] = Ef
