"""Numba kernels for the particle-filter inner loops.

All randomness is pre-generated by the caller (numpy Generators), so
the kernels are pure deterministic functions of their inputs; that is
what makes chains bit-reproducible regardless of threading.  Day-level
quantities that do not depend on the particles (Kalman covariances,
their Cholesky factors, gain vectors) are precomputed in Python and
passed in as per-day arrays.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True, fastmath=True)

_SQRT2 = math.sqrt(2.0)
_TINY = 1e-300


@njit(**_JIT)
def ndtri(p):
    """Inverse standard normal CDF (Wichura's AS 241, double precision)."""
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                    + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
                  + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
                + 1.3314166789178437745e2) * r + 3.3871328727963666080e0)
        den = (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
                    + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
                  + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
                + 4.2313330701600911252e1) * r + 1.0)
        return q * num / den
    if q < 0.0:
        r = p
    else:
        r = 1.0 - p
    if r <= 0.0:
        return -np.inf if q < 0.0 else np.inf
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r = r - 1.6
        num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
                  + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
                + 4.63033784615654529590e0) * r + 1.42343711074968357734e0)
        den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                    + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                  + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
                + 2.05319162663775882187e0) * r + 1.0)
    else:
        r = r - 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
                + 5.46378491116411436990e0) * r + 6.65790464350110377720e0)
        den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                    + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                  + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
                + 5.99832206555887937690e-1) * r + 1.0)
    val = num / den
    return -val if q < 0.0 else val


@njit(**_JIT)
def _systematic_inplace(w, wsum, u, idx):
    """Systematic resampling indices for weights w summing to wsum."""
    R = w.shape[0]
    step = wsum / R
    j = 0
    cum = w[0]
    for k in range(R):
        target = (k + u) * step
        while target > cum and j < R - 1:
            j += 1
            cum += w[j]
        idx[k] = j


@njit(**_JIT)
def joint_trajectory_kernel(y, G_all, Wchol_all, z, S, PzS, Ptt_chol,
                            m0, S0_chol, m_i, apply_G_on_missing,
                            normals, u_tn, u_sys, u_pick,
                            part, anc, out_traj, out_mean, want_mean):
    """Joint posterior trajectory sampler (whole-path resampling).

    Particles are point trajectories; on observed days the predictive
    means are reweighted by the probit one-step-ahead likelihood and the
    whole paths are resampled through an ancestry table, then each
    particle's state is refreshed from its truncated-normal augmented
    conditional.  Missing days propagate through the state equation
    without resampling.  Returns (status, n_low_ess) with status 1 when
    every weight underflows to zero.
    """
    T = y.shape[0]
    R = part.shape[1]
    p = part.shape[2]
    a = np.empty((R, p))
    r = np.empty(R)
    w = np.empty(R)
    idx = np.empty(R, dtype=np.int32)
    n_low_ess = 0

    for k in range(R):
        for j in range(p):
            acc = m0[j]
            for l in range(p):
                acc += S0_chol[j, l] * normals[0, k, l]
            part[0, k, j] = acc

    for d in range(T):
        if y[d] < 0:
            # no outcome: pure propagation, ancestry is the identity
            for k in range(R):
                for j in range(p):
                    if apply_G_on_missing:
                        acc = 0.0
                        for l in range(p):
                            acc += G_all[d, j, l] * part[d, k, l]
                    else:
                        acc = part[d, k, j]
                    for l in range(p):
                        acc += Wchol_all[d, j, l] * normals[d + 1, k, l]
                    part[d + 1, k, j] = acc
                anc[d, k] = k
            continue

        sqrtS = math.sqrt(S[d])
        sgn = -1.0 if y[d] == 1 else 1.0
        wsum = 0.0
        wsq = 0.0
        for k in range(R):
            rk = m_i
            for j in range(p):
                acc = 0.0
                for l in range(p):
                    acc += G_all[d, j, l] * part[d, k, l]
                a[k, j] = acc
                rk += z[d, j] * acc
            r[k] = rk
            wk = 0.5 * math.erfc(sgn * rk / (sqrtS * _SQRT2))
            w[k] = wk
            wsum += wk
            wsq += wk * wk
        if wsum <= 0.0:
            return 1, n_low_ess
        if wsum * wsum < 0.1 * R * wsq:
            n_low_ess += 1

        _systematic_inplace(w, wsum, u_sys[d], idx)

        for k in range(R):
            kk = idx[k]
            anc[d, k] = kk
            tail = w[kk]
            t_u = u_tn[d, k] * tail
            if t_u < _TINY:
                t_u = _TINY
            q = ndtri(t_u)
            zstd = -q if y[d] == 1 else q
            c = sqrtS * zstd  # = zeta - r[kk]
            for j in range(p):
                acc = a[kk, j] + PzS[d, j] * c
                for l in range(p):
                    acc += Ptt_chol[d, j, l] * normals[d + 1, k, l]
                part[d + 1, k, j] = acc

    pick = int(u_pick * R)
    if pick >= R:
        pick = R - 1
    cur = pick
    for d in range(T - 1, -1, -1):
        for j in range(p):
            out_traj[d, j] = part[d + 1, cur, j]
        cur = anc[d, cur]

    if want_mean:
        lineage = np.empty(R, dtype=np.int32)
        for k in range(R):
            lineage[k] = k
        for d in range(T - 1, -1, -1):
            for j in range(p):
                acc = 0.0
                for k in range(R):
                    acc += part[d + 1, lineage[k], j]
                out_mean[d, j] = acc / R
            for k in range(R):
                lineage[k] = anc[d, lineage[k]]
    return 0, n_low_ess


@njit(**_JIT)
def marginal_filter_kernel(y, G_all, z, S, PzS, Ptt_chol, m0, m_i,
                           normals, u_tn, u_sys, out_samples):
    """One-step lookahead filter producing marginal samples per day.

    Particles carry filtered means with a shared covariance recursion
    (precomputed per day); resampling acts on the means only.  Requires
    complete data.  ``out_samples`` is (T, R, p).
    """
    T = y.shape[0]
    R = out_samples.shape[1]
    p = out_samples.shape[2]
    a_prev = np.empty((R, p))
    a = np.empty((R, p))
    r = np.empty(R)
    w = np.empty(R)
    idx = np.empty(R, dtype=np.int32)
    n_low_ess = 0

    for k in range(R):
        for j in range(p):
            a_prev[k, j] = m0[j]

    for d in range(T):
        sqrtS = math.sqrt(S[d])
        sgn = -1.0 if y[d] == 1 else 1.0
        wsum = 0.0
        wsq = 0.0
        for k in range(R):
            rk = m_i
            for j in range(p):
                acc = 0.0
                for l in range(p):
                    acc += G_all[d, j, l] * a_prev[k, l]
                a[k, j] = acc
                rk += z[d, j] * acc
            r[k] = rk
            wk = 0.5 * math.erfc(sgn * rk / (sqrtS * _SQRT2))
            w[k] = wk
            wsum += wk
            wsq += wk * wk
        if wsum <= 0.0:
            return 1, n_low_ess
        if wsum * wsum < 0.1 * R * wsq:
            n_low_ess += 1

        _systematic_inplace(w, wsum, u_sys[d], idx)

        for k in range(R):
            kk = idx[k]
            tail = w[kk]
            t_u = u_tn[d, k] * tail
            if t_u < _TINY:
                t_u = _TINY
            q = ndtri(t_u)
            zstd = -q if y[d] == 1 else q
            c = sqrtS * zstd
            for j in range(p):
                m_f = a[kk, j] + PzS[d, j] * c
                acc = m_f
                for l in range(p):
                    acc += Ptt_chol[d, j, l] * normals[d + 1, k, l]
                out_samples[d, k, j] = acc
                a_prev[k, j] = m_f
    return 0, n_low_ess
