"""Independent oracles used by the test suite.

Everything here is computed by brute force (dense quadrature, lattice
dynamic programming, exhaustive enumeration) without touching the
sampling code paths it is used to check.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from panelstate.model_core import MISSING, ModelConfig, PatientRecord


def quad_posterior_1d(v1: float, m: float, y1: int, lo=-10.0, hi=10.0, step=1e-3):
    """Moments of theta_1 given one outcome, by dense quadrature.

    Prior N(0, v1), likelihood Phi(+-(m + theta)).  Returns (mean, var).
    """
    g = np.arange(lo, hi + step / 2, step)
    w = np.exp(-g * g / (2 * v1))
    sgn = 1.0 if y1 == 1 else -1.0
    w = w * ndtr(sgn * (m + g))
    z = w.sum()
    mean = (g * w).sum() / z
    var = ((g - mean) ** 2 * w).sum() / z
    return mean, var


def quad_posterior_2d(v1: float, w2: float, m: float, y: tuple[int, int],
                      lo=-10.0, hi=10.0, step=1e-3):
    """Smoothed moments for a two-day univariate model by dense quadrature.

    Prior theta_1 ~ N(0, v1), theta_2 | theta_1 ~ N(theta_1, w2),
    probit likelihood at offset ``m`` each day.  Returns a dict with the
    smoothed moments of theta_1 and theta_2 given both outcomes.  The
    inner integral over theta_2 is a convolution with the Gaussian
    transition kernel on the uniform grid, evaluated by FFT.
    """
    from scipy.signal import fftconvolve

    g = np.arange(lo, hi + step / 2, step)
    s1 = 1.0 if y[0] == 1 else -1.0
    s2 = 1.0 if y[1] == 1 else -1.0
    a = np.exp(-g * g / (2 * v1)) * ndtr(s1 * (m + g))  # prior x lik day 1
    b = ndtr(s2 * (m + g))                               # lik day 2
    kern = np.exp(-(g - g.mean()) ** 2 / (2 * w2))       # symmetric, 'same' keeps center
    r0 = fftconvolve(b, kern, mode="same")               # r_k(t1) = int K b g^k
    r1 = fftconvolve(b * g, kern, mode="same")
    r2 = fftconvolve(b * g * g, kern, mode="same")
    z = float(a @ r0)
    m1 = float((a * g) @ r0) / z
    m1sq = float((a * g * g) @ r0) / z
    m2 = float(a @ r1) / z
    m2sq = float(a @ r2) / z
    return {"mean1": m1, "var1": m1sq - m1 * m1,
            "mean2": m2, "var2": m2sq - m2 * m2}


class LatticePosterior:
    """Lattice dynamic program over (theta_t, running sum of theta).

    For a univariate state with unit design vector, the pattern
    indicator "mean of gamma >= cut" depends on the trajectory only
    through the sum of the states, which lives exactly on the theta
    lattice.  The DP therefore yields Riemann approximations of the
    restricted integrals  integral over {pattern = l} of
    prior(theta_1..T) * lik(y | theta) dtheta  with spectrally small
    error as long as T*cut/step is not an integer.
    """

    def __init__(self, record: PatientRecord, config: ModelConfig, m: float,
                 cut: float, span: float = 10.0, step: float = 0.04):
        if config.p != 1:
            raise ValueError("lattice oracle is univariate")
        T = record.T
        if abs((T * cut / step) - round(T * cut / step)) < 1e-9:
            raise ValueError("choose a step so the sum threshold falls between lattice planes")
        K = int(round(span / step))
        self.step = step
        g = np.arange(-K, K + 1) * step
        nth = g.size
        ns = 2 * K * T + 1  # running-sum lattice indices, offset by K*T
        off = K * T

        v1 = float(config.G_star[0, 0] ** 2 * config.S0[0, 0] + config.S0[0, 0])
        w = float(config.W[0, 0])
        init = np.exp(-g * g / (2 * v1)) / np.sqrt(2 * np.pi * v1) * step

        def lik(day):
            yd = record.y[day]
            if yd == MISSING:
                return np.ones(nth)
            sgn = 1.0 if yd == 1 else -1.0
            return ndtr(sgn * (m + g))

        # day 1: state value == running sum
        M = np.zeros((nth, ns))
        l1 = lik(0)
        for i in range(nth):
            M[i, (i - K) + off] = init[i] * l1[i]

        trans = np.exp(-((g[None, :] - g[:, None]) ** 2) / (2 * w)) \
            / np.sqrt(2 * np.pi * w) * step  # trans[i, j] = P(j | i)

        for day in range(1, T):
            A = trans.T @ M  # A[j, s] = sum_i M[i, s] K(j|i)
            Mn = np.zeros_like(M)
            ld = lik(day)
            for j in range(nth):
                shift = j - K
                src = A[j]
                if shift >= 0:
                    Mn[j, shift:] = src[:ns - shift]
                else:
                    Mn[j, :shift] = src[-shift:]
                Mn[j] *= ld[j]
            M = Mn

        sums = (np.arange(ns) - off) * step
        mass = M.sum(axis=0)
        above = sums / T >= cut
        self.f = np.array([float(mass[~above].sum()), float(mass[above].sum())])

    def pattern_masses(self) -> np.ndarray:
        """Unnormalized masses f(l) of each pattern, l in {0, 1}."""
        return self.f.copy()


def two_subject_exact_marginals(f1, f2, g1, g2, M, sigma, dirichlet_a):
    """Exact marginals of (pattern_1, pattern_2, co-clustering) for the
    two-subject model, marginalizing atoms analytically.

    ``f_i`` are the restricted data integrals, ``g_i`` the plug-in prior
    pattern tables used by the chain.  Returns (p_r1, p_r2, p_co) where
    p_r1[l] = P(pattern_1 = l), etc.
    """
    a = np.asarray(dirichlet_a, dtype=float)
    A = a.sum()
    L = a.size
    p_together = (1.0 - sigma) / (M + 1.0)
    p_apart = (M + sigma) / (M + 1.0)
    lam1 = np.asarray(f1) / np.asarray(g1)
    lam2 = np.asarray(f2) / np.asarray(g2)
    joint = np.zeros((L, L, 2))  # last axis: 0 apart, 1 together
    for l1 in range(L):
        for l2 in range(L):
            pr_t = a[l1] * (a[l2] + (1.0 if l1 == l2 else 0.0)) / (A * (A + 1.0))
            pr_a = (a[l1] / A) * (a[l2] / A)
            joint[l1, l2, 1] = lam1[l1] * lam2[l2] * p_together * pr_t
            joint[l1, l2, 0] = lam1[l1] * lam2[l2] * p_apart * pr_a
    joint /= joint.sum()
    return joint.sum(axis=(1, 2)), joint.sum(axis=(0, 2)), float(joint[:, :, 1].sum())


def batch_means_se(x: np.ndarray, n_batches: int = 50) -> float:
    """Standard error of the mean of a correlated series via batch means."""
    x = np.asarray(x, dtype=float)
    n = x.size // n_batches
    if n < 1:
        return float(x.std(ddof=1) / np.sqrt(x.size))
    means = x[:n * n_batches].reshape(n_batches, n).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))
