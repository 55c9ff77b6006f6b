"""Deterministic-seeded random primitives.

Everything here is built on numpy's PCG64 generator with explicit
substream keys, so that any draw is a pure function of
(seed, stream key, draw index) and never of thread scheduling.  The
samplers (truncated normal, Dirichlet with tiny shapes, systematic
resampling) are the numerically delicate pieces shared by the particle
filter and the Gibbs updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

__all__ = [
    "RngStream",
    "TruncRegion",
    "sample_trunc_normal",
    "sample_dirichlet",
    "systematic_resample",
]

# Smallest argument fed to ndtri; keeps tail draws finite (~ -37.5 sd).
_TINY = 1e-300


@dataclass(frozen=True)
class RngStream:
    """Root of a reproducible family of random substreams.

    ``substream(*key)`` hashes ``(seed, *key)`` through numpy's
    SeedSequence, so streams keyed by e.g. (chain, sweep, subject) are
    statistically independent and identical across runs and worker
    schedules.  Each returned Generator is owned by a single consumer.
    """

    seed: int

    def substream(self, *key: int) -> np.random.Generator:
        entropy = (int(self.seed),) + tuple(int(k) for k in key)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class TruncRegion:
    """Truncation interval; +-inf allowed on either side."""

    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"empty truncation region [{self.lower}, {self.upper}]")


# Regions implied by a binary outcome: the latent score is positive iff y = 1.
REGION_POSITIVE = TruncRegion(0.0, math.inf)
REGION_NEGATIVE = TruncRegion(-math.inf, 0.0)


def trunc_normal_transform(u, mean, sd, lower, upper):
    """Map uniforms ``u`` to truncated-normal draws by inverse CDF.

    Works in the tail whose CDF values are representable: one-sided
    regions at +-6 sd and far beyond come out exact, because the
    quantile is always evaluated at a *small* probability (never at
    1 - eps).  Vectorized over ``u``/``mean``.
    """
    u = np.asarray(u, dtype=float)
    mean = np.asarray(mean, dtype=float)
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    a_s = np.broadcast_to(np.asarray(a, dtype=float), u.shape)
    b_s = np.broadcast_to(np.asarray(b, dtype=float), u.shape)
    out = np.empty(u.shape, dtype=float)

    right = a_s >= 0  # mass in the right tail: work with upper CDF
    left = b_s <= 0  # mass in the left tail
    mid = ~(right | left)

    if np.any(right):
        ta = ndtr(-a_s[right])
        tb = ndtr(-b_s[right]) if np.isfinite(upper) else 0.0
        t = ta - u[right] * (ta - tb)
        out[right] = -ndtri(np.maximum(t, _TINY))
    if np.any(left):
        ta = ndtr(a_s[left]) if np.isfinite(lower) else 0.0
        tb = ndtr(b_s[left])
        t = tb - u[left] * (tb - ta)
        out[left] = ndtri(np.maximum(t, _TINY))
    if np.any(mid):
        pa = ndtr(a_s[mid])
        pb = ndtr(b_s[mid])
        out[mid] = ndtri(pa + u[mid] * (pb - pa))
    return mean + sd * out


def sample_trunc_normal(mean, var, region: TruncRegion, rng: np.random.Generator, size=None):
    """Draw from N(mean, var) conditioned to ``region``.

    Scalar or vectorized (``mean`` may be an array; ``size`` draws for
    scalar mean).  Stable deep into the tails.
    """
    if np.any(np.asarray(var) <= 0):
        raise ValueError("variance must be positive")
    mean = np.asarray(mean, dtype=float)
    shape = mean.shape if size is None else (size,)
    u = rng.random(shape if shape else None)
    x = trunc_normal_transform(u, mean, math.sqrt(var) if np.ndim(var) == 0 else np.sqrt(var),
                               region.lower, region.upper)
    if shape == ():
        return float(x)
    return x


def sample_dirichlet(alpha, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet draw stable for shape parameters well below 1.

    Uses the gamma-boost identity G(a) =d= G(a+1) * U^(1/a) in log
    space, then normalizes through a log-sum-exp, so draws with e.g.
    alpha = 1/20 never collapse to 0/0.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 1 or alpha.size == 0 or np.any(alpha <= 0):
        raise ValueError("alpha must be a 1-d vector of positive shapes")
    g = rng.standard_gamma(alpha + 1.0)
    g = np.maximum(g, _TINY)
    u = np.maximum(rng.random(alpha.size), _TINY)
    logs = np.log(g) + np.log(u) / alpha
    logs -= logs.max()
    w = np.exp(logs)
    w /= w.sum()
    return w


def systematic_resample(weights, count: int, rng: np.random.Generator) -> np.ndarray:
    """Systematic (low-variance) resampling.

    Returns ``count`` indices whose expected multiplicities are
    proportional to ``weights``; a single uniform offset places a
    regular grid on the cumulative weights.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a 1-d vector")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if not total > 0:
        raise ValueError("all resampling weights are zero")
    cum = np.cumsum(w)
    cum[-1] = total  # guard against round-off in the last bin
    positions = (np.arange(count) + rng.random()) * (total / count)
    return np.searchsorted(cum, positions, side="right").astype(np.int64)
