"""Clinical event indicators computed from the dynamic score gamma.

Three binary events summarize a latent trajectory: persistently elevated
risk (r1), clumping -- short windows of extreme risk dominating the
at-risk days (r2) -- and non-response to the most recent treatment (r3).
Their combination is encoded as an integer pattern code.  All events are
functions of gamma alone, so they are invariant to the static offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .model_core import PatientRecord

__all__ = [
    "EventThresholds",
    "event_r1",
    "event_r2",
    "event_r3",
    "encode",
    "decode",
    "PatternEncoder",
    "ThreeEventEncoder",
    "MeanLevelEncoder",
]

HIGH_RISK_QUANTILE_CUT = float(ndtri(0.95))  # ~1.6449


@dataclass(frozen=True)
class EventThresholds:
    r1_mean_cut: float = 1.0
    r2_high_cut: float = HIGH_RISK_QUANTILE_CUT
    r2_risk_cut: float = 1.0
    r2_ratio_cut: float = 0.5
    r3_window: int = 90

    def __post_init__(self):
        if not self.r2_high_cut > self.r2_risk_cut:
            raise ValueError("r2_high_cut must exceed r2_risk_cut")
        if self.r3_window < 1:
            raise ValueError("r3_window must be >= 1")


def event_r1(gamma: np.ndarray, thresholds: EventThresholds) -> int:
    """1 iff the whole-series mean dynamic score reaches the cut."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.size == 0:
        raise ValueError("gamma must be non-empty")
    return int(gamma.mean() >= thresholds.r1_mean_cut)

def event_r2(gamma: np.ndarray, thresholds: EventThresholds) -> int:
    """1 iff at-risk days are dominated by extreme-risk days.

    Ratio of days with gamma above the high cut to (days above the risk
    cut + 1); the +1 keeps the denominator positive.
    """
    gamma = np.asarray(gamma, dtype=float)
    n_high = int((gamma >= thresholds.r2_high_cut).sum())
    n_risk = int((gamma >= thresholds.r2_risk_cut).sum())
    return int(n_high / (n_risk + 1) >= thresholds.r2_ratio_cut)

def event_r3(gamma: np.ndarray, treatment_changes, thresholds: EventThresholds) -> int:
    """1 iff the mean score did not drop after the last treatment change.

    Compares the window of up to ``r3_window`` days ending at the last
    change (inclusive) with the days from the change to the end; both
    windows include the change day itself.
    """
    gamma = np.asarray(gamma, dtype=float)
    t_last = max(treatment_changes)
    pre = gamma[max(t_last - thresholds.r3_window, 1) - 1:t_last]
    post = gamma[t_last - 1:]
    return int(pre.mean() <= post.mean())


def encode(r1: int, r2: int, r3: int) -> int:
    return 4 * r1 + 2 * r2 + r3


def decode(code: int) -> tuple[int, int, int]:
    return (code >> 2) & 1, (code >> 1) & 1, code & 1


class PatternEncoder:
    """Maps a dynamic-score series to a pattern code in {0..L-1}.

    Subclasses define the clinical statistic; the sampler and the prior
    pattern tables only rely on this interface, so alternative event
    definitions plug in without touching the inference code.
    """

    n_patterns: int

    def __call__(self, gamma: np.ndarray, record: PatientRecord) -> int:
        raise NotImplementedError

    def batch(self, gammas: np.ndarray, record: PatientRecord) -> np.ndarray:
        """Codes for many trajectories at once; gammas is (n, T)."""
        return np.array([self(g, record) for g in gammas], dtype=np.int64)


class ThreeEventEncoder(PatternEncoder):
    """The default eight-pattern code built from (r1, r2, r3)."""

    def __init__(self, thresholds: EventThresholds | None = None):
        self.thresholds = thresholds or EventThresholds()
        self.n_patterns = 8

    def __call__(self, gamma, record):
        th = self.thresholds
        return encode(event_r1(gamma, th), event_r2(gamma, th),
                      event_r3(gamma, record.treatment_changes, th))

    def batch(self, gammas, record):
        th = self.thresholds
        gammas = np.asarray(gammas, dtype=float)
        r1 = gammas.mean(axis=1) >= th.r1_mean_cut
        n_high = (gammas >= th.r2_high_cut).sum(axis=1)
        n_risk = (gammas >= th.r2_risk_cut).sum(axis=1)
        r2 = n_high / (n_risk + 1) >= th.r2_ratio_cut
        t_last = max(record.treatment_changes)
        lo = max(t_last - th.r3_window, 1)
        pre = gammas[:, lo - 1:t_last].mean(axis=1)
        post = gammas[:, t_last - 1:].mean(axis=1)
        r3 = pre <= post
        return (4 * r1.astype(np.int64) + 2 * r2.astype(np.int64) + r3.astype(np.int64))


class MeanLevelEncoder(PatternEncoder):
    """Two-pattern code: 1 iff mean gamma reaches a cut.

    Used for small exactly-solvable problems where the full three-event
    code would be overkill.
    """

    def __init__(self, mean_cut: float):
        self.mean_cut = float(mean_cut)
        self.n_patterns = 2

    def __call__(self, gamma, record):
        return int(np.asarray(gamma, dtype=float).mean() >= self.mean_cut)

    def batch(self, gammas, record):
        return (np.asarray(gammas, dtype=float).mean(axis=1) >= self.mean_cut).astype(np.int64)
