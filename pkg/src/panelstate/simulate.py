"""Synthetic cohort generator for binary seizure-like panel data.

Two latent groups (non-clumping / clumping), each split into low- and
high-risk subtypes via a baseline covariate, observed over a fixed
horizon with one treatment change.  Daily outcome probabilities are
piecewise constant per (group, subtype, year); clumping subjects
additionally receive random high-probability episodes.  Outcomes are
then masked completely at random to mimic missing diaries.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .model_core import Dataset, PatientRecord
from .stochastics import RngStream

__all__ = ["ScenarioConfig", "TruthRecord", "generate_cohort", "true_pattern",
           "write_truth", "read_truth", "DEFAULT_BASE_PROBS"]

# daily seizure probabilities by (group, subtype, year):
# group 0 = non-clumping, group 1 = clumping; subtype 0 = low, 1 = high risk
DEFAULT_BASE_PROBS = (
    ((1 / 60, 1 / 365), (2 / 60, 4 / 365)),
    ((5 / 365, 1 / 730), (10 / 365, 1 / 365)),
)

GROUP_TRUE_PATTERN = (0, 2)  # clumping flips the second event bit


@dataclass(frozen=True)
class ScenarioConfig:
    n_per_cell: int = 25
    horizon: int = 730
    change_day: int = 366
    base_probs: tuple = DEFAULT_BASE_PROBS
    clump_prob: float = 99 / 100
    clump_len_range: tuple[int, int] = (7, 31)
    clumps_per_year: int = 1
    missing_rate: float = 0.10
    seed: int = 0

    def __post_init__(self):
        probs = np.asarray(self.base_probs, dtype=float)
        if probs.shape != (2, 2, 2) or np.any(probs <= 0) or np.any(probs >= 1):
            raise ValueError("base_probs must be a 2x2x2 table of probabilities in (0,1)")
        if not 0 < self.clump_prob < 1:
            raise ValueError("clump_prob must be in (0,1)")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must be in [0,1)")
        if not 1 < self.change_day <= self.horizon:
            raise ValueError("change_day must lie in (1, horizon]")
        lo, hi = self.clump_len_range
        if not 1 <= lo <= hi:
            raise ValueError("clump_len_range must be an increasing positive pair")


@dataclass
class TruthRecord:
    """Ground truth behind one simulated subject."""

    patient_id: str
    group: int
    subtype: int
    true_pattern: int
    probit_truth: np.ndarray
    clump_windows: list = field(default_factory=list)  # (start_day, length)


def true_pattern(truth: TruthRecord) -> int:
    """Pattern implied by the generating process for the scoring metric."""
    return GROUP_TRUE_PATTERN[truth.group]


def _place_clumps(seg_start: int, seg_end: int, count: int, len_range, rng) -> list:
    """Non-overlapping (start, length) windows inside [seg_start, seg_end]."""
    lo, hi = len_range
    seg_len = seg_end - seg_start + 1
    if hi > seg_len:
        raise ValueError(f"clump length {hi} does not fit in a {seg_len}-day segment")
    windows: list[tuple[int, int]] = []
    for _ in range(count):
        length = int(rng.integers(lo, hi + 1))
        for _attempt in range(1000):
            start = int(rng.integers(seg_start, seg_end - length + 2))
            if all(start + length <= s or start >= s + l for s, l in windows):
                windows.append((start, length))
                break
        else:
            raise ValueError("could not place non-overlapping clump windows")
    return sorted(windows)


def generate_cohort(scenario: ScenarioConfig, rng_root: RngStream | None = None):
    """Simulate the cohort; returns ``(Dataset, list[TruthRecord])``.

    Subjects are laid out cell by cell: group-major, then subtype, with
    ``n_per_cell`` subjects each.  Baseline covariates are an intercept
    and the subtype indicator; the treatment change day is shared.
    """
    if rng_root is None:
        rng_root = RngStream(scenario.seed)
    probs = np.asarray(scenario.base_probs, dtype=float)
    T = scenario.horizon
    change = scenario.change_day
    records, truths = [], []
    n_total = 4 * scenario.n_per_cell
    width = max(4, len(str(n_total)))
    sub = 0
    for group in range(2):
        for subtype in range(2):
            for _ in range(scenario.n_per_cell):
                rng = rng_root.substream(sub)
                pid = f"S{sub:0{width}d}"
                daily = np.empty(T)
                daily[:change - 1] = probs[group, subtype, 0]
                daily[change - 1:] = probs[group, subtype, 1]
                windows: list[tuple[int, int]] = []
                if group == 1:
                    segments = [(1, change - 1), (change, T)]
                    for seg_start, seg_end in segments:
                        windows.extend(_place_clumps(seg_start, seg_end,
                                                     scenario.clumps_per_year,
                                                     scenario.clump_len_range, rng))
                    for start, length in windows:
                        daily[start - 1:start - 1 + length] = scenario.clump_prob
                y = (rng.random(T) < daily).astype(np.int8)
                gone = rng.random(T) < scenario.missing_rate
                y[gone] = -1
                treatments = tuple("T0" if t < change else "T1" for t in range(1, T + 1))
                rec = PatientRecord(id=pid, y=y, x=np.array([1.0, float(subtype)]),
                                    treatment_changes=(1, change),
                                    treatment_id=treatments)
                records.append(rec)
                truth = TruthRecord(patient_id=pid, group=group, subtype=subtype,
                                    true_pattern=GROUP_TRUE_PATTERN[group],
                                    probit_truth=ndtri(daily),
                                    clump_windows=windows)
                truths.append(truth)
                sub += 1
    dataset = Dataset(records=records, covariate_names=["intercept", "subtype"])
    truths.sort(key=lambda t: t.patient_id)
    return dataset, truths


def write_truth(truths, path: str | Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "cluster", "subtype", "true_pattern", "clumps"])
        for t in truths:
            clumps = ";".join(f"{s}:{l}" for s, l in t.clump_windows)
            w.writerow([t.patient_id, t.group, t.subtype, t.true_pattern, clumps])


def read_truth(path: str | Path) -> dict[str, int]:
    """patient_id -> true pattern, as written by ``write_truth``."""
    out: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "true_pattern" not in reader.fieldnames:
            raise ValueError(f"{path}: not a truth table")
        for row in reader:
            out[row["patient_id"]] = int(row["true_pattern"])
    return out
