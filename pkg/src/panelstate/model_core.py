"""Data model and per-subject reference dynamic probit state-space model.

A subject's daily binary outcomes are modeled as
``P(y_t = 1) = Phi(mu + gamma_t)`` with ``gamma_t = z_t' theta_t`` and a
latent Gaussian state ``theta_t`` evolving through day-specific
transition matrices.  Days on which the subject's treatment changes use
a separate transition and an inflated innovation covariance, so the
latent state can re-disperse at those known external events.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_ndtr

__all__ = [
    "PatientRecord",
    "Dataset",
    "ModelConfig",
    "GlobalParams",
    "SubjectState",
    "DataError",
    "design_vector",
    "design_matrix",
    "transition_at",
    "probit_loglik",
    "simulate_prior_trajectory",
    "load_dataset",
    "write_dataset",
]

MISSING = -1  # code used in y arrays for missing outcomes


class DataError(ValueError):
    """Raised for malformed input data files or records."""


@dataclass
class PatientRecord:
    """One subject: outcome series, baseline covariates, treatment history.

    ``y`` holds int8 codes (0, 1, or ``MISSING``).  ``treatment_changes``
    is the sorted set of 1-based day indices at which treatment changes;
    day 1 always counts as a change.  ``treatment_id`` gives the active
    treatment label per day and must be constant between changes.
    """

    id: str
    y: np.ndarray
    x: np.ndarray
    treatment_changes: tuple[int, ...]
    treatment_id: tuple[str, ...] = ()

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int8)
        self.x = np.asarray(self.x, dtype=float)
        if self.y.ndim != 1 or self.y.size < 1:
            raise DataError(f"patient {self.id}: outcome series must be non-empty 1-d")
        if not np.all(np.isin(self.y, (0, 1, MISSING))):
            raise DataError(f"patient {self.id}: outcomes must be 0, 1 or missing")
        changes = tuple(sorted(int(t) for t in self.treatment_changes))
        if not changes or changes[0] != 1:
            raise DataError(f"patient {self.id}: day 1 must be a treatment change")
        if changes[-1] > self.T or len(set(changes)) != len(changes):
            raise DataError(f"patient {self.id}: treatment change days out of range")
        self.treatment_changes = changes
        if self.treatment_id:
            if len(self.treatment_id) != self.T:
                raise DataError(f"patient {self.id}: treatment_id length != T")
            for t in range(2, self.T + 1):
                if t not in changes and self.treatment_id[t - 1] != self.treatment_id[t - 2]:
                    raise DataError(
                        f"patient {self.id}: treatment label changes on day {t} "
                        "which is not a recorded change day")

    @property
    def T(self) -> int:
        return int(self.y.size)

    @property
    def observed(self) -> np.ndarray:
        return self.y != MISSING

    def last_change(self) -> int:
        return self.treatment_changes[-1]


@dataclass
class Dataset:
    """Records sorted by id plus the shared covariate names."""

    records: list[PatientRecord]
    covariate_names: list[str]

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: r.id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)


@dataclass
class ModelConfig:
    """All state-space matrices and prior hyperparameters.

    Matrices are plain configuration data: nothing in the code assumes a
    particular structure beyond shape and positive-definiteness of the
    covariances, so corrected or experimental matrices can be swapped in
    without code changes.
    """

    p: int
    G: np.ndarray
    W: np.ndarray
    G_star: np.ndarray
    S0: np.ndarray
    m0: np.ndarray
    M: float = 10.0
    sigma: float = -1.0
    L: int = 8
    dirichlet_a: np.ndarray = None
    n_particles: int = 200
    prior_mc_draws: int = 10000
    delta_prior_mean: np.ndarray | None = None
    delta_prior_cov: np.ndarray | None = None
    missing_propagation: str = "state_equation"  # or "verbatim"

    def __post_init__(self):
        self.G = np.array(self.G, dtype=float)
        self.W = np.array(self.W, dtype=float)
        self.G_star = np.array(self.G_star, dtype=float)
        self.S0 = np.array(self.S0, dtype=float)
        self.m0 = np.array(self.m0, dtype=float)
        if self.dirichlet_a is None:
            self.dirichlet_a = np.full(self.L, 1.0 / 20.0)
        self.dirichlet_a = np.array(self.dirichlet_a, dtype=float)
        for name in ("G", "W", "G_star", "S0"):
            m = getattr(self, name)
            if m.shape != (self.p, self.p):
                raise ValueError(f"{name} must be {self.p}x{self.p}, got {m.shape}")
        if self.m0.shape != (self.p,):
            raise ValueError(f"m0 must have length {self.p}")
        for name in ("W", "S0"):
            _check_spd(getattr(self, name), name)
        if not self.M > -self.sigma:
            raise ValueError(f"concentration M={self.M} must exceed -sigma={-self.sigma}")
        if self.sigma >= 1:
            raise ValueError("discount sigma must be < 1")
        if self.sigma < 0:
            k = self.M / (-self.sigma)
            if abs(k - round(k)) > 1e-9:
                raise ValueError(
                    f"with sigma={self.sigma} < 0, M must be an integer multiple "
                    f"of -sigma; got M={self.M}")
        if self.dirichlet_a.shape != (self.L,) or np.any(self.dirichlet_a <= 0):
            raise ValueError("dirichlet_a must be a strictly positive vector of length L")
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if self.prior_mc_draws < 1:
            raise ValueError("prior_mc_draws must be >= 1")
        if self.missing_propagation not in ("state_equation", "verbatim"):
            raise ValueError("missing_propagation must be 'state_equation' or 'verbatim'")

    @property
    def max_clusters(self) -> float:
        """Hard cap on occupied clusters implied by a negative discount."""
        if self.sigma < 0:
            return int(round(self.M / (-self.sigma)))
        return float("inf")


def _check_spd(m: np.ndarray, name: str):
    if not np.allclose(m, m.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    eigs = np.linalg.eigvalsh(m)
    if eigs.min() <= 0:
        raise ValueError(f"{name} is not positive definite (eigenvalue {eigs.min():.3e})")


@dataclass
class GlobalParams:
    """Static probit regression coefficients on baseline covariates."""

    delta: np.ndarray

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=float)
        if not np.all(np.isfinite(self.delta)):
            raise ValueError("delta must be finite")

    def offset(self, record: PatientRecord) -> float:
        return float(record.x @ self.delta)


@dataclass
class SubjectState:
    """Current latent trajectory and its derived summaries for one subject.

    ``gamma`` is always the deterministic function z_t' theta_t of the
    stored trajectory, and ``pattern`` the event code computed from
    gamma; use :func:`make_subject_state` to keep them consistent.
    """

    theta: np.ndarray
    gamma: np.ndarray
    pattern: int
    cluster: int = -1


def make_subject_state(theta: np.ndarray, record: PatientRecord, pattern_fn,
                       cluster: int = -1) -> SubjectState:
    Z = design_matrix(record, theta.shape[1])
    gamma = np.einsum("tj,tj->t", Z, theta)
    return SubjectState(theta=theta, gamma=gamma, pattern=int(pattern_fn(gamma, record)),
                        cluster=cluster)


def days_since_change(record: PatientRecord, t: int) -> int:
    """Days elapsed since the most recent treatment change at or before t."""
    if not 1 <= t <= record.T:
        raise IndexError(f"day {t} outside 1..{record.T}")
    prev = max(s for s in record.treatment_changes if s <= t)
    return t - prev


def design_vector(record: PatientRecord, t: int, p: int) -> np.ndarray:
    """Time-varying design vector z_t: intercept, days-under-treatment, ones.

    The second entry counts days under the currently active treatment
    (zero on change days themselves); remaining entries are 1 so they
    pick up the autoregressive components of the state.
    """
    z = np.ones(p)
    if p >= 2:
        z[1] = days_since_change(record, t)
    return z


def design_matrix(record: PatientRecord, p: int) -> np.ndarray:
    Z = np.ones((record.T, p))
    if p >= 2:
        changes = np.asarray(record.treatment_changes)
        t = np.arange(1, record.T + 1)
        idx = np.searchsorted(changes, t, side="right") - 1
        Z[:, 1] = t - changes[idx]
    return Z


def transition_at(config: ModelConfig, record: PatientRecord, t: int):
    """(G_t, W_t) for day t: the change-day pair on treatment changes."""
    if not 1 <= t <= record.T:
        raise IndexError(f"day {t} outside 1..{record.T}")
    if t in record.treatment_changes:
        return config.G_star, config.S0
    return config.G, config.W


def probit_loglik(record: PatientRecord, gamma: np.ndarray, mu: float) -> float:
    """Sum over observed days of the probit log likelihood of y given
    score mu + gamma_t.  Missing days contribute zero; evaluation goes
    through the log-CDF so extreme scores underflow to -inf, never NaN.
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (record.T,):
        raise ValueError("gamma must have one entry per day")
    obs = record.observed
    if not obs.any():
        return 0.0
    s = mu + gamma[obs]
    sign = np.where(record.y[obs] == 1, 1.0, -1.0)
    return float(log_ndtr(sign * s).sum())


def simulate_prior_trajectory(config: ModelConfig, record: PatientRecord,
                              rng: np.random.Generator) -> np.ndarray:
    """One draw of the latent trajectory under the state equation.

    theta_0 ~ N(m0, S0); each day applies the day-specific transition
    (change days re-disperse with the initial covariance).  Returns the
    T x p matrix of rows theta_1..theta_T.
    """
    p = config.p
    chol_W = np.linalg.cholesky(config.W)
    chol_S0 = np.linalg.cholesky(config.S0)
    theta = config.m0 + chol_S0 @ rng.standard_normal(p)
    out = np.empty((record.T, p))
    for t in range(1, record.T + 1):
        if t in record.treatment_changes:
            G_t, chol = config.G_star, chol_S0
        else:
            G_t, chol = config.G, chol_W
        theta = G_t @ theta + chol @ rng.standard_normal(p)
        out[t - 1] = theta
    return out


# ---------------------------------------------------------------------------
# dataset ingestion: long-format observations.csv + baseline.csv


def load_dataset(directory: str | Path) -> Dataset:
    """Read ``observations.csv`` and ``baseline.csv`` from a directory.

    observations.csv: patient_id, day, y, treatment with contiguous
    1-based days and empty y for missing.  baseline.csv: patient_id
    followed by covariate columns (including the intercept column).
    """
    directory = Path(directory)
    obs_path = directory / "observations.csv"
    base_path = directory / "baseline.csv"
    for path in (obs_path, base_path):
        if not path.exists():
            raise DataError(f"missing input file {path}")

    series: dict[str, list[tuple[int, int, str]]] = {}
    with open(obs_path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"patient_id", "day", "y", "treatment"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"{obs_path}: header must contain {sorted(required)}")
        for row in reader:
            pid = row["patient_id"]
            try:
                day = int(row["day"])
            except ValueError as exc:
                raise DataError(f"{obs_path}: bad day {row['day']!r} for {pid}") from exc
            raw = (row["y"] or "").strip()
            if raw == "":
                y = MISSING
            elif raw in ("0", "1"):
                y = int(raw)
            else:
                raise DataError(f"{obs_path}: y must be 0, 1 or empty, got {raw!r}")
            series.setdefault(pid, []).append((day, y, row["treatment"]))

    covs: dict[str, np.ndarray] = {}
    with open(base_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[0] != "patient_id":
            raise DataError(f"{base_path}: first column must be patient_id")
        names = list(reader.fieldnames[1:])
        if not names:
            raise DataError(f"{base_path}: needs at least one covariate column")
        for row in reader:
            try:
                covs[row["patient_id"]] = np.array([float(row[c]) for c in names])
            except ValueError as exc:
                raise DataError(f"{base_path}: non-numeric covariate for "
                                f"{row['patient_id']}") from exc

    if set(series) != set(covs):
        missing = set(series).symmetric_difference(covs)
        raise DataError(f"patients not present in both files: {sorted(missing)[:5]}")

    records = []
    for pid, rows in series.items():
        rows.sort(key=lambda r: r[0])
        days = [r[0] for r in rows]
        if days != list(range(1, len(days) + 1)):
            raise DataError(f"patient {pid}: days must be contiguous starting at 1")
        y = np.array([r[1] for r in rows], dtype=np.int8)
        treatments = tuple(r[2] for r in rows)
        changes = [1] + [t for t in range(2, len(days) + 1)
                         if treatments[t - 1] != treatments[t - 2]]
        records.append(PatientRecord(id=pid, y=y, x=covs[pid],
                                     treatment_changes=tuple(changes),
                                     treatment_id=treatments))
    return Dataset(records=records, covariate_names=names)


def write_dataset(dataset: Dataset, directory: str | Path):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "observations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "day", "y", "treatment"])
        for rec in dataset:
            treatments = rec.treatment_id or ("T0",) * rec.T
            for t in range(1, rec.T + 1):
                y = rec.y[t - 1]
                writer.writerow([rec.id, t, "" if y == MISSING else int(y),
                                 treatments[t - 1]])
    with open(directory / "baseline.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id"] + dataset.covariate_names)
        for rec in dataset:
            writer.writerow([rec.id] + [repr(float(v)) for v in rec.x])
