"""Particle-filter samplers for the per-subject probit state-space model.

Two samplers share the same day-step mathematics:

* :func:`marginal_filter` -- one-step lookahead filter that returns
  samples from the filtered marginals ``g(theta_t | y_1..t)``; requires
  complete data.
* :func:`joint_trajectory_sample` -- whole-path sampler targeting the
  joint posterior ``g(theta_1..T | y)``; handles missing outcomes and a
  static offset ``m_i``, and returns one uniformly chosen trajectory.

Day-level covariance recursions are precomputed once per record into a
:class:`FilterPlan` so repeated calls inside an MCMC sweep only pay for
the particle arithmetic (in the numba kernels).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .events import PatternEncoder
from .model_core import MISSING, ModelConfig, PatientRecord, design_matrix, probit_loglik

__all__ = [
    "FilterDegenerateError",
    "FilterPlan",
    "FilterWorkspace",
    "PriorPatternTable",
    "build_joint_plan",
    "build_marginal_plan",
    "marginal_filter",
    "joint_trajectory_sample",
    "estimate_prior_patterns",
]

log = logging.getLogger(__name__)

PATTERN_SMOOTHING = 0.5  # pseudo-count keeping prior pattern tables positive


class FilterDegenerateError(RuntimeError):
    """All particle weights underflowed to zero at some day."""


def _stable_factor(cov: np.ndarray, name: str) -> np.ndarray:
    """Cholesky factor, falling back to a clipped eigenvalue square root.

    Non-PD inputs (round-off) are symmetrized and their eigenvalues
    clipped at zero with a logged warning; the returned factor F
    satisfies F F' = cov.
    """
    cov = 0.5 * (cov + cov.T)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        log.warning("%s not positive definite (min eigenvalue %.3e); clipping", name, vals.min())
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass
class FilterPlan:
    """Sweep-invariant per-day arrays for one record under one config.

    ``kind`` is "joint" or "marginal".  ``S`` holds the scalar one-step
    predictive dispersions z'Pz + 1, ``PzS`` the gain vectors Pz/S, and
    ``Ptt_factor`` factors of the filtered covariances.  The marginal
    plan also keeps ``P_pred``/``P_filt`` for diagnostics.
    """

    kind: str
    y: np.ndarray
    G_all: np.ndarray
    z: np.ndarray
    S: np.ndarray
    PzS: np.ndarray
    Ptt_factor: np.ndarray
    m0: np.ndarray
    S0_factor: np.ndarray
    Wchol_all: np.ndarray | None = None
    apply_G_on_missing: bool = True
    P_pred: np.ndarray | None = None
    P_filt: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.m0.shape[0]


def _day_transitions(record: PatientRecord, config: ModelConfig):
    T, p = record.T, config.p
    G_all = np.empty((T, p, p))
    W_all = np.empty((T, p, p))
    change = np.zeros(T, dtype=bool)
    for t in record.treatment_changes:
        change[t - 1] = True
    G_all[change] = config.G_star
    G_all[~change] = config.G
    W_all[change] = config.S0
    W_all[~change] = config.W
    return G_all, W_all, change


def build_joint_plan(record: PatientRecord, config: ModelConfig) -> FilterPlan:
    T, p = record.T, config.p
    G_all, W_all, change = _day_transitions(record, config)
    Z = design_matrix(record, p)
    S = np.empty(T)
    PzS = np.empty((T, p))
    Ptt_factor = np.empty((T, p, p))
    Wchol_all = np.empty((T, p, p))
    chol_W = _stable_factor(config.W, "W")
    chol_S0 = _stable_factor(config.S0, "S0")
    for d in range(T):
        W_d = W_all[d]
        Wchol_all[d] = chol_S0 if change[d] else chol_W
        Wz = W_d @ Z[d]
        S[d] = float(Z[d] @ Wz) + 1.0
        PzS[d] = Wz / S[d]
        Ptt_factor[d] = _stable_factor(W_d - np.outer(Wz, Wz) / S[d], f"P_filt[day {d + 1}]")
    return FilterPlan(kind="joint", y=np.ascontiguousarray(record.y), G_all=G_all,
                      z=np.ascontiguousarray(Z), S=S, PzS=PzS, Ptt_factor=Ptt_factor,
                      m0=config.m0.copy(), S0_factor=chol_S0, Wchol_all=Wchol_all,
                      apply_G_on_missing=config.missing_propagation == "state_equation")


def build_marginal_plan(record: PatientRecord, config: ModelConfig) -> FilterPlan:
    if np.any(record.y == MISSING):
        raise ValueError(f"patient {record.id}: marginal filter requires complete data")
    T, p = record.T, config.p
    G_all, W_all, _ = _day_transitions(record, config)
    Z = design_matrix(record, p)
    S = np.empty(T)
    PzS = np.empty((T, p))
    Ptt_factor = np.empty((T, p, p))
    P_pred = np.empty((T, p, p))
    P_filt = np.empty((T, p, p))
    chol_S0 = _stable_factor(config.S0, "S0")
    P = config.S0.copy()
    for d in range(T):
        P = G_all[d] @ P @ G_all[d].T + W_all[d]
        P = 0.5 * (P + P.T)
        P_pred[d] = P
        Pz = P @ Z[d]
        S[d] = float(Z[d] @ Pz) + 1.0
        PzS[d] = Pz / S[d]
        P = P - np.outer(Pz, Pz) / S[d]
        P = 0.5 * (P + P.T)
        P_filt[d] = P
        Ptt_factor[d] = _stable_factor(P, f"P_filt[day {d + 1}]")
    return FilterPlan(kind="marginal", y=np.ascontiguousarray(record.y), G_all=G_all,
                      z=np.ascontiguousarray(Z), S=S, PzS=PzS, Ptt_factor=Ptt_factor,
                      m0=config.m0.copy(), S0_factor=chol_S0,
                      P_pred=P_pred, P_filt=P_filt)


@dataclass
class FilterWorkspace:
    """Reusable buffers for repeated joint-sampler calls on one record.

    Holds the particle history, the ancestry table and the pre-generated
    random inputs; reusing it across MCMC sweeps avoids reallocating
    megabyte-sized arrays hundreds of thousands of times.
    """

    part: np.ndarray
    anc: np.ndarray
    normals: np.ndarray
    u_tn: np.ndarray
    u_sys: np.ndarray
    traj: np.ndarray
    mean: np.ndarray

    @classmethod
    def for_shape(cls, T: int, R: int, p: int) -> "FilterWorkspace":
        return cls(part=np.empty((T + 1, R, p)), anc=np.empty((T, R), dtype=np.int32),
                   normals=np.empty((T + 1, R, p)), u_tn=np.empty((T, R)),
                   u_sys=np.empty(T), traj=np.empty((T, p)), mean=np.empty((T, p)))


def _fill_random(ws: FilterWorkspace, rng: np.random.Generator) -> float:
    # fixed draw order: normals, truncation uniforms, offsets, final pick
    rng.standard_normal(out=ws.normals)
    rng.random(out=ws.u_tn)
    rng.random(out=ws.u_sys)
    return rng.random()


def _run_joint(plan: FilterPlan, m_i: float, n_particles: int, rng: np.random.Generator,
               ws: FilterWorkspace | None, want_mean: bool):
    T, p = plan.T, plan.p
    if ws is None:
        ws = FilterWorkspace.for_shape(T, n_particles, p)
    u_pick = _fill_random(ws, rng)
    status, n_low_ess = _kernels.joint_trajectory_kernel(
        plan.y, plan.G_all, plan.Wchol_all, plan.z, plan.S, plan.PzS, plan.Ptt_factor,
        plan.m0, plan.S0_factor, float(m_i), plan.apply_G_on_missing,
        ws.normals, ws.u_tn, ws.u_sys, u_pick,
        ws.part, ws.anc, ws.traj, ws.mean, want_mean)
    if status != 0:
        raise FilterDegenerateError(
            "all particle weights are zero; the data are inconsistent with the "
            f"model at offset m_i={m_i:.3g}")
    return ws, n_low_ess


def joint_trajectory_sample(record: PatientRecord, config: ModelConfig, m_i: float,
                            rng: np.random.Generator, *, plan: FilterPlan | None = None,
                            workspace: FilterWorkspace | None = None,
                            n_particles: int | None = None):
    """One trajectory from the joint posterior under the reference model.

    Returns ``(theta, loglik)`` where ``loglik`` is the probit
    log-likelihood of the returned trajectory at offset ``m_i``.
    Logs a diagnostic when the effective sample size drops below R/10.
    """
    if plan is None:
        plan = build_joint_plan(record, config)
    R = n_particles or config.n_particles
    ws, n_low_ess = _run_joint(plan, m_i, R, rng, workspace, want_mean=False)
    if n_low_ess:
        log.debug("patient %s: effective sample size below R/10 on %d days",
                  record.id, n_low_ess)
    theta = ws.traj.copy()
    gamma = np.einsum("tj,tj->t", plan.z, theta)
    return theta, probit_loglik(record, gamma, m_i)


def joint_posterior_mean(record: PatientRecord, config: ModelConfig, m_i: float,
                         rng: np.random.Generator, *, plan: FilterPlan | None = None,
                         n_particles: int | None = None) -> np.ndarray:
    """Average of the surviving particle trajectories (a smoothed-mean estimate)."""
    if plan is None:
        plan = build_joint_plan(record, config)
    R = n_particles or config.n_particles
    ws, _ = _run_joint(plan, m_i, R, rng, None, want_mean=True)
    return ws.mean.copy()


def marginal_filter(record: PatientRecord, config: ModelConfig, m_i: float,
                    rng: np.random.Generator, *, plan: FilterPlan | None = None,
                    n_particles: int | None = None) -> np.ndarray:
    """Filtered marginal samples, shape (T, R, p); complete data only."""
    if np.any(record.y == MISSING):
        raise ValueError(f"patient {record.id}: marginal filter requires complete data")
    if plan is None:
        plan = build_marginal_plan(record, config)
    T, p = plan.T, plan.p
    R = n_particles or config.n_particles
    normals = rng.standard_normal((T + 1, R, p))
    u_tn = rng.random((T, R))
    u_sys = rng.random(T)
    out = np.empty((T, R, p))
    status, n_low_ess = _kernels.marginal_filter_kernel(
        plan.y, plan.G_all, plan.z, plan.S, plan.PzS, plan.Ptt_factor, plan.m0,
        float(m_i), normals, u_tn, u_sys, out)
    if status != 0:
        raise FilterDegenerateError(
            "all particle weights are zero; the data are inconsistent with the "
            f"model at offset m_i={m_i:.3g}")
    if n_low_ess:
        log.debug("patient %s: effective sample size below R/10 on %d days",
                  record.id, n_low_ess)
    return out


@dataclass
class PriorPatternTable:
    """Smoothed prior probabilities of each pattern for one subject.

    Estimated by Monte Carlo under the reference prior; a half-count of
    smoothing keeps every entry strictly positive so the table can sit
    in the denominator of an acceptance ratio.  Events depend only on
    the dynamic score, so the table is independent of the static offset
    and is computed once per subject.
    """

    probs: np.ndarray
    draws: int

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if np.any(self.probs <= 0):
            raise ValueError("prior pattern probabilities must be strictly positive")
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("prior pattern probabilities must sum to 1")


def estimate_prior_patterns(record: PatientRecord, config: ModelConfig, n_draws: int,
                            rng: np.random.Generator,
                            encoder: PatternEncoder) -> PriorPatternTable:
    """Monte Carlo estimate of the prior pattern distribution.

    Streams ``n_draws`` prior trajectories through the state equation,
    keeping only the dynamic scores, and tabulates pattern codes with
    additive smoothing of :data:`PATTERN_SMOOTHING`.
    """
    if n_draws < 1000:
        raise ValueError("n_draws must be at least 1000 for a usable table")
    T, p = record.T, config.p
    G_all, W_all, change = _day_transitions(record, config)
    Z = design_matrix(record, p)
    chol_W = _stable_factor(config.W, "W").T
    chol_S0 = _stable_factor(config.S0, "S0").T
    theta = config.m0 + rng.standard_normal((n_draws, p)) @ chol_S0
    gamma = np.empty((n_draws, T))
    for d in range(T):
        fac = chol_S0 if change[d] else chol_W
        theta = theta @ G_all[d].T + rng.standard_normal((n_draws, p)) @ fac
        gamma[:, d] = theta @ Z[d]
    codes = encoder.batch(gamma, record)
    L = encoder.n_patterns
    counts = np.bincount(codes, minlength=L).astype(float)
    probs = (counts + PATTERN_SMOOTHING) / (n_draws + PATTERN_SMOOTHING * L)
    return PriorPatternTable(probs=probs, draws=n_draws)
