"""MCMC orchestration: joint subject updates, conjugate refreshes, chains.

One sweep updates, in order: every subject's (trajectory, pattern,
cluster) through a Metropolis-Hastings step whose proposal is the
particle-filter posterior under the reference model; every occupied
atom by its conjugate Dirichlet refresh; and the static coefficients by
probit data augmentation.  The static coefficients are updated last so
all proposals within a sweep share the sweep-start offset.

Randomness is organized in keyed substreams (role, chain, sweep,
subject), which makes chains reproducible bit-for-bit regardless of how
proposal generation is parallelized.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import ndtr

from .clustering import (ClusterRegistry, birth_atom, conditional_allocation,
                         predictive_pattern_probs, update_atom)
from .events import PatternEncoder, ThreeEventEncoder
from .model_core import (Dataset, GlobalParams, ModelConfig, PatientRecord,
                         SubjectState, design_matrix)
from .particle_filter import (FilterWorkspace, build_joint_plan, build_marginal_plan,
                              estimate_prior_patterns, joint_posterior_mean,
                              marginal_filter, _run_joint)
from .stochastics import RngStream, trunc_normal_transform

__all__ = [
    "McmcSettings",
    "ChainStore",
    "ChainAbort",
    "retained_iterations",
    "probit_mle",
    "initialize",
    "gibbs_update_delta",
    "acceptance_ratio",
    "run_chain",
    "run_chains",
    "reference_pattern_posterior",
    "write_run_stores",
    "THETA_MAGIC",
]

log = logging.getLogger(__name__)

# substream roles; every random decision in a run hangs off exactly one key
ROLE_INIT = 0
ROLE_GTABLE = 1
ROLE_PROPOSAL = 2
ROLE_ATOMS = 3
ROLE_DELTA = 4
ROLE_REFERENCE = 5

THETA_MAGIC = b"PSTB"


@dataclass(frozen=True)
class McmcSettings:
    n_chains: int = 5
    n_iter: int = 13500
    burn_in: int = 1000
    thin: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError("burn_in must satisfy 0 <= burn_in < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")

    @property
    def n_retained(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin


def retained_iterations(n_iter: int, burn_in: int, thin: int) -> list[int]:
    """Sweep numbers whose draws are kept after burn-in and thinning."""
    return list(range(burn_in + thin, n_iter + 1, thin))


@dataclass
class ChainStore:
    """Retained draws and diagnostics of a single chain."""

    chain_id: int
    seed: int
    patient_ids: list[str]
    covariate_names: list[str]
    retained_iters: np.ndarray
    delta: np.ndarray            # (n_ret, d)
    patterns: np.ndarray         # (n_ret, N)
    labels: np.ndarray           # (n_ret, N)
    atoms: list                  # per draw: (H, L) array
    g_tables: np.ndarray         # (N, L)
    acceptance: np.ndarray       # accepted proposals per subject
    n_sweeps: int
    theta_snapshots: dict = field(default_factory=dict)  # pid -> list of (T, p)
    snapshot_draws: list = field(default_factory=list)   # retained-draw indices
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_retained(self) -> int:
        return int(self.retained_iters.size)


class ChainAbort(RuntimeError):
    """A module error aborted the chain; carries the partial store."""

    def __init__(self, message: str, partial: ChainStore):
        super().__init__(message)
        self.partial = partial

    def __reduce__(self):
        # keep the partial store when crossing a process boundary
        return (ChainAbort, (self.args[0], self.partial))


def probit_mle(X: np.ndarray, y: np.ndarray, tol: float = 1e-8, max_iter: int = 100):
    """Probit MLE by Fisher-scoring IRLS; falls back to zero on divergence."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    d = X.shape[1]
    delta = np.zeros(d)
    for _ in range(max_iter):
        eta = X @ delta
        Phi = np.clip(ndtr(eta), 1e-12, 1.0 - 1e-12)
        phi = np.exp(-0.5 * eta * eta) / math.sqrt(2.0 * math.pi)
        denom = Phi * (1.0 - Phi)
        u = phi * (y - Phi) / denom
        v = phi * phi / denom
        H = X.T @ (X * v[:, None])
        try:
            step = np.linalg.solve(H, X.T @ u)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        delta = delta + step
        if float(np.linalg.norm(step)) < tol:
            return delta, True
    warnings.warn("probit IRLS did not converge; falling back to zero coefficients")
    return np.zeros(d), False


def _pooled_design(dataset: Dataset):
    """Stack x_i once per observed day, subjects in id order."""
    rows, ys, owners = [], [], []
    for idx, rec in enumerate(dataset):
        obs = rec.observed
        n = int(obs.sum())
        if n == 0:
            continue
        rows.append(np.repeat(rec.x[None, :], n, axis=0))
        ys.append(rec.y[obs].astype(np.int8))
        owners.append(np.full(n, idx, dtype=np.int64))
    if not rows:
        d = dataset.n_covariates
        return np.zeros((0, d)), np.zeros(0, dtype=np.int8), np.zeros(0, dtype=np.int64)
    return np.vstack(rows), np.concatenate(ys), np.concatenate(owners)


def default_delta_prior(config: ModelConfig, d: int):
    d0 = config.delta_prior_mean
    D0 = config.delta_prior_cov
    if d0 is None:
        d0 = np.zeros(d)
    d0 = np.asarray(d0, dtype=float)
    if D0 is None:
        D0 = 10.0 * np.eye(d)
    D0 = np.asarray(D0, dtype=float)
    if d0.shape != (d,) or D0.shape != (d, d):
        raise ValueError(f"delta prior dimensions must match {d} covariates")
    eigs = np.linalg.eigvalsh(D0)
    if eigs.min() <= 0:
        raise ValueError(f"delta_prior_cov is not positive definite (eigenvalue {eigs.min():.3e})")
    return d0, D0


def gibbs_update_delta(X: np.ndarray, y: np.ndarray, gamma: np.ndarray,
                       delta: np.ndarray, d0: np.ndarray, D0: np.ndarray,
                       rng: np.random.Generator, XtX: np.ndarray | None = None) -> np.ndarray:
    """Data-augmentation draw of the static probit coefficients.

    For every observed day a latent score is drawn from the normal
    truncated to the half-line implied by the outcome, centered at the
    current linear predictor plus the dynamic part; the coefficients are
    then conjugate-normal given those scores minus the dynamic part.
    With no observations this reduces to a prior draw.
    """
    d = d0.shape[0]
    D0_inv = np.linalg.inv(D0)
    if XtX is None:
        XtX = X.T @ X if X.shape[0] else np.zeros((d, d))
    if X.shape[0]:
        eta = X @ delta + gamma
        zeta = np.empty(X.shape[0])
        pos = y == 1
        if pos.any():
            zeta[pos] = trunc_normal_transform(rng.random(int(pos.sum())), eta[pos], 1.0,
                                               0.0, math.inf)
        neg = ~pos
        if neg.any():
            zeta[neg] = trunc_normal_transform(rng.random(int(neg.sum())), eta[neg], 1.0,
                                               -math.inf, 0.0)
        rhs = X.T @ (zeta - gamma) + D0_inv @ d0
    else:
        rhs = D0_inv @ d0
    prec = XtX + D0_inv
    Lp = np.linalg.cholesky(prec)
    m_post = cho_solve((Lp, True), rhs)
    return m_post + solve_triangular(Lp.T, rng.standard_normal(d), lower=False)


def acceptance_ratio(p_new: float, p_old: float, g_old: float, g_new: float) -> float:
    """Simplified MH ratio: predictive odds of the proposed pattern times
    the inverse prior odds under the reference model.  Equals 1 whenever
    the proposed pattern matches the current one."""
    if p_old <= 0.0:
        return 1.0
    return min(1.0, (p_new / p_old) * (g_old / g_new))


@dataclass
class _SubjectCtx:
    record: PatientRecord
    plan: object
    workspace: FilterWorkspace
    state: SubjectState


class _Chain:
    """Mutable state of one running chain."""

    def __init__(self, dataset: Dataset, config: ModelConfig, settings: McmcSettings,
                 chain_id: int, encoder: PatternEncoder,
                 g_tables: np.ndarray | None = None, threads: int = 1,
                 trace_hook=None):
        self.dataset = dataset
        self.config = config
        self.settings = settings
        self.chain_id = chain_id
        self.encoder = encoder
        self.threads = max(1, threads)
        self.root = RngStream(settings.seed)
        self.X, self.y_flat, _ = _pooled_design(dataset)
        self.XtX = self.X.T @ self.X if self.X.shape[0] else np.zeros(
            (dataset.n_covariates, dataset.n_covariates))
        self.d0, self.D0 = default_delta_prior(config, dataset.n_covariates)
        self.subjects: list[_SubjectCtx] = []
        for rec in dataset:
            plan = build_joint_plan(rec, config)
            ws = FilterWorkspace.for_shape(rec.T, config.n_particles, config.p)
            self.subjects.append(_SubjectCtx(record=rec, plan=plan, workspace=ws, state=None))
        if g_tables is None:
            g_tables = compute_g_tables(dataset, config, encoder, settings.seed)
        self.g_tables = g_tables
        self.registry = ClusterRegistry(n_patterns=encoder.n_patterns,
                                        max_clusters=config.max_clusters)
        self.delta = np.zeros(dataset.n_covariates)
        self.trace_hook = trace_hook
        self.acceptance = np.zeros(len(dataset), dtype=np.int64)
        self.n_low_ess = 0
        self.max_occupied = 0

    # -- initialization ----------------------------------------------------

    def initialize(self):
        cfg, enc = self.config, self.encoder
        delta, _ = probit_mle(self.X, self.y_flat) if self.X.shape[0] else (self.d0.copy(), True)
        self.delta = delta
        for idx, sub in enumerate(self.subjects):
            rec = sub.record
            rng = self.root.substream(ROLE_INIT, self.chain_id, idx)
            m_i = float(rec.x @ delta)
            if not rec.observed.any():
                theta = _prior_mean_path(rec, cfg)
            elif rec.observed.all():
                samples = marginal_filter(rec, cfg, m_i, rng,
                                          plan=build_marginal_plan(rec, cfg))
                theta = samples.mean(axis=1)
            else:
                theta = joint_posterior_mean(rec, cfg, m_i, rng, plan=sub.plan)
            gamma = np.einsum("tj,tj->t", sub.plan.z, theta)
            sub.state = SubjectState(theta=theta, gamma=gamma,
                                     pattern=int(enc(gamma, rec)), cluster=-1)
        # one homogeneous cluster per distinct pattern, atom at its
        # conjugate posterior mean given the members
        by_pattern: dict[int, list[int]] = {}
        for idx, sub in enumerate(self.subjects):
            by_pattern.setdefault(sub.state.pattern, []).append(idx)
        if len(by_pattern) > self.registry.max_clusters:
            raise RuntimeError("more distinct initial patterns than the cluster cap")
        a = cfg.dirichlet_a
        for h, (code, members) in enumerate(sorted(by_pattern.items())):
            counts = np.zeros(enc.n_patterns)
            counts[code] = len(members)
            atom = (a + counts) / (a.sum() + len(members))
            for j, idx in enumerate(members):
                if j == 0:
                    self.registry.add(idx, self.registry.H, atom)
                else:
                    self.registry.add(idx, h)
                self.subjects[idx].state.cluster = h
        self.registry.check()
        self.max_occupied = max(self.max_occupied, self.registry.H)

    # -- one sweep ---------------------------------------------------------

    def _propose(self, idx: int, sweep: int, m_i: float):
        sub = self.subjects[idx]
        rng = self.root.substream(ROLE_PROPOSAL, self.chain_id, sweep, idx)
        ws, n_low = _run_joint(sub.plan, m_i, self.config.n_particles, rng,
                               sub.workspace, want_mean=False)
        self.n_low_ess += n_low
        theta = ws.traj.copy()
        gamma = np.einsum("tj,tj->t", sub.plan.z, theta)
        return theta, gamma, int(self.encoder(gamma, sub.record)), rng

    def sweep(self, sweep: int):
        cfg = self.config
        n_total = len(self.subjects)
        m_vec = [float(sub.record.x @ self.delta) for sub in self.subjects]

        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                proposals = list(pool.map(
                    lambda i: self._propose(i, sweep, m_vec[i]), range(n_total)))
        else:
            proposals = [self._propose(i, sweep, m_vec[i]) for i in range(n_total)]

        for idx in range(n_total):
            theta_new, gamma_new, ell_new, rng = proposals[idx]
            sub = self.subjects[idx]
            # the cancellation of the probit likelihood in the acceptance
            # ratio requires the proposal offset to equal the current one
            mu_now = float(sub.record.x @ self.delta)
            if m_vec[idx] != mu_now:
                raise AssertionError("proposal offset diverged from current offset")
            ell_old = sub.state.pattern
            h_old = self.registry.assignments[idx]
            atom_old = self.registry.atoms[h_old]
            was_singleton = self.registry.counts[h_old] == 1
            self.registry.remove(idx)
            p_vec = predictive_pattern_probs(self.registry, n_total, cfg.M, cfg.sigma,
                                             cfg.dirichlet_a)
            h_new, is_new = conditional_allocation(self.registry, n_total, cfg.M,
                                                   cfg.sigma, cfg.dirichlet_a, ell_new, rng)
            alpha = acceptance_ratio(float(p_vec[ell_new]), float(p_vec[ell_old]),
                                     float(self.g_tables[idx, ell_old]),
                                     float(self.g_tables[idx, ell_new]))
            if self.trace_hook is not None:
                self.trace_hook(idx, ell_old, ell_new, alpha)
            if rng.random() < alpha:
                atom = birth_atom(ell_new, cfg.dirichlet_a, rng) if is_new else None
                self.registry.add(idx, h_new, atom)
                sub.state = SubjectState(theta=theta_new, gamma=gamma_new,
                                         pattern=ell_new, cluster=h_new)
                self.acceptance[idx] += 1
            else:
                # restore the previous membership; a singleton's cluster was
                # compacted away, so it is re-created with its old atom
                if was_singleton:
                    self.registry.add(idx, self.registry.H, atom_old)
                    sub.state.cluster = self.registry.H - 1
                else:
                    self.registry.add(idx, h_old)
                    sub.state.cluster = h_old
            self.max_occupied = max(self.max_occupied, self.registry.H)

        # conjugate refresh of every occupied atom
        rng_atoms = self.root.substream(ROLE_ATOMS, self.chain_id, sweep)
        counts = np.zeros((self.registry.H, self.encoder.n_patterns))
        for idx, sub in enumerate(self.subjects):
            counts[self.registry.assignments[idx], sub.state.pattern] += 1
        for h in range(self.registry.H):
            self.registry.atoms[h] = update_atom(counts[h], cfg.dirichlet_a, rng_atoms)

        # static coefficients last, so the sweep's proposals shared one offset
        rng_delta = self.root.substream(ROLE_DELTA, self.chain_id, sweep)
        gamma_flat = self._gamma_flat()
        self.delta = gibbs_update_delta(self.X, self.y_flat, gamma_flat, self.delta,
                                        self.d0, self.D0, rng_delta, XtX=self.XtX)

    def _gamma_flat(self) -> np.ndarray:
        parts = [sub.state.gamma[sub.record.observed] for sub in self.subjects
                 if sub.record.observed.any()]
        return np.concatenate(parts) if parts else np.zeros(0)


def _prior_mean_path(record: PatientRecord, config: ModelConfig) -> np.ndarray:
    theta = config.m0.copy()
    out = np.empty((record.T, config.p))
    for t in range(1, record.T + 1):
        G_t = config.G_star if t in record.treatment_changes else config.G
        theta = G_t @ theta
        out[t - 1] = theta
    return out


def compute_g_tables(dataset: Dataset, config: ModelConfig, encoder: PatternEncoder,
                     seed: int, n_draws: int | None = None) -> np.ndarray:
    """Prior pattern tables for all subjects, shared across chains."""
    root = RngStream(seed)
    n_draws = n_draws or config.prior_mc_draws
    tables = np.empty((len(dataset), encoder.n_patterns))
    for idx, rec in enumerate(dataset):
        rng = root.substream(ROLE_GTABLE, idx)
        tables[idx] = estimate_prior_patterns(rec, config, n_draws, rng, encoder).probs
    return tables


def initialize(dataset: Dataset, config: ModelConfig, settings: McmcSettings,
               chain_id: int = 0, encoder: PatternEncoder | None = None):
    """Starting point of a chain: MLE coefficients, posterior-mean
    trajectories under the reference model, and homogeneous clusters.
    Returns ``(GlobalParams, states, registry)``."""
    encoder = encoder or ThreeEventEncoder()
    chain = _Chain(dataset, config, settings, chain_id, encoder,
                   g_tables=np.full((len(dataset), encoder.n_patterns),
                                    1.0 / encoder.n_patterns))
    chain.initialize()
    states = [sub.state for sub in chain.subjects]
    return GlobalParams(delta=chain.delta), states, chain.registry


def run_chain(dataset: Dataset, config: ModelConfig, settings: McmcSettings,
              chain_id: int, encoder: PatternEncoder | None = None,
              g_tables: np.ndarray | None = None, collect_theta: bool = False,
              snapshot_stride: int = 10, threads: int = 1,
              trace_hook=None) -> ChainStore:
    """Run one chain and return its retained draws.

    Any error mid-chain is re-raised as :class:`ChainAbort` carrying the
    partial store, so callers can serialize what was collected.
    """
    encoder = encoder or ThreeEventEncoder()
    chain = _Chain(dataset, config, settings, chain_id, encoder,
                   g_tables=g_tables, threads=threads, trace_hook=trace_hook)
    keep = retained_iterations(settings.n_iter, settings.burn_in, settings.thin)
    n_ret = len(keep)
    N = len(dataset)
    d = dataset.n_covariates
    delta_draws = np.empty((n_ret, d))
    patterns = np.empty((n_ret, N), dtype=np.int16)
    labels = np.empty((n_ret, N), dtype=np.int32)
    atoms: list = []
    theta_snapshots: dict = {rec.id: [] for rec in dataset} if collect_theta else {}
    snapshot_draws: list[int] = []
    keep_set = {it: pos for pos, it in enumerate(keep)}

    def build_store(n_done: int) -> ChainStore:
        return ChainStore(
            chain_id=chain_id, seed=settings.seed,
            patient_ids=[rec.id for rec in dataset],
            covariate_names=list(dataset.covariate_names),
            retained_iters=np.asarray(keep[:n_done], dtype=np.int64),
            delta=delta_draws[:n_done].copy(), patterns=patterns[:n_done].copy(),
            labels=labels[:n_done].copy(), atoms=atoms[:n_done],
            g_tables=chain.g_tables.copy(), acceptance=chain.acceptance.copy(),
            n_sweeps=settings.n_iter,
            theta_snapshots={pid: list(snaps) for pid, snaps in theta_snapshots.items()},
            snapshot_draws=list(snapshot_draws),
            diagnostics={
                "n_low_ess": int(chain.n_low_ess),
                "fallback_allocations": int(chain.registry.fallback_allocations),
                "max_occupied": int(chain.max_occupied),
            })

    n_done = 0
    try:
        chain.initialize()
        for sweep in range(1, settings.n_iter + 1):
            chain.sweep(sweep)
            pos = keep_set.get(sweep)
            if pos is None:
                continue
            delta_draws[pos] = chain.delta
            for idx, sub in enumerate(chain.subjects):
                st = sub.state
                if st.pattern != int(encoder(st.gamma, sub.record)):
                    raise AssertionError("stored pattern diverged from trajectory events")
                patterns[pos, idx] = st.pattern
                labels[pos, idx] = chain.registry.assignments[idx]
            atoms.append(chain.registry.atom_matrix().copy())
            if collect_theta and pos % snapshot_stride == 0:
                snapshot_draws.append(pos)
                for sub in chain.subjects:
                    theta_snapshots[sub.record.id].append(sub.state.theta.copy())
            n_done = pos + 1
    except Exception as exc:  # noqa: BLE001 - chain abort carries partial results
        raise ChainAbort(f"chain {chain_id} aborted at draw {n_done}: {exc}",
                         build_store(n_done)) from exc
    return build_store(n_done)


def _chain_task(args):
    return run_chain(*args[:-1], **args[-1])


def run_chains(dataset: Dataset, config: ModelConfig, settings: McmcSettings,
               encoder: PatternEncoder | None = None, collect_theta: bool = False,
               snapshot_stride: int = 10, threads: int = 1,
               workers: int = 1) -> list[ChainStore]:
    """Run all chains; independent seeds per chain, optional processes."""
    encoder = encoder or ThreeEventEncoder()
    g_tables = compute_g_tables(dataset, config, encoder, settings.seed)
    tasks = [(dataset, config, settings, c,
              dict(encoder=encoder, g_tables=g_tables, collect_theta=collect_theta,
                   snapshot_stride=snapshot_stride, threads=threads))
             for c in range(settings.n_chains)]
    if workers > 1 and settings.n_chains > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(min(workers, settings.n_chains)) as pool:
            return pool.map(_chain_task, tasks)
    return [_chain_task(t) for t in tasks]


def reference_pattern_posterior(dataset: Dataset, config: ModelConfig,
                                encoder: PatternEncoder, n_draws: int,
                                seed: int) -> np.ndarray:
    """Pattern posteriors under the reference model alone.

    Empirical-Bayes two-step: pooled probit MLE fixes the offsets, then
    each subject's pattern distribution is the empirical frequency over
    independent posterior trajectory draws.  Returns (N, L) frequencies.
    """
    X, y_flat, _ = _pooled_design(dataset)
    delta, _ = probit_mle(X, y_flat) if X.shape[0] else (np.zeros(dataset.n_covariates), True)
    root = RngStream(seed)
    out = np.zeros((len(dataset), encoder.n_patterns))
    for idx, rec in enumerate(dataset):
        plan = build_joint_plan(rec, config)
        ws = FilterWorkspace.for_shape(rec.T, config.n_particles, config.p)
        rng = root.substream(ROLE_REFERENCE, idx)
        m_i = float(rec.x @ delta)
        for _ in range(n_draws):
            ws, _n = _run_joint(plan, m_i, config.n_particles, rng, ws, want_mean=False)
            gamma = np.einsum("tj,tj->t", plan.z, ws.traj)
            out[idx, int(encoder(gamma, rec))] += 1
    return out / n_draws


# ---------------------------------------------------------------------------
# chain file serialization


def _fmt(v: float) -> str:
    return repr(float(v))


def write_run_stores(stores: list[ChainStore], run_dir: str | Path):
    """Write the tabular chain outputs of a run (without the manifest).

    Draw indices are global and chain-major: chain c's j-th retained
    draw has index c * n_retained + j.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    pids = stores[0].patient_ids
    cov_names = stores[0].covariate_names
    per_chain = [s.n_retained for s in stores]
    offsets = np.concatenate([[0], np.cumsum(per_chain)])

    with open(run_dir / "delta.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["draw"] + cov_names)
        for c, store in enumerate(stores):
            for j in range(store.n_retained):
                w.writerow([offsets[c] + j] + [_fmt(v) for v in store.delta[j]])

    with open(run_dir / "patterns.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["draw", "patient_id", "R"])
        for c, store in enumerate(stores):
            for j in range(store.n_retained):
                for i, pid in enumerate(pids):
                    w.writerow([offsets[c] + j, pid, int(store.patterns[j, i])])

    with open(run_dir / "partition.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["draw", "patient_id", "label"])
        for c, store in enumerate(stores):
            for j in range(store.n_retained):
                for i, pid in enumerate(pids):
                    w.writerow([offsets[c] + j, pid, int(store.labels[j, i])])

    with open(run_dir / "atoms.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["draw", "cluster", "pattern", "xi"])
        for c, store in enumerate(stores):
            for j in range(store.n_retained):
                A = store.atoms[j]
                for h in range(A.shape[0]):
                    for ell in range(A.shape[1]):
                        w.writerow([offsets[c] + j, h, ell, _fmt(A[h, ell])])

    if any(store.theta_snapshots and store.snapshot_draws for store in stores):
        theta_dir = run_dir / "theta"
        theta_dir.mkdir(exist_ok=True)
        for pid in pids:
            blocks = []
            for store in stores:
                blocks.extend(store.theta_snapshots.get(pid, []))
            if not blocks:
                continue
            T, p = blocks[0].shape
            with open(theta_dir / f"{pid}.bin", "wb") as fh:
                fh.write(struct.pack("<4sIII", THETA_MAGIC, T, p, len(blocks)))
                for block in blocks:
                    fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def read_theta_file(path: str | Path) -> np.ndarray:
    """Read a theta snapshot file; returns (n_snapshots, T, p)."""
    with open(path, "rb") as fh:
        magic, T, p, count = struct.unpack("<4sIII", fh.read(16))
        if magic != THETA_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(count, T, p)
