"""Posterior post-processing of saved chain output.

Turns retained draws into the quantities actually reported: per-subject
pattern probabilities, the posterior similarity matrix, a point estimate
of the partition (searched over the sampled partitions), posterior mean
pattern probabilities per subject, a cross-entropy score against known
truth, and per-treatment effect tables from trajectory snapshots.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model_core import Dataset, design_matrix
from .sampler import read_theta_file

__all__ = [
    "RunData",
    "load_run",
    "pattern_posterior",
    "similarity",
    "binder_loss",
    "vi_distance",
    "point_partition",
    "cross_entropy",
    "xi_posterior_mean",
    "split_rhat",
    "treatment_effects",
]


@dataclass
class RunData:
    """Everything read back from a run directory."""

    patient_ids: list[str]
    covariate_names: list[str]
    delta: np.ndarray            # (n_draws, d)
    patterns: np.ndarray         # (n_draws, N)
    labels: np.ndarray           # (n_draws, N)
    atoms: list                  # per draw (H, L)
    n_patterns: int
    draws_per_chain: list[int]
    meta: dict = field(default_factory=dict)
    theta: dict = field(default_factory=dict)          # pid -> (n_snap, T, p)
    snapshot_draws: list = field(default_factory=list)

    @property
    def n_draws(self) -> int:
        return self.patterns.shape[0]


def _read_long(path: Path, value_col: str):
    draws: dict[int, dict[str, int]] = {}
    ids: list[str] = []
    seen = set()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d = int(row["draw"])
            pid = row["patient_id"]
            draws.setdefault(d, {})[pid] = int(row[value_col])
            if pid not in seen:
                seen.add(pid)
                ids.append(pid)
    n = len(draws)
    mat = np.empty((n, len(ids)), dtype=np.int64)
    for d in range(n):
        for i, pid in enumerate(ids):
            mat[d, i] = draws[d][pid]
    return ids, mat


def load_run(run_dir: str | Path) -> RunData:
    run_dir = Path(run_dir)
    meta = {}
    meta_path = run_dir / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    ids, patterns = _read_long(run_dir / "patterns.csv", "R")
    ids2, labels = _read_long(run_dir / "partition.csv", "label")
    if ids2 != ids:
        raise ValueError("patterns.csv and partition.csv disagree on patients")

    with open(run_dir / "delta.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cov_names = header[1:]
        delta = np.array([[float(v) for v in row[1:]] for row in reader])

    atoms_by_draw: dict[int, dict[int, dict[int, float]]] = {}
    n_patterns = 0
    with open(run_dir / "atoms.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            d, h, ell = int(row["draw"]), int(row["cluster"]), int(row["pattern"])
            atoms_by_draw.setdefault(d, {}).setdefault(h, {})[ell] = float(row["xi"])
            n_patterns = max(n_patterns, ell + 1)
    atoms = []
    for d in range(patterns.shape[0]):
        clusters = atoms_by_draw.get(d, {})
        A = np.zeros((len(clusters), n_patterns))
        for h, row in clusters.items():
            for ell, v in row.items():
                A[h, ell] = v
        atoms.append(A)

    n_patterns = meta.get("n_patterns", max(n_patterns, int(patterns.max()) + 1))
    draws_per_chain = meta.get("draws_per_chain") or [patterns.shape[0]]
    theta = {}
    theta_dir = run_dir / "theta"
    if theta_dir.is_dir():
        for path in sorted(theta_dir.glob("*.bin")):
            theta[path.stem] = read_theta_file(path)
    return RunData(patient_ids=ids, covariate_names=cov_names, delta=delta,
                   patterns=patterns, labels=labels, atoms=atoms,
                   n_patterns=n_patterns, draws_per_chain=draws_per_chain,
                   meta=meta, theta=theta,
                   snapshot_draws=meta.get("snapshot_draws", []))


def pattern_posterior(patterns: np.ndarray, n_patterns: int) -> np.ndarray:
    """Empirical pattern frequencies per subject, pooled over all draws."""
    n_draws, N = patterns.shape
    out = np.zeros((N, n_patterns))
    for i in range(N):
        out[i] = np.bincount(patterns[:, i], minlength=n_patterns) / n_draws
    return out


def similarity(labels: np.ndarray) -> np.ndarray:
    """Co-clustering frequencies; symmetric with unit diagonal."""
    n_draws, N = labels.shape
    out = np.zeros((N, N))
    for d in range(n_draws):
        lab = labels[d]
        out += lab[:, None] == lab[None, :]
    out /= n_draws
    return out


def binder_loss(partition: np.ndarray, sim: np.ndarray) -> float:
    """Sum over unordered pairs of |co-membership - similarity|."""
    same = partition[:, None] == partition[None, :]
    diff = np.abs(same.astype(float) - sim)
    return float(np.triu(diff, k=1).sum())


def vi_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Variation of information between two partitions (bits)."""
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    pij = table / n
    pi = pij.sum(axis=1)
    pj = pij.sum(axis=0)
    h_a = -np.sum(pi * np.log2(pi, where=pi > 0, out=np.zeros_like(pi)))
    h_b = -np.sum(pj * np.log2(pj, where=pj > 0, out=np.zeros_like(pj)))
    nz = pij > 0
    mi = float(np.sum(pij[nz] * np.log2(pij[nz] / np.outer(pi, pj)[nz])))
    return h_a + h_b - 2.0 * mi


def point_partition(sim: np.ndarray, labels: np.ndarray, loss: str = "binder") -> np.ndarray:
    """Sampled partition minimizing the chosen loss; ties keep the
    earliest draw.  Binder scores against the similarity matrix; VI is
    the average distance to all sampled partitions."""
    if loss not in ("binder", "vi"):
        raise ValueError("loss must be 'binder' or 'vi'")
    n_draws = labels.shape[0]
    # scan unique partitions only, keyed by their canonical relabeling
    first_idx: dict[tuple, int] = {}
    for d in range(n_draws):
        key = tuple(np.unique(labels[d], return_inverse=True)[1].tolist())
        first_idx.setdefault(key, d)
    candidates = sorted(first_idx.values())
    best_d, best_score = None, math.inf
    for d in candidates:
        cand = labels[d]
        if loss == "binder":
            score = binder_loss(cand, sim)
        else:
            score = float(np.mean([vi_distance(cand, labels[j]) for j in range(n_draws)]))
        if score < best_score - 1e-12:
            best_score, best_d = score, d
    return labels[best_d].copy()


def cross_entropy(posterior: np.ndarray, truth: np.ndarray, n_draws: int):
    """Mean log2 posterior probability of the true patterns.

    Probabilities are floored at 1/(n_draws + 1) so patterns never seen
    in the chain score finitely.  0 is perfect; more negative is worse.
    """
    floor = 1.0 / (n_draws + 1)
    probs = np.maximum(posterior[np.arange(len(truth)), truth], floor)
    return float(np.mean(np.log2(probs)))


def xi_posterior_mean(labels: np.ndarray, atoms: list) -> np.ndarray:
    """Posterior mean of each subject's own pattern-probability vector."""
    n_draws, N = labels.shape
    L = atoms[0].shape[1] if atoms and atoms[0].size else 0
    out = np.zeros((N, L))
    for d in range(n_draws):
        out += atoms[d][labels[d]]
    return out / n_draws


def split_rhat(draws_by_chain: list[np.ndarray]) -> float:
    """Split potential-scale-reduction factor for one scalar quantity."""
    halves = []
    for ch in draws_by_chain:
        ch = np.asarray(ch, dtype=float)
        half = ch.size // 2
        if half >= 2:
            halves.extend([ch[:half], ch[half:2 * half]])
    if len(halves) < 2:
        return float("nan")
    m = len(halves)
    n = min(h.size for h in halves)
    halves = [h[:n] for h in halves]
    means = np.array([h.mean() for h in halves])
    variances = np.array([h.var(ddof=1) for h in halves])
    W = variances.mean()
    B = n * means.var(ddof=1)
    if W <= 0:
        return 1.0
    return float(math.sqrt((n - 1) / n + B / (n * W)))


# ---------------------------------------------------------------------------
# treatment-effect slices


def _slices(record):
    changes = list(record.treatment_changes) + [record.T + 1]
    for k in range(len(changes) - 1):
        yield changes[k], changes[k + 1] - 1


def treatment_effects(dataset: Dataset, run: RunData, window: int = 90,
                      cluster_labels: np.ndarray | None = None) -> list[dict]:
    """Per-treatment averages of slice summaries over trajectory snapshots.

    For each snapshot draw and each treatment tenure slice: the mean
    dynamic score over the window ending at the slice start, the mean
    over the slice, and OLS intercept/slope of the score on days under
    treatment.  Length-1 slices have no slope and are excluded (counted).
    Aggregates over all subjects and, when ``cluster_labels`` is given,
    per cluster in decreasing size order.
    """
    if not run.theta:
        raise ValueError("run has no trajectory snapshots; refit with snapshots enabled")
    recs = {rec.id: rec for rec in dataset}
    rows_acc: dict[tuple[str, str], dict] = {}

    def accumulate(group: str, treatment: str, t_pre, t_post, a_hat, b_hat):
        key = (group, treatment)
        acc = rows_acc.setdefault(key, dict(t_pre=0.0, t_post=0.0, a=0.0, b=0.0,
                                            n=0, pre_lt_post=0, b_neg=0,
                                            slices=set(), excluded=set()))
        acc["t_pre"] += t_pre
        acc["t_post"] += t_post
        acc["a"] += a_hat
        acc["b"] += b_hat
        acc["n"] += 1
        acc["pre_lt_post"] += int(t_pre < t_post)
        acc["b_neg"] += int(b_hat < 0)

    cluster_of: dict[str, str] = {}
    if cluster_labels is not None:
        sizes = {}
        for lab in cluster_labels:
            sizes[lab] = sizes.get(lab, 0) + 1
        order = sorted(sizes, key=lambda lab: (-sizes[lab], lab))
        rank = {lab: i + 1 for i, lab in enumerate(order)}
        for pid, lab in zip(run.patient_ids, cluster_labels):
            cluster_of[pid] = f"cluster {rank[lab]}"

    for pid, snaps in run.theta.items():
        rec = recs.get(pid)
        if rec is None:
            raise ValueError(f"snapshot for unknown patient {pid}")
        Z = design_matrix(rec, snaps.shape[2])
        treatments = rec.treatment_id or ("T0",) * rec.T
        groups = ["all"] + ([cluster_of[pid]] if cluster_of else [])
        for start, end in _slices(rec):
            label = treatments[start - 1]
            slice_key = (pid, start)
            length = end - start + 1
            delta_days = np.arange(length, dtype=float)  # days under treatment
            for s in range(snaps.shape[0]):
                gamma = np.einsum("tj,tj->t", Z, snaps[s])
                pre = gamma[max(start - window, 1) - 1:start]
                post = gamma[start - 1:end]
                t_pre, t_post = float(pre.mean()), float(post.mean())
                if length < 2:
                    for g in groups:
                        rows_acc.setdefault((g, label), dict(
                            t_pre=0.0, t_post=0.0, a=0.0, b=0.0, n=0,
                            pre_lt_post=0, b_neg=0, slices=set(), excluded=set()))
                        rows_acc[(g, label)]["excluded"].add(slice_key)
                    continue
                x = delta_days
                yv = gamma[start - 1:end]
                xm, ym = x.mean(), yv.mean()
                b_hat = float(np.dot(x - xm, yv - ym) / np.dot(x - xm, x - xm))
                a_hat = float(ym - b_hat * xm)
                for g in groups:
                    accumulate(g, label, t_pre, t_post, a_hat, b_hat)
                    rows_acc[(g, label)]["slices"].add(slice_key)

    rows = []
    for (group, treatment) in sorted(rows_acc):
        acc = rows_acc[(group, treatment)]
        n = acc["n"]
        rows.append({
            "group": group,
            "treatment": treatment,
            "t_pre": acc["t_pre"] / n if n else float("nan"),
            "t_post": acc["t_post"] / n if n else float("nan"),
            "intercept": acc["a"] / n if n else float("nan"),
            "slope": acc["b"] / n if n else float("nan"),
            "prop_pre_lt_post": acc["pre_lt_post"] / n if n else float("nan"),
            "prop_slope_neg": acc["b_neg"] / n if n else float("nan"),
            "n_slices": len(acc["slices"]),
            "n_excluded": len(acc["excluded"]),
        })
    return rows


TREATMENT_EFFECT_COLUMNS = ["group", "treatment", "t_pre", "t_post", "intercept",
                            "slope", "prop_pre_lt_post", "prop_slope_neg",
                            "n_slices", "n_excluded"]
