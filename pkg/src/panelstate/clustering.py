"""Pitman-Yor partition bookkeeping and pattern-probability atoms.

Subjects are clustered by sharing an atom: an L-vector of pattern
probabilities.  A negative discount with concentration a multiple of it
caps the number of occupied clusters; the registry enforces that cap as
a hard invariant after every mutation.  Cluster labels are compacted on
removal, so identity across sweeps is carried only by co-membership.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .stochastics import sample_dirichlet

__all__ = [
    "ClusterRegistry",
    "allocation_weights",
    "predictive_pattern_probs",
    "predictive_pattern_prob",
    "conditional_allocation",
    "update_atom",
    "birth_atom",
]

log = logging.getLogger(__name__)


@dataclass
class ClusterRegistry:
    """Occupied atoms, their occupancy counts, and subject assignments."""

    n_patterns: int
    max_clusters: float = float("inf")
    atoms: list = field(default_factory=list)
    counts: list = field(default_factory=list)
    assignments: dict = field(default_factory=dict)
    fallback_allocations: int = 0

    @property
    def H(self) -> int:
        return len(self.atoms)

    @property
    def N(self) -> int:
        return len(self.assignments)

    def add(self, subject, h: int, atom: np.ndarray | None = None):
        """Assign ``subject`` to cluster ``h``; ``h == H`` opens a new
        cluster and requires its atom."""
        if subject in self.assignments:
            raise ValueError(f"subject {subject} already assigned")
        if h == self.H:
            if atom is None:
                raise ValueError("new cluster needs an atom")
            atom = np.asarray(atom, dtype=float)
            if atom.shape != (self.n_patterns,) or abs(atom.sum() - 1.0) > 1e-9:
                raise ValueError("atom must lie on the pattern simplex")
            self.atoms.append(atom)
            self.counts.append(0)
        elif not 0 <= h < self.H:
            raise IndexError(f"cluster {h} does not exist")
        self.assignments[subject] = h
        self.counts[h] += 1
        if self.H > self.max_clusters:
            raise RuntimeError(
                f"occupied clusters ({self.H}) exceed the hard cap {self.max_clusters}")

    def remove(self, subject) -> int:
        """Detach ``subject``; empty clusters vanish and labels compact."""
        h = self.assignments.pop(subject)
        self.counts[h] -= 1
        if self.counts[h] == 0:
            del self.counts[h]
            del self.atoms[h]
            for s, lab in self.assignments.items():
                if lab > h:
                    self.assignments[s] = lab - 1
        return h

    def check(self):
        """Validate the counts/assignments correspondence (for tests)."""
        tally = [0] * self.H
        for h in self.assignments.values():
            tally[h] += 1
        assert tally == self.counts, "counts diverged from assignments"
        assert all(c > 0 for c in self.counts), "empty cluster retained"
        for atom in self.atoms:
            assert abs(atom.sum() - 1.0) < 1e-9 and np.all(atom >= 0)

    def atom_matrix(self) -> np.ndarray:
        if not self.atoms:
            return np.zeros((0, self.n_patterns))
        return np.asarray(self.atoms)


def allocation_weights(counts, n_total: int, M: float, sigma: float):
    """Cluster allocation weights for one subject given the others.

    ``counts`` are the occupancies with the subject removed and
    ``n_total`` the cohort size including it.  Returns ``(w, w_new)``
    with ``w_h = (n_h - sigma) / (n_total + M - 1)`` and the new-cluster
    mass ``(M + sigma * H) / (n_total + M - 1)``; the weights sum to 1.
    """
    counts = np.asarray(counts, dtype=float)
    if n_total < 1:
        raise ValueError("n_total must be >= 1")
    if counts.sum() != n_total - 1:
        raise ValueError("counts must sum to n_total - 1")
    denom = n_total + M - 1.0
    w = (counts - sigma) / denom
    w_new = (M + sigma * counts.size) / denom
    if w_new < -1e-12:
        raise AssertionError("negative new-cluster weight; invalid (M, sigma)")
    return w, max(w_new, 0.0)


def predictive_pattern_probs(registry: ClusterRegistry, n_total: int, M: float,
                             sigma: float, dirichlet_a: np.ndarray) -> np.ndarray:
    """Predictive probability of each pattern for a subject to be placed.

    Mixture of the occupied atoms under their allocation weights plus
    the base-measure mean under the new-cluster weight.
    """
    a = np.asarray(dirichlet_a, dtype=float)
    w, w_new = allocation_weights(registry.counts, n_total, M, sigma)
    base = a / a.sum()
    if registry.H == 0:
        return w_new * base
    return registry.atom_matrix().T @ w + w_new * base


def predictive_pattern_prob(registry: ClusterRegistry, n_total: int, M: float,
                            sigma: float, dirichlet_a, ell: int) -> float:
    return float(predictive_pattern_probs(registry, n_total, M, sigma, dirichlet_a)[ell])


def conditional_allocation(registry: ClusterRegistry, n_total: int, M: float,
                           sigma: float, dirichlet_a, ell: int,
                           rng: np.random.Generator):
    """Draw a cluster for a subject with pattern ``ell``.

    Occupied cluster h gets mass w_h * atom_h[ell]; a new cluster gets
    the new-cluster weight times the base-measure mean of the pattern.
    Returns ``(h, is_new)`` with ``h == H`` meaning a fresh cluster.
    The degenerate all-zero-mass case falls back to the largest cluster
    (logged and counted) rather than aborting a long chain.
    """
    a = np.asarray(dirichlet_a, dtype=float)
    w, w_new = allocation_weights(registry.counts, n_total, M, sigma)
    mass = np.empty(registry.H + 1)
    if registry.H:
        mass[:-1] = w * registry.atom_matrix()[:, ell]
    mass[-1] = w_new * a[ell] / a.sum()
    total = mass.sum()
    if total <= 0.0:
        log.warning("zero allocation mass for pattern %d; assigning to largest cluster", ell)
        registry.fallback_allocations += 1
        return int(np.argmax(registry.counts)), False
    u = rng.random() * total
    h = int(np.searchsorted(np.cumsum(mass), u, side="right"))
    h = min(h, registry.H)
    return h, h == registry.H


def update_atom(pattern_counts, dirichlet_a, rng: np.random.Generator) -> np.ndarray:
    """Conjugate refresh of one atom given its members' pattern counts."""
    counts = np.asarray(pattern_counts, dtype=float)
    a = np.asarray(dirichlet_a, dtype=float)
    return sample_dirichlet(a + counts, rng)


def birth_atom(ell: int, dirichlet_a, rng: np.random.Generator) -> np.ndarray:
    """Atom for a fresh singleton cluster whose member shows pattern ``ell``."""
    a = np.asarray(dirichlet_a, dtype=float).copy()
    a[ell] += 1.0
    return sample_dirichlet(a, rng)
