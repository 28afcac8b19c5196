"""Gumbel-softmax relaxation of per-task skeleton selection.

Rows index skeletons in canonical order, columns index tasks. The logits
play the role of log-probabilities; they start at zero (uniform prior).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mtnas import numerics as nx
from mtnas.errors import ArgumentError, ShapeError
from mtnas.numerics import Tensor
from mtnas.search_space import Skeleton


@dataclass
class SkeletonDistribution:
    skeletons: tuple[Skeleton, ...]
    logits: Tensor
    tau0: float = 5.0
    tau_min: float = 0.1
    tau: float = field(default=None)

    def __post_init__(self):
        if self.logits.shape != (len(self.skeletons), self.logits.shape[1]):
            raise ShapeError("logits rows must match the skeleton list")
        if self.tau is None:
            self.tau = self.tau0

    @classmethod
    def uniform(cls, skeletons: Sequence[Skeleton], n_tasks: int, tau0: float = 5.0,
                tau_min: float = 0.1) -> "SkeletonDistribution":
        return cls(tuple(skeletons), nx.parameter(np.zeros((len(skeletons), n_tasks))), tau0, tau_min)

    @property
    def n_tasks(self) -> int:
        return self.logits.shape[1]

    def probs(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(axis=0, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=0, keepdims=True)

    def entropy(self) -> np.ndarray:
        """Per-task entropy (nats) of softmax(logits) over skeletons."""
        p = self.probs()
        return -(p * np.log(np.where(p > 0, p, 1.0))).sum(axis=0)


def gumbel_soft_select(dist: SkeletonDistribution, rng: np.random.Generator | None = None,
                       noise: np.ndarray | None = None) -> Tensor:
    """Relaxed selection matrix softmax((logits + g) / tau) over the skeleton axis.

    `g` is fresh Gumbel(0, 1) noise per entry unless `noise` is given.
    """
    if dist.tau <= 0:
        raise ArgumentError(f"temperature must be positive, got {dist.tau}")
    if noise is None:
        if rng is None:
            raise ArgumentError("gumbel_soft_select needs an rng or explicit noise")
        noise = rng.gumbel(size=dist.logits.shape)
    return nx.softmax(nx.scale(nx.add(dist.logits, noise), 1.0 / dist.tau), axis=0)


def uniform_select(n_skeletons: int, n_tasks: int, rng: np.random.Generator) -> Tensor:
    """One-hot selection with one uniformly drawn skeleton per task (ablation mode)."""
    u = np.zeros((n_skeletons, n_tasks))
    u[rng.integers(0, n_skeletons, size=n_tasks), np.arange(n_tasks)] = 1.0
    return Tensor(u)


def anneal_tau(step: int, total_steps: int, dist: SkeletonDistribution) -> float:
    """Exponential decay from tau0 at step 0 to tau_min at the last step."""
    if total_steps <= 0:
        return dist.tau0
    frac = min(max(step / total_steps, 0.0), 1.0)
    return max(dist.tau_min, dist.tau0 * (dist.tau_min / dist.tau0) ** frac)


def loss_matrix(rows: Sequence[Sequence[Tensor]]) -> Tensor:
    """Stack scalar losses into an (|S|, |T|) tensor."""
    flat = [nx.reshape(l, (1,)) for row in rows for l in row]
    return nx.reshape(nx.concat(flat, axis=0), (len(rows), len(rows[0])))


def aggregate_loss(losses: Tensor, u: Tensor, weights: Sequence[float]) -> Tensor:
    """sum_k sum_s weight_k * u[s, k] * losses[s, k]."""
    w = np.asarray(weights, dtype=np.float64)
    if losses.shape != u.shape or losses.ndim != 2 or w.shape != (losses.shape[1],):
        raise ShapeError(f"loss matrix {losses.shape}, selection {u.shape}, weights {w.shape} disagree")
    if np.any(w <= 0):
        raise ArgumentError("task weights must be positive")
    return nx.sum(nx.mul(nx.mul(u, losses), w[None, :]))


def discretize(dist: SkeletonDistribution) -> tuple[np.ndarray, dict[int, Skeleton]]:
    """Column-wise argmax of the logits; ties go to the lowest skeleton index."""
    idx = np.argmax(dist.logits.data, axis=0)
    u = np.zeros(dist.logits.shape)
    u[idx, np.arange(dist.n_tasks)] = 1.0
    return u, {k + 1: dist.skeletons[i] for k, i in enumerate(idx)}

