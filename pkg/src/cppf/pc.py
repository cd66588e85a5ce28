"""Prototype clustering: learnable prototypes, self-adaptive centers and the sampled prototype queue."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DimensionError,
    Tensor,
    concat_rows,
    cosine_sim_matrix,
    max_rows,
    mean,
    min_rows,
    stop_gradient,
    sub,
)


@dataclass
class PrototypeBank:
    vectors: Tensor

    @classmethod
    def random(cls, n: int, dim: int, rng: np.random.Generator, name: str = "prototypes") -> PrototypeBank:
        return cls(Tensor(rng.standard_normal((n, dim)), requires_grad=True, name=name))

    @property
    def count(self) -> int:
        return self.vectors.shape[0]


@dataclass
class ClusterCenters:
    vectors: Tensor

    @classmethod
    def random(cls, n: int, dim: int, rng: np.random.Generator) -> ClusterCenters:
        return cls(Tensor(rng.standard_normal((n, dim)), requires_grad=True, name="centers"))

    @property
    def count(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class ClusterStats:
    counts: np.ndarray  # (n_c,)
    means: np.ndarray  # (n_c, d)
    variances: np.ndarray  # (n_c, d), population variance


@dataclass
class PrototypeQueue:
    vectors: Tensor
    source_phase: int = -1

    @property
    def count(self) -> int:
        return self.vectors.shape[0]


def _as_array(x) -> np.ndarray:
    if isinstance(x, (PrototypeBank, ClusterCenters, PrototypeQueue)):
        x = x.vectors
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _as_tensor(x) -> Tensor:
    if isinstance(x, (PrototypeBank, ClusterCenters, PrototypeQueue)):
        return x.vectors
    return x if isinstance(x, Tensor) else Tensor(x)


def clustering_loss(protos, centers) -> Tensor:
    """Mean cosine distance from each prototype to its nearest center."""
    p, c = _as_tensor(protos), _as_tensor(centers)
    dist = sub(1.0, cosine_sim_matrix(p, c))
    return mean(min_rows(dist))


def assign(protos, centers) -> np.ndarray:
    """Index of the nearest center per prototype (ties go to the lowest index)."""
    cos = cosine_sim_matrix(Tensor(_as_array(protos)), Tensor(_as_array(centers))).data
    return np.argmax(cos, axis=1)


def cluster_stats(protos, centers, assignment: np.ndarray | None = None) -> ClusterStats:
    p, c = _as_array(protos), _as_array(centers)
    if assignment is None:
        assignment = assign(p, c)
    n_c, d = c.shape[0], p.shape[1]
    counts = np.bincount(assignment, minlength=n_c)
    means = np.zeros((n_c, d))
    variances = np.zeros((n_c, d))
    for j in np.flatnonzero(counts):
        members = p[assignment == j]
        means[j] = members.mean(axis=0)
        variances[j] = members.var(axis=0)
    return ClusterStats(counts, means, variances)


def refresh_queue(
    prev_centers,
    prev_stats: ClusterStats | None,
    rng: np.random.Generator,
    dim: int = 0,
    source_phase: int = -1,
) -> PrototypeQueue:
    """Draw ``count_i`` samples from ``N(center_i, diag(var_i))`` for every non-empty cluster."""
    if prev_centers is None or prev_stats is None:
        return PrototypeQueue(Tensor(np.zeros((0, dim))), source_phase)
    c = _as_array(prev_centers)
    draws = []
    for j in np.flatnonzero(prev_stats.counts):
        n = int(prev_stats.counts[j])
        std = np.sqrt(prev_stats.variances[j])
        draws.append(c[j] + std * rng.standard_normal((n, c.shape[1])))
    vectors = np.concatenate(draws, axis=0) if draws else np.zeros((0, c.shape[1]))
    return PrototypeQueue(Tensor(vectors), source_phase)


def extended_prototypes(bank, queue: PrototypeQueue | None) -> Tensor:
    """Learnable bank followed by the frozen queue rows."""
    b = _as_tensor(bank)
    if queue is None or queue.count == 0:
        return b
    if queue.vectors.shape[1] != b.shape[1]:
        raise DimensionError(f"queue width {queue.vectors.shape[1]} != bank width {b.shape[1]}")
    return concat_rows([b, stop_gradient(queue.vectors)])


def prototype_attraction(features: Tensor, bank) -> Tensor:
    """Mean cosine distance from each feature to its nearest prototype."""
    return sub(1.0, mean(max_rows(cosine_sim_matrix(features, _as_tensor(bank)))))

