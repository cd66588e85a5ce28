"""Two-view self-supervised objectives: NT-Xent and a light SwAV-style swapped prediction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DimensionError,
    DomainError,
    ParameterError,
    Tensor,
    add,
    concat_rows,
    cosine_sim_matrix,
    cross_entropy_rows,
    log_softmax_rows,
    mean,
    mul,
    softmax_rows,
    sum_rows,
)

DEFAULT_TEMPERATURE = {"ntxent": 0.5, "swav_lite": 0.1}


class InsufficientBatchError(ValueError):
    pass


@dataclass(frozen=True)
class SslConfig:
    objective: str = "swav_lite"
    temperature: float | None = None
    sinkhorn_iters: int = 3
    sinkhorn_eps: float = 0.05

    def __post_init__(self):
        if self.objective not in DEFAULT_TEMPERATURE:
            raise ParameterError(f"unknown SSL objective {self.objective!r}")
        if self.temperature is None:
            object.__setattr__(self, "temperature", DEFAULT_TEMPERATURE[self.objective])
        if not self.temperature > 0:
            raise ParameterError("SSL temperature must be positive")
        if self.sinkhorn_iters < 1:
            raise ParameterError("sinkhorn_iters must be >= 1")
        if not self.sinkhorn_eps > 0:
            raise ParameterError("sinkhorn_eps must be positive")


def ntxent_loss(z1: Tensor, z2: Tensor, temperature: float) -> Tensor:
    """Normalized-temperature cross entropy over ``2N`` embeddings.

    Row ``i`` of one view is the positive for row ``i`` of the other view; all
    remaining ``2N - 2`` rows act as negatives.
    """
    if z1.shape != z2.shape:
        raise DimensionError(f"views differ in shape: {z1.shape} vs {z2.shape}")
    n = z1.shape[0]
    if n < 2:
        raise InsufficientBatchError("NT-Xent needs at least 2 samples per view")
    z = concat_rows([z1, z2])
    sim = cosine_sim_matrix(z, z)
    # self-similarity excluded; exp(-1e9 / t) underflows to exactly 0
    mask = np.zeros((2 * n, 2 * n))
    np.fill_diagonal(mask, -1e9)
    logp = log_softmax_rows(add(sim, Tensor(mask)), temperature)
    positives = np.zeros((2 * n, 2 * n))
    idx = np.arange(2 * n)
    positives[idx, (idx + n) % (2 * n)] = 1.0
    return mul(mean(sum_rows(mul(logp, Tensor(positives)))), -1.0)


def sinkhorn(scores: Tensor, iters: int = 3, eps: float = 0.05) -> Tensor:
    """Balanced transport plan for ``N×K`` scores.

    Returns a stop-gradient ``N×K`` plan whose rows sum to ``1/N`` exactly and
    whose columns sum to approximately ``1/K``.
    """
    s = np.asarray(scores.data, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise DomainError("sinkhorn: non-finite scores")
    if iters < 1 or not eps > 0:
        raise ParameterError("sinkhorn needs iters >= 1 and eps > 0")
    n, k = s.shape
    q = np.exp((s - s.max()) / eps)
    q /= q.sum()
    for _ in range(iters):
        q /= q.sum(axis=0, keepdims=True)
        q /= k
        q /= q.sum(axis=1, keepdims=True)
        q /= n
    return Tensor(q)


def sinkhorn_codes(scores: Tensor, iters: int = 3, eps: float = 0.05) -> Tensor:
    """Sinkhorn plan rescaled so each row is a distribution over prototypes."""
    plan = sinkhorn(scores, iters, eps)
    return Tensor(plan.data * scores.shape[0])


def _codes(scores: Tensor, prototypes: Tensor, queue: Tensor | None, iters: int, eps: float) -> Tensor:
    if queue is None or queue.shape[0] == 0:
        return sinkhorn_codes(scores, iters, eps)
    n = scores.shape[0]
    extra = cosine_sim_matrix(Tensor(queue.data), Tensor(prototypes.data)).data
    plan = sinkhorn(Tensor(np.concatenate([scores.data, extra], axis=0)), iters, eps)
    return Tensor(plan.data[:n] * (n + queue.shape[0]))


def swav_lite_loss(
    z1: Tensor,
    z2: Tensor,
    prototypes: Tensor,
    temperature: float = 0.1,
    iters: int = 3,
    eps: float = 0.05,
    queue: Tensor | None = None,
) -> Tensor:
    """Symmetrized swapped prediction: codes of one view supervise the other.

    ``queue`` rows, when given, join each view's batch as extra samples in the
    Sinkhorn step only; their codes are discarded.
    """
    if prototypes.shape[0] < 2:
        raise ParameterError("swav_lite needs at least 2 prototypes")
    if z1.shape != z2.shape:
        raise DimensionError(f"views differ in shape: {z1.shape} vs {z2.shape}")
    s1 = cosine_sim_matrix(z1, prototypes)
    s2 = cosine_sim_matrix(z2, prototypes)
    q1 = _codes(s1, prototypes, queue, iters, eps)
    q2 = _codes(s2, prototypes, queue, iters, eps)
    p1 = softmax_rows(s1, temperature)
    p2 = softmax_rows(s2, temperature)
    return mul(add(cross_entropy_rows(q1, p2), cross_entropy_rows(q2, p1)), 0.5)


def ssl_loss(config: SslConfig, z1: Tensor, z2: Tensor, prototypes: Tensor | None = None) -> Tensor:
    if config.objective == "ntxent":
        return ntxent_loss(z1, z2, config.temperature)
    if prototypes is None:
        raise ParameterError("swav_lite objective needs prototypes")
    return swav_lite_loss(z1, z2, prototypes, config.temperature, config.sinkhorn_iters, config.sinkhorn_eps)


def marginal_deviation(plan: np.ndarray) -> float:
    """Largest absolute deviation of a plan's marginals from uniform."""
    n, k = plan.shape
    return max(
        float(np.max(np.abs(plan.sum(axis=1) - 1.0 / n))),
        float(np.max(np.abs(plan.sum(axis=0) - 1.0 / k))),
    )

