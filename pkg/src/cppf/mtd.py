"""Multi-teacher distillation: past-teacher feature distillation and current-teacher relation distillation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import (
    DimensionError,
    ParameterError,
    Tensor,
    add,
    cosine_sim_matrix,
    cross_entropy_rows,
    mean,
    mul,
    rowwise_cosine,
    softmax_rows,
    stop_gradient,
    sub,
)


@dataclass(frozen=True)
class GammaSchedule:
    """Cosine ramp of the current-teacher weight from ``initial`` to ``final`` within a phase."""

    initial: float = 0.01
    final: float = 1.0

    def __call__(self, epoch: int, epochs: int) -> float:
        if epochs <= 1:
            return self.final
        if epoch <= 0:
            return self.initial
        if epoch >= epochs - 1:
            return self.final
        progress = epoch / (epochs - 1)
        return self.final - (self.final - self.initial) * 0.5 * (1.0 + math.cos(math.pi * progress))


def past_distill_loss(f_student: Tensor, f_past: Tensor, predictor: Callable[[Tensor], Tensor] | None) -> Tensor:
    """Mean cosine distance between frozen teacher features and predicted student features."""
    if f_student.shape != f_past.shape:
        raise DimensionError(f"student {f_student.shape} vs past teacher {f_past.shape}")
    mapped = predictor(f_student) if predictor is not None else f_student
    return sub(1.0, mean(rowwise_cosine(stop_gradient(f_past), mapped)))


def relation_matrix(z_view1: Tensor, z_view2: Tensor, tau: float, keep_diagonal: bool = True) -> Tensor:
    """Row-softmax of cross-view cosine similarities divided by ``tau``."""
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    if z_view1.shape != z_view2.shape:
        raise DimensionError(f"views differ in shape: {z_view1.shape} vs {z_view2.shape}")
    sim = cosine_sim_matrix(z_view1, z_view2)
    if not keep_diagonal:
        mask = np.zeros(sim.shape)
        np.fill_diagonal(mask, -1e9)
        sim = add(sim, Tensor(mask))
    return softmax_rows(sim, tau)


def relation_distill_loss(
    s1: Tensor,
    s2: Tensor,
    t1: Tensor,
    t2: Tensor,
    tau: float,
    symmetric: bool = True,
    keep_diagonal: bool = True,
) -> Tensor:
    """Cross entropy between teacher and student cross-view relation distributions."""
    target = stop_gradient(relation_matrix(stop_gradient(t1), stop_gradient(t2), tau, keep_diagonal))
    loss = cross_entropy_rows(target, relation_matrix(s1, s2, tau, keep_diagonal))
    if not symmetric:
        return loss
    target_rev = stop_gradient(relation_matrix(stop_gradient(t2), stop_gradient(t1), tau, keep_diagonal))
    loss_rev = cross_entropy_rows(target_rev, relation_matrix(s2, s1, tau, keep_diagonal))
    return mul(add(loss, loss_rev), 0.5)


def combined_distill_loss(pa_loss, cu_loss, gamma: float) -> Tensor:
    return add(pa_loss, mul(cu_loss, gamma))


def row_entropy(p: np.ndarray) -> float:
    """Mean row entropy, with the same clamp as the cross entropy."""
    return float(np.mean(-np.sum(p * np.log(np.maximum(p, 1e-12)), axis=1)))

