"""Embedding space reserving: chosen/reserved center split and the margin loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParameterError, Tensor, cosine_sim_matrix, max_rows, mean, mul, relu, stop_gradient, sub, take_cols

DEFAULT_ALPHA_STAGES = ((0.0, 0.0), (0.25, 1e-3), (0.5, 1e-2), (0.75, 1e-1))


@dataclass(frozen=True)
class CenterSplit:
    chosen: tuple[int, ...]
    reserved: tuple[int, ...]
    proportion: float
    seed: int


@dataclass(frozen=True)
class AlphaSchedule:
    """Margin-loss weight per epoch: constant, or staged by fraction of the phase."""

    value: float = 0.1
    stages: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.value < 0 or any(v < 0 for _, v in self.stages or ()):
            raise ParameterError("alpha values must be non-negative")
        if self.stages is not None:
            fracs = [f for f, _ in self.stages]
            if fracs != sorted(fracs) or fracs[0] != 0.0:
                raise ParameterError("alpha stages must start at fraction 0 and be increasing")

    @classmethod
    def staged(cls, stages=DEFAULT_ALPHA_STAGES) -> AlphaSchedule:
        return cls(value=stages[-1][1], stages=tuple((float(f), float(v)) for f, v in stages))

    def __call__(self, epoch: int, epochs: int) -> float:
        if self.stages is None:
            return self.value
        frac = epoch / epochs
        current = self.stages[0][1]
        for start, v in self.stages:
            # small slack keeps e.g. 15/60 == 0.25 exact under float rounding
            if frac + 1e-12 >= start:
                current = v
        return current


def split_centers(n_c: int, proportion: float, seed: int) -> CenterSplit:
    if n_c < 2:
        raise ParameterError("need at least 2 centers to split")
    if not 0 < proportion < 1:
        raise ParameterError(f"proportion must be in (0, 1), got {proportion}")
    k = int(np.floor(proportion * n_c + 0.5))
    if k < 1 or k > n_c - 1:
        raise ParameterError(f"proportion {proportion} of {n_c} centers leaves a group empty")
    perm = np.random.default_rng(seed).permutation(n_c)
    return CenterSplit(
        chosen=tuple(sorted(int(i) for i in perm[:k])),
        reserved=tuple(sorted(int(i) for i in perm[k:])),
        proportion=proportion,
        seed=seed,
    )


def _group_similarities(features: Tensor, centers, split: CenterSplit) -> tuple[Tensor, Tensor]:
    c = centers.vectors if hasattr(centers, "vectors") else centers
    c = c if isinstance(c, Tensor) else Tensor(c)
    cos = cosine_sim_matrix(features, stop_gradient(c))
    return max_rows(take_cols(cos, split.chosen)), max_rows(take_cols(cos, split.reserved))


def esr_loss(features: Tensor, centers, split: CenterSplit, lam: float) -> Tensor:
    """Mean of ``relu(lam * sim_reserved - sim_chosen)``; centers receive no gradient."""
    sim_chosen, sim_reserved = _group_similarities(features, centers, split)
    return mean(relu(sub(mul(sim_reserved, lam), sim_chosen)))


def constraint_satisfaction(features, centers, split: CenterSplit, lam: float) -> float:
    f = features if isinstance(features, Tensor) else Tensor(features)
    sim_chosen, sim_reserved = _group_similarities(stop_gradient(f), centers, split)
    return float(np.mean(sim_chosen.data >= lam * sim_reserved.data))
