"""MLP encoder, projector and predictor heads."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DimensionError, ParameterError, Tensor, add, l2_normalize, matmul, relu


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 32
    hidden_dims: tuple[int, ...] = (128, 128)
    embed_dim: int = 16
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ParameterError("dimensions must be positive")
        if not self.hidden_dims:
            raise ParameterError("hidden_dims must be non-empty")
        if self.embed_dim < 2:
            raise ParameterError("embed_dim must be at least 2")
        if self.activation != "relu":
            raise ParameterError(f"unsupported activation {self.activation!r}")


class MLP:
    """Stack of affine layers with relu between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, prefix: str):
        self.sizes = list(sizes)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(Tensor(w, requires_grad=True, name=f"{prefix}.w{i}"))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True, name=f"{prefix}.b{i}"))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.sizes[0]:
            raise DimensionError(f"expected input width {self.sizes[0]}, got {x.shape[1]}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = add(matmul(x, w), b)
            if i < last:
                x = relu(x)
        return x

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


class Encoder:
    """Feature extractor plus the affine+normalize projector used by SSL losses."""

    def __init__(self, config: EncoderConfig, stream: int = 0):
        self.config = config
        rng = np.random.default_rng([config.seed, stream])
        sizes = [config.input_dim, *config.hidden_dims, config.embed_dim]
        self.backbone = MLP(sizes, rng, "backbone")
        self.projector = MLP([config.embed_dim, config.embed_dim], rng, "projector")

    def __call__(self, x: Tensor) -> Tensor:
        return self.backbone(x)

    def project(self, features: Tensor) -> Tensor:
        return l2_normalize(self.projector(features))

    def parameters(self) -> list[Tensor]:
        return self.backbone.parameters() + self.projector.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"missing parameter {p.name}")
            if state[p.name].shape != p.shape:
                raise DimensionError(f"{p.name}: shape {state[p.name].shape} != {p.shape}")
            p.data = np.array(state[p.name], dtype=p.data.dtype)


class Predictor:
    """Two-layer map ``d -> d -> d`` aligning student features with a past teacher."""

    def __init__(self, dim: int, seed):
        self.net = MLP([dim, dim, dim], np.random.default_rng(seed), "predictor")

    def __call__(self, x: Tensor) -> Tensor:
        return self.net(x)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()


@dataclass
class TeacherSnapshot:
    encoder: Encoder
    phase: int = -1
    meta: dict = field(default_factory=dict)

    def __call__(self, x: Tensor) -> Tensor:
        return self.encoder(x)

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters()


def init_parameters(config: EncoderConfig) -> Encoder:
    return Encoder(config)


def forward(enc: Encoder, batch: Tensor) -> Tensor:
    return enc(batch)


def snapshot(enc: Encoder, phase: int = -1) -> TeacherSnapshot:
    """Frozen deep copy of ``enc``; its parameters never require gradient."""
    frozen = copy.deepcopy(enc)
    for p in frozen.parameters():
        p.requires_grad = False
        p.grad = None
    return TeacherSnapshot(frozen, phase)


def parameter_count(config: EncoderConfig) -> int:
    sizes = [config.input_dim, *config.hidden_dims, config.embed_dim]
    n = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    return n + config.embed_dim * config.embed_dim + config.embed_dim
