"""Linear-probe evaluation and the average per-phase accuracy."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, add, log_softmax_rows, matmul, mean, mul, sum_rows
from .optim import SGD


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or not self.lr > 0 or self.batch_size < 1:
            raise ProbeError(f"invalid probe config {self}")


def embed(encoder, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Frozen features of ``x``; nothing is recorded for gradients."""
    out = [encoder(Tensor(x[i : i + chunk])).data for i in range(0, len(x), chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, 0))


def fit_linear_probe(features: np.ndarray, labels: np.ndarray, num_classes: int, config: ProbeConfig):
    """Softmax regression on standardized features; returns a predict function."""
    mu = features.mean(axis=0)
    sd = features.std(axis=0) + 1e-8
    x = (features - mu) / sd
    rng = np.random.default_rng([config.seed, 0x9B0BE])
    w = Tensor(np.zeros((x.shape[1], num_classes)), requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    opt = SGD([w, b], momentum=config.momentum)
    onehot = np.eye(num_classes)[labels]
    n = len(x)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            opt.zero_grad()
            with Tape() as tape:
                logp = log_softmax_rows(add(matmul(Tensor(x[idx]), w), b))
                loss = mul(mean(sum_rows(mul(logp, Tensor(onehot[idx])))), -1.0)
            tape.backward(loss)
            opt.step(config.lr)

    def predict(feats: np.ndarray) -> np.ndarray:
        return np.argmax(((feats - mu) / sd) @ w.data + b.data, axis=1)

    return predict


def linear_probe(encoder, train_x, train_y, test_x, test_y, config: ProbeConfig | None = None) -> dict[int, float]:
    """Train an affine classifier on frozen embeddings; return per-class test accuracy."""
    config = config or ProbeConfig()
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    missing = sorted(set(test_y.tolist()) - set(train_y.tolist()))
    if missing:
        raise ProbeError(f"classes {missing} appear in the test set but not in the train set")
    classes = np.unique(train_y)
    remap = {int(c): i for i, c in enumerate(classes)}
    y = np.array([remap[int(c)] for c in train_y])
    predict = fit_linear_probe(embed(encoder, train_x), y, len(classes), config)
    pred = classes[predict(embed(encoder, test_x))]
    return {int(c): float(np.mean(pred[test_y == c] == c)) for c in np.unique(test_y)}


@dataclass
class RunMetrics:
    """``acc[t][i]``: accuracy on classes of phase ``i`` after training ``t + 1`` phases."""

    num_phases: int
    acc: dict[int, dict[int, float]] = field(default_factory=dict)

    def record(self, after_phase: int, phase_of_classes: int, accuracy: float) -> None:
        if not 0.0 <= accuracy <= 1.0:
            raise ProbeError(f"accuracy {accuracy} outside [0, 1]")
        self.acc.setdefault(after_phase, {})[phase_of_classes] = accuracy

    def seen_average(self, after_phase: int) -> float:
        row = self.acc[after_phase]
        return float(np.mean([row[i] for i in range(after_phase + 1)]))


def per_phase_accuracy(class_acc: dict[int, float], phase_of_class: dict[int, int]) -> dict[int, float]:
    """Mean per-class accuracy over the classes introduced in each phase."""
    grouped: dict[int, list[float]] = {}
    for c, a in class_acc.items():
        grouped.setdefault(phase_of_class[c], []).append(a)
    return {p: float(np.mean(v)) for p, v in sorted(grouped.items())}


def average_accuracy(metrics: RunMetrics, T: int | None = None) -> float:
    T = metrics.num_phases if T is None else T
    row = metrics.acc.get(T - 1)
    if row is None or any(i not in row for i in range(T)):
        raise ProbeError(f"missing accuracies for the final phase (T={T})")
    return sum(row[i] for i in range(T)) / T


def write_metrics_csv(metrics: RunMetrics, path) -> None:
    """Rows use 1-based phase numbers; a final ``A_T`` row carries the summary."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["after_phase", "phase_of_classes", "accuracy"])
        for t in sorted(metrics.acc):
            for i in sorted(metrics.acc[t]):
                w.writerow([t + 1, i + 1, repr(metrics.acc[t][i])])
        if metrics.num_phases - 1 in metrics.acc:
            w.writerow(["A_T", metrics.num_phases, repr(average_accuracy(metrics))])


def read_metrics_csv(path) -> tuple[RunMetrics, float | None]:
    path = Path(path)
    if not path.exists():
        raise ProbeError(f"metrics file not found: {path}")
    rows = list(csv.DictReader(open(path, newline="")))
    if not rows or set(rows[0]) != {"after_phase", "phase_of_classes", "accuracy"}:
        raise ProbeError(f"{path}: not a metrics CSV")
    summary = None
    entries = []
    for r in rows:
        if r["after_phase"] == "A_T":
            summary = float(r["accuracy"])
            T = int(r["phase_of_classes"])
        else:
            entries.append((int(r["after_phase"]) - 1, int(r["phase_of_classes"]) - 1, float(r["accuracy"])))
    if summary is None:
        T = max(t for t, _, _ in entries) + 1
    metrics = RunMetrics(T)
    for t, i, a in entries:
        metrics.record(t, i, a)
    return metrics, summary

