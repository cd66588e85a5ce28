"""Vector datasets for class-incremental runs: generation, file formats, views and phase splits."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CPPFDATA"
VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    samples: np.ndarray  # (M, input_dim) float64
    labels: np.ndarray  # (M,) int64, used only for phase splitting and probing
    name: str = "dataset"
    provenance: str = ""
    num_classes: int = field(default=-1)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or self.labels.shape != (self.samples.shape[0],):
            raise DatasetError(f"bad dataset shapes {self.samples.shape} / {self.labels.shape}")
        if self.num_classes < 0:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError("labels must lie in [0, num_classes)")
        counts = np.bincount(self.labels, minlength=self.num_classes)
        if np.any(counts < 2):
            missing = np.flatnonzero(counts < 2).tolist()
            raise DatasetError(f"every class needs at least 2 samples; classes {missing} do not")

    @property
    def input_dim(self) -> int:
        return self.samples.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> Dataset:
        d = Dataset.__new__(Dataset)
        d.samples = self.samples[idx]
        d.labels = self.labels[idx]
        d.name, d.provenance, d.num_classes = self.name, self.provenance, self.num_classes
        return d


@dataclass(frozen=True)
class AugmentationPolicy:
    noise: float = 0.1
    mask_prob: float = 0.1
    scale_min: float = 0.9
    scale_max: float = 1.1

    def __post_init__(self):
        if self.noise < 0 or not 0 <= self.mask_prob < 1 or not 0 < self.scale_min <= self.scale_max:
            raise ValueError(f"invalid augmentation policy {self}")

    @classmethod
    def identity(cls) -> AugmentationPolicy:
        return cls(noise=0.0, mask_prob=0.0, scale_min=1.0, scale_max=1.0)


@dataclass(frozen=True)
class PhaseSchedule:
    phases: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.phases)

    def __getitem__(self, t: int) -> tuple[int, ...]:
        return self.phases[t]

    def phase_of_class(self) -> dict[int, int]:
        return {c: t for t, classes in enumerate(self.phases) for c in classes}


def generate_synthetic(
    num_classes: int = 10,
    per_class: int = 200,
    input_dim: int = 32,
    difficulty: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Gaussian classes on a sphere pushed through a shared random nonlinear warp.

    ``difficulty`` scales both the within-class spread and the warp strength;
    at 0 the classes are tight, well separated blobs.
    """
    if num_classes < 2:
        raise DatasetError("need at least 2 classes")
    rng = np.random.default_rng([seed, 0xDA7A])
    means = rng.standard_normal((num_classes, input_dim))
    means *= 3.0 / np.linalg.norm(means, axis=1, keepdims=True)
    spread = 0.05 + 0.85 * difficulty
    labels = np.repeat(np.arange(num_classes), per_class)
    x = means[labels] + spread * rng.standard_normal((len(labels), input_dim))
    w1 = rng.standard_normal((input_dim, input_dim)) / np.sqrt(input_dim)
    w2 = rng.standard_normal((input_dim, input_dim)) / np.sqrt(input_dim)
    x = x + difficulty * 2.0 * np.tanh(1.5 * x @ w1) @ w2
    order = rng.permutation(len(labels))
    return Dataset(
        x[order],
        labels[order],
        name=f"synthetic-{num_classes}c",
        provenance=f"generate_synthetic(num_classes={num_classes}, per_class={per_class}, "
        f"input_dim={input_dim}, difficulty={difficulty}, seed={seed})",
        num_classes=num_classes,
    )


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Per-class split; each class keeps at least one sample on both sides."""
    if not 0 < test_fraction < 1:
        raise DatasetError("test_fraction must be in (0, 1)")
    # one permutation over all positions, so renaming class ids keeps the split
    order = np.random.default_rng([seed, 0x7E57]).permutation(len(dataset))
    train_idx, test_idx = [], []
    for c in range(dataset.num_classes):
        idx = order[dataset.labels[order] == c]
        n_test = min(max(1, int(round(test_fraction * len(idx)))), len(idx) - 1)
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    return dataset.subset(np.sort(np.concatenate(train_idx))), dataset.subset(np.sort(np.concatenate(test_idx)))


def make_views(batch: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    return _augment(batch, policy, rng), _augment(batch, policy, rng)


def _augment(x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    n, d = x.shape
    scale = rng.uniform(policy.scale_min, policy.scale_max, size=(n, 1))
    keep = rng.random((n, d)) >= policy.mask_prob
    noise = rng.standard_normal((n, d)) * policy.noise
    return (x * scale + noise) * keep


def split_phases(dataset_or_classes, num_phases: int, seed: int) -> PhaseSchedule:
    """Shuffle class ids with ``seed`` and chunk them into equal phases."""
    if isinstance(dataset_or_classes, Dataset):
        num_classes = dataset_or_classes.num_classes
    else:
        num_classes = int(dataset_or_classes)
    if num_phases < 1:
        raise DatasetError("need at least one phase")
    if num_classes % num_phases:
        raise DatasetError(
            f"{num_classes} classes do not divide into {num_phases} phases "
            f"(remainder {num_classes % num_phases}); uneven splits are not supported"
        )
    order = np.random.default_rng([seed, 0x5C4ED]).permutation(num_classes)
    per = num_classes // num_phases
    return PhaseSchedule(tuple(tuple(sorted(int(c) for c in order[t * per : (t + 1) * per])) for t in range(num_phases)))


# ------------------------------------------------------------------ file formats


def save_dataset(dataset: Dataset, path) -> None:
    """Binary layout: magic, u32 version, u32 M, u32 D, u32 classes,
    u16-prefixed name and provenance, M*D float64 LE, M int64 LE labels."""
    name = dataset.name.encode("utf-8")
    prov = dataset.provenance.encode("utf-8")
    m, d = dataset.samples.shape
    blob = b"".join(
        [
            MAGIC,
            struct.pack("<IIII", VERSION, m, d, dataset.num_classes),
            struct.pack("<H", len(name)),
            name,
            struct.pack("<H", len(prov)),
            prov,
            np.ascontiguousarray(dataset.samples, dtype="<f8").tobytes(),
            np.ascontiguousarray(dataset.labels, dtype="<i8").tobytes(),
        ]
    )
    Path(path).write_bytes(blob)


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    if path.suffix.lower() == ".csv":
        return load_csv(path)
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise DatasetError(f"{path}: not a dataset file (bad magic)")
    try:
        version, m, d, k = struct.unpack_from("<IIII", blob, 8)
        if version != VERSION:
            raise DatasetError(f"{path}: unsupported dataset version {version}")
        pos = 24
        (n,) = struct.unpack_from("<H", blob, pos)
        name = blob[pos + 2 : pos + 2 + n].decode("utf-8")
        pos += 2 + n
        (n,) = struct.unpack_from("<H", blob, pos)
        prov = blob[pos + 2 : pos + 2 + n].decode("utf-8")
        pos += 2 + n
        samples = np.frombuffer(blob, dtype="<f8", count=m * d, offset=pos).reshape(m, d).astype(np.float64)
        pos += 8 * m * d
        labels = np.frombuffer(blob, dtype="<i8", count=m, offset=pos).astype(np.int64)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"{path}: truncated or corrupt dataset ({exc})") from None
    return Dataset(samples, labels, name=name, provenance=prov, num_classes=k)


def load_csv(path) -> Dataset:
    """CSV with feature columns followed by an integer ``label`` column; a header row is optional."""
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if i == 0:
                    continue
                raise DatasetError(f"{path}: non-numeric value on line {i + 1}") from None
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    if len({len(r) for r in rows}) != 1:
        raise DatasetError(f"{path}: rows have differing column counts")
    arr = np.asarray(rows)
    labels = arr[:, -1]
    if np.any(labels != np.round(labels)):
        raise DatasetError(f"{path}: label column must hold integers")
    return Dataset(arr[:, :-1], labels.astype(np.int64), name=Path(path).stem, provenance=f"csv:{path}")
