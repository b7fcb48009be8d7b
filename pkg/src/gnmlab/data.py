"""Synthetic long-tailed classification data.

Class frequencies follow the exponential profile n_c = round(n_max * IR^(-c/(C-1)))
so class 0 is the largest head and class C-1 the smallest tail, with
IR = n_max / n_min. Features are an isotropic Gaussian blob per class; the test
split is balanced (m samples per class) so plain accuracy on it reads as
balanced accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LongTailSpec",
    "Dataset",
    "ClassSplit",
    "longtail_counts",
    "synth_dataset",
    "split_classes",
    "dump_dataset_text",
    "load_dataset_text",
]

# Default group boundaries: heads have more than 100 training samples, tails at
# most 20 (tail takes precedence at exactly 20), medium is what remains.
HEAD_THRESHOLD = 100
TAIL_THRESHOLD = 20


@dataclass(frozen=True)
class LongTailSpec:
    """Everything needed to regenerate a dataset bitwise.

    The default separation/noise pair (40, 8) keeps the class-mean geometry at
    a 5:1 signal-to-noise ratio while giving the features enough magnitude
    that the default learning rate converges within the default step budget;
    rare classes remain the hard part (their means are estimated from a
    handful of samples).
    """

    n_classes: int = 10
    n_max: int = 500
    imbalance_ratio: float = 100.0
    dim: int = 32
    separation: float = 40.0
    noise_std: float = 8.0
    test_per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        if self.imbalance_ratio < 1:
            raise ValueError(f"imbalance_ratio must be >= 1, got {self.imbalance_ratio}")
        if self.n_max / self.imbalance_ratio < 1:
            raise ValueError(
                f"n_max / imbalance_ratio must be >= 1 so the smallest class is non-empty, "
                f"got {self.n_max} / {self.imbalance_ratio}"
            )
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.separation < 0:
            raise ValueError(f"separation must be >= 0, got {self.separation}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.test_per_class < 1:
            raise ValueError(f"test_per_class must be >= 1, got {self.test_per_class}")

    def counts(self) -> np.ndarray:
        return longtail_counts(self.n_max, self.imbalance_ratio, self.n_classes)


@dataclass(frozen=True)
class Dataset:
    """Materialized splits; arrays are read-only so nothing downstream mutates them."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    counts: np.ndarray
    spec: LongTailSpec

    @property
    def n_train(self) -> int:
        return self.train_x.shape[0]

    @property
    def n_classes(self) -> int:
        return self.counts.size


@dataclass(frozen=True)
class ClassSplit:
    """Head / medium / tail class-index groups (a partition of 0..C-1)."""

    head: tuple[int, ...]
    med: tuple[int, ...]
    tail: tuple[int, ...]
    head_threshold: int
    tail_threshold: int

    def groups(self) -> dict[str, tuple[int, ...]]:
        return {"head": self.head, "med": self.med, "tail": self.tail}


def longtail_counts(n_max: int, imbalance_ratio: float, n_classes: int) -> np.ndarray:
    """Exponential count profile from n_max down to ~n_max/IR over n_classes."""
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    if imbalance_ratio < 1:
        raise ValueError(f"imbalance_ratio must be >= 1, got {imbalance_ratio}")
    c = np.arange(n_classes)
    raw = n_max * np.power(float(imbalance_ratio), -c / (n_classes - 1))
    counts = np.round(raw).astype(np.int64)
    if counts.min() < 1:
        raise ValueError(
            f"count profile bottoms out at {counts.min()}; raise n_max or lower imbalance_ratio"
        )
    return counts


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def synth_dataset(spec: LongTailSpec) -> Dataset:
    """Deterministic Gaussian-mixture data for ``spec``.

    Class means are unit directions scaled to norm ``separation``; samples add
    isotropic noise of scale ``noise_std``. Three child streams (means, train,
    test) keep the splits independent of each other.
    """
    counts = spec.counts()
    means_ss, train_ss, test_ss = np.random.SeedSequence(spec.seed).spawn(3)

    means_rng = np.random.Generator(np.random.PCG64(means_ss))
    raw = means_rng.standard_normal((spec.n_classes, spec.dim))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0  # measure-zero guard; keeps the mean at the origin
    means = spec.separation * raw / norms

    train_rng = np.random.Generator(np.random.PCG64(train_ss))
    test_rng = np.random.Generator(np.random.PCG64(test_ss))

    train_parts, train_labels = [], []
    for c, n_c in enumerate(counts):
        train_parts.append(means[c] + spec.noise_std * train_rng.standard_normal((int(n_c), spec.dim)))
        train_labels.append(np.full(int(n_c), c, dtype=np.int64))
    test_parts, test_labels = [], []
    for c in range(spec.n_classes):
        test_parts.append(means[c] + spec.noise_std * test_rng.standard_normal((spec.test_per_class, spec.dim)))
        test_labels.append(np.full(spec.test_per_class, c, dtype=np.int64))

    return Dataset(
        train_x=_freeze(np.concatenate(train_parts)),
        train_y=_freeze(np.concatenate(train_labels)),
        test_x=_freeze(np.concatenate(test_parts)),
        test_y=_freeze(np.concatenate(test_labels)),
        counts=_freeze(counts),
        spec=spec,
    )


def split_classes(counts, head_threshold: int = HEAD_THRESHOLD, tail_threshold: int = TAIL_THRESHOLD) -> ClassSplit:
    """Partition class indices by training count.

    Tail takes precedence: a class with count <= tail_threshold is tail even if
    the thresholds are degenerate. Head requires count > head_threshold.
    """
    arr = np.asarray(counts)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("counts must be a non-empty 1-D sequence")
    if tail_threshold > head_threshold:
        raise ValueError(
            f"tail_threshold ({tail_threshold}) must be <= head_threshold ({head_threshold})"
        )
    tail = tuple(int(c) for c in np.flatnonzero(arr <= tail_threshold))
    head = tuple(int(c) for c in np.flatnonzero(arr > head_threshold))
    med = tuple(int(c) for c in range(arr.size) if c not in set(tail) and c not in set(head))
    return ClassSplit(head=head, med=med, tail=tail,
                      head_threshold=int(head_threshold), tail_threshold=int(tail_threshold))


def dump_dataset_text(dataset: Dataset, path) -> None:
    """Write the long-tailed training split as plain text.

    Line 1: ``C d n_0 ... n_{C-1}``; then one ``label f_0 ... f_{d-1}`` line per
    training sample. Floats use repr (shortest round-trip), so a reload is
    bitwise faithful.
    """
    with open(path, "w") as fh:
        header = [dataset.n_classes, dataset.spec.dim, *dataset.counts.tolist()]
        fh.write(" ".join(str(v) for v in header) + "\n")
        for label, row in zip(dataset.train_y, dataset.train_x):
            fh.write(str(int(label)) + " " + " ".join(repr(float(v)) for v in row) + "\n")


def load_dataset_text(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`dump_dataset_text`: returns (X, y, counts)."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) < 3:
            raise ValueError("dataset header must hold C, d and C counts")
        n_classes, dim = int(header[0]), int(header[1])
        counts = np.asarray([int(v) for v in header[2:]], dtype=np.int64)
        if counts.size != n_classes:
            raise ValueError(f"header promises {n_classes} counts, got {counts.size}")
        xs, ys = [], []
        for line_no, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ValueError(f"line {line_no}: expected 1 label + {dim} features, got {len(parts)} fields")
            ys.append(int(parts[0]))
            xs.append([float(v) for v in parts[1:]])
    x = np.asarray(xs, dtype=np.float64).reshape(len(ys), dim)
    y = np.asarray(ys, dtype=np.int64)
    if y.size != counts.sum():
        raise ValueError(f"found {y.size} samples but counts sum to {counts.sum()}")
    return x, y, counts
