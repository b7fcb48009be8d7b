"""Class-weighted objectives for long-tailed training.

Two re-balancing tools live here: deferred effective-number re-weighting
(all-ones weights during the robust stage, count-based weights afterwards) and
the balanced-softmax logit adjustment (a train-time prior shift; evaluation
always runs on raw logits).
"""

from __future__ import annotations

import numpy as np

from gnmlab.autodiff import Tensor, add, softmax_cross_entropy

__all__ = [
    "ClassWeights",
    "as_class_counts",
    "cross_entropy",
    "drw_weights",
    "balanced_softmax_adjust",
]


def as_class_counts(counts) -> np.ndarray:
    """Validate per-class sample counts: integer, one per class, every count >= 1."""
    arr = np.asarray(counts)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"class counts must be a non-empty 1-D sequence, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.floor(arr)):
            raise ValueError("class counts must be integers")
    arr = arr.astype(np.int64)
    if arr.min() < 1:
        raise ValueError(f"class counts must be >= 1, got minimum {arr.min()}")
    return arr


class ClassWeights:
    """Per-class loss multipliers, normalized to mean 1 at construction.

    Normalizing keeps the overall loss scale comparable across weighting
    schemes, so a learning rate tuned for the robust stage still makes sense
    after the switch.
    """

    def __init__(self, raw):
        w = np.asarray(raw, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError(f"class weights must be a non-empty 1-D sequence, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or w.min() <= 0:
            raise ValueError("class weights must be finite and positive")
        self.values = w / w.mean()
        self.values.flags.writeable = False

    @classmethod
    def uniform(cls, n_classes: int) -> "ClassWeights":
        return cls(np.ones(int(n_classes)))

    @property
    def n_classes(self) -> int:
        return self.values.size

    def is_uniform(self) -> bool:
        return bool(np.all(self.values == 1.0))

    def per_sample(self, labels) -> np.ndarray:
        """Expand to one weight per sample via its label."""
        y = np.asarray(labels)
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            bad = int(y[(y < 0) | (y >= self.n_classes)][0])
            raise ValueError(f"label {bad} out of range for {self.n_classes} classes")
        return self.values[y]

    def __repr__(self) -> str:
        return f"ClassWeights({np.array2string(self.values, precision=4)})"


def cross_entropy(logits: Tensor, labels, weights: ClassWeights | None = None) -> Tensor:
    """Mean over the batch of w_{y_i} * CE_i (max-subtracted log-sum-exp inside).

    With ``weights=None`` (or all-equal weights, which normalize to exactly 1.0)
    this is plain cross-entropy.
    """
    sample_w = None if weights is None else weights.per_sample(labels)
    return softmax_cross_entropy(logits, labels, sample_w)


def drw_weights(counts, beta: float, epoch: int, t1: int) -> ClassWeights:
    """Deferred re-weighting schedule: all-ones before ``t1``, effective-number after.

    ``epoch`` is zero-based; the re-balance stage starts at epoch index ``t1``.
    Effective-number weights are w_c proportional to (1 - beta) / (1 - beta^{n_c}),
    normalized to mean 1.
    """
    arr = as_class_counts(counts)
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must be in [0, 1), got {beta}")
    if epoch < 0 or t1 < 0:
        raise ValueError("epoch and t1 must be non-negative")
    if epoch < t1:
        return ClassWeights.uniform(arr.size)
    return ClassWeights((1.0 - beta) / (1.0 - np.power(beta, arr)))


def balanced_softmax_adjust(logits: Tensor, counts) -> Tensor:
    """Shift each logit by log(n_c / sum_j n_j); a constant, so gradients pass through.

    Train-time only — the prior correction belongs in the objective, never in
    the evaluation path.
    """
    arr = as_class_counts(counts)
    if logits.ndim != 2 or logits.shape[1] != arr.size:
        raise ValueError(f"logits shape {logits.shape} does not match {arr.size} classes")
    log_prior = np.log(arr / arr.sum())
    return add(logits, Tensor(np.broadcast_to(log_prior, logits.shape).copy()))
