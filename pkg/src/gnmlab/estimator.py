"""Scikit-learn style classifier trained by SGD, SAM, or GNM.

This is the package's front door: everything the training harness does — the
two-stage deferred re-weighting schedule, the optimizer step loop, pass
accounting, per-epoch evaluation — lives behind a ``fit``/``predict`` API so
the models compose with the wider ecosystem (clone, grid search, pipelines).
"""

from __future__ import annotations

import hashlib
import math
import time

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from gnmlab.autodiff import ParamSet, softmax_cross_entropy
from gnmlab.data import ClassSplit, split_classes
from gnmlab.losses import balanced_softmax_adjust, drw_weights
from gnmlab.models import (
    MLPConfig,
    ModelState,
    PromptedNetConfig,
    init_mlp,
    init_prompted,
    model_logits,
)
from gnmlab.optim import (
    GaussianNoiseSource,
    NonFiniteLossError,
    OptimizerConfig,
    PassCounter,
    gnm_step,
    sam_step,
    sgd_step,
)

__all__ = ["GNMClassifier", "evaluate_model", "stream"]

# Named sub-stream spawn keys, all derived from the run seed. Disjoint from the
# keys synth_dataset spawns internally (0..2), so data and training never share
# a stream.
STREAM_INIT = 10
STREAM_SHUFFLE = 11
STREAM_PERTURB = 12
STREAM_LANDSCAPE = 20


def stream(seed: int, key: int) -> np.random.Generator:
    """The named child generator ``key`` of ``seed``; stable across processes."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))


def evaluate_model(state: ModelState, params: ParamSet, x: np.ndarray, y: np.ndarray,
                   split: ClassSplit | None = None) -> dict:
    """Accuracy of raw-logit argmax predictions, overall and per class group.

    Evaluation never applies train-time logit adjustments or class weights.
    Empty groups report ``None``.
    """
    logits = model_logits(state, x, params).data
    pred = logits.argmax(axis=1)
    y = np.asarray(y)
    out = {"test_acc": float((pred == y).mean())}
    if split is not None:
        for name, classes in split.groups().items():
            mask = np.isin(y, np.asarray(classes, dtype=y.dtype))
            out[f"test_acc_{name}"] = float((pred[mask] == y[mask]).mean()) if mask.any() else None
    return out


class GNMClassifier(ClassifierMixin, BaseEstimator):
    """Long-tail classifier trained with Gaussian-neighborhood minimization.

    Trains a small model (an MLP or a prompted token-mixing network) on
    long-tailed data in two stages: a robust stage with uniform class weights,
    then a re-balance stage with effective-number weights. The optimizer is
    plain SGD, SAM (two passes per step), or GNM (one pass per step at a
    data-independent Gaussian offset of the parameters).

    Parameters
    ----------
    model : {"mlp", "prompted"}, default="mlp"
        Architecture. "prompted" freezes a fixed-seed backbone and trains only
        per-layer prompt tokens plus the head.
    hidden_dims : tuple of int, default=(128, 128)
        MLP hidden layer widths (ignored for "prompted").
    token_dim, patch_tokens, prompts, layers : int
        Prompted-network geometry (ignored for "mlp").
    merge_w_prompt, merge_w_cls : float, default=0.5
        Weights merging the last prompt mean with the final class token before
        the head; (0, 1) reduces to the unprompted head input exactly.
    optimizer : {"sgd", "sam", "gnm"}, default="gnm"
    lr : float, default=0.01
        Base learning rate.
    schedule : {"cosine", "constant"}, default="cosine"
    weight_decay : float, default=0.0
    rho_sam : float, default=0.05
        SAM ascent radius; also anchors the GNM radius.
    amplitude : float, default=0.1
        GNM radius as a fraction of ``rho_sam`` (rho_gnm = amplitude * rho_sam).
    sigma : float, default=1/3
        Std of each raw perturbation entry before clamping.
    clamp : float, default=1.0
        Raw entries are clipped to [-clamp, clamp] before radius scaling.
    loss : {"ce", "ce+balanced-softmax"}, default="ce"
        Training objective; balanced-softmax shifts train-time logits by the
        log class prior. Evaluation always uses raw logits.
    drw_beta : float, default=0.99
        Effective-number parameter for the re-balance stage.
    epochs : int, default=40
        Total epochs (T2).
    stage1_epochs : int, default=30
        Uniform-weight epochs (T1); re-weighting starts at epoch T1 + 1.
    batch_size : int, default=128
    head_threshold, tail_threshold : int, default=50, 10
        Class-group boundaries on training counts (tail wins at the boundary).
    random_state : int, default=0
        Seeds the init / shuffle / perturbation sub-streams.

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    n_features_in_ : int
    class_counts_ : ndarray of shape (n_classes,)
        Training samples per class.
    class_split_ : ClassSplit
        Head / medium / tail class groups.
    model_state_ : ModelState
        Architecture, frozen backbone, and the trained parameters.
    params_ : ParamSet
        The trained (trainable) parameters; what checkpoints store.
    history_ : list of dict
        One record per completed epoch (loss, pass counts, wall time, weight
        hash, and evaluation metrics when ``eval_set`` was given).
    pass_counter_ : PassCounter
        Forward/backward tallies and per-step wall times for the whole fit.
    aborted_ : dict or None
        Set when a non-finite loss stopped training early.
    setup_wall_ns_ : int
        Time spent on model init and perturbation planning, outside any step.

    Examples
    --------
    >>> from gnmlab import GNMClassifier, synth_dataset, LongTailSpec
    >>> ds = synth_dataset(LongTailSpec(seed=0))
    >>> clf = GNMClassifier(epochs=2, stage1_epochs=1, random_state=0)
    >>> acc = clf.fit(ds.train_x, ds.train_y).score(ds.test_x, ds.test_y)
    """

    def __init__(self, model="mlp", hidden_dims=(128, 128), token_dim=8, patch_tokens=4,
                 prompts=2, layers=2, merge_w_prompt=0.5, merge_w_cls=0.5,
                 optimizer="gnm", lr=0.01, schedule="cosine", weight_decay=0.0,
                 rho_sam=0.05, amplitude=0.1, sigma=1.0 / 3.0, clamp=1.0,
                 loss="ce", drw_beta=0.99, epochs=40, stage1_epochs=30, batch_size=128,
                 head_threshold=50, tail_threshold=10, random_state=0):
        self.model = model
        self.hidden_dims = hidden_dims
        self.token_dim = token_dim
        self.patch_tokens = patch_tokens
        self.prompts = prompts
        self.layers = layers
        self.merge_w_prompt = merge_w_prompt
        self.merge_w_cls = merge_w_cls
        self.optimizer = optimizer
        self.lr = lr
        self.schedule = schedule
        self.weight_decay = weight_decay
        self.rho_sam = rho_sam
        self.amplitude = amplitude
        self.sigma = sigma
        self.clamp = clamp
        self.loss = loss
        self.drw_beta = drw_beta
        self.epochs = epochs
        self.stage1_epochs = stage1_epochs
        self.batch_size = batch_size
        self.head_threshold = head_threshold
        self.tail_threshold = tail_threshold
        self.random_state = random_state

    # ------------------------------------------------------------------

    def _validate_hyperparams(self) -> OptimizerConfig:
        if self.model not in ("mlp", "prompted"):
            raise ValueError(f"model must be 'mlp' or 'prompted', got {self.model!r}")
        if self.loss not in ("ce", "ce+balanced-softmax"):
            raise ValueError(f"loss must be 'ce' or 'ce+balanced-softmax', got {self.loss!r}")
        if int(self.epochs) < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= int(self.stage1_epochs) <= int(self.epochs):
            raise ValueError(
                f"stage1_epochs must satisfy 0 <= stage1_epochs <= epochs, "
                f"got {self.stage1_epochs} vs epochs={self.epochs}"
            )
        if int(self.batch_size) < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= float(self.drw_beta) < 1.0:
            raise ValueError(f"drw_beta must be in [0, 1), got {self.drw_beta}")
        if int(self.tail_threshold) > int(self.head_threshold):
            raise ValueError(
                f"tail_threshold ({self.tail_threshold}) must be <= head_threshold ({self.head_threshold})"
            )
        return OptimizerConfig(kind=self.optimizer, lr=float(self.lr), schedule=self.schedule,
                               weight_decay=float(self.weight_decay), rho_sam=float(self.rho_sam),
                               amplitude=float(self.amplitude), sigma=float(self.sigma),
                               clamp=float(self.clamp))

    def _init_state(self, n_features: int, n_classes: int) -> ModelState:
        rng = stream(int(self.random_state), STREAM_INIT)
        if self.model == "mlp":
            cfg = MLPConfig(input_dim=n_features, hidden_dims=tuple(int(h) for h in self.hidden_dims),
                            n_classes=n_classes)
            return init_mlp(cfg, rng)
        cfg = PromptedNetConfig(input_dim=n_features, token_dim=int(self.token_dim),
                                n_patch_tokens=int(self.patch_tokens), n_layers=int(self.layers),
                                n_prompts=int(self.prompts), n_classes=n_classes,
                                merge_w_prompt=float(self.merge_w_prompt),
                                merge_w_cls=float(self.merge_w_cls))
        return init_prompted(cfg, rng)

    def _make_loss_fn(self, state: ModelState, counts: np.ndarray):
        adjust = self.loss == "ce+balanced-softmax"

        def loss_fn(params, batch):
            xb, yb, wb = batch
            logits = model_logits(state, xb, params)
            if adjust:
                logits = balanced_softmax_adjust(logits, counts)
            return softmax_cross_entropy(logits, yb, wb)

        return loss_fn

    def _encode_labels(self, y) -> np.ndarray:
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        bad = (idx >= self.classes_.size) | (self.classes_[np.minimum(idx, self.classes_.size - 1)] != y)
        if bad.any():
            raise ValueError(f"labels {sorted(set(np.asarray(y)[bad].tolist()))} were not seen during fit")
        return idx.astype(np.int64)

    # ------------------------------------------------------------------

    def fit(self, X, y, eval_set: tuple | None = None):
        """Run the two-stage training loop.

        Parameters
        ----------
        X : array-like of shape (n_samples, n_features)
        y : array-like of shape (n_samples,)
        eval_set : (X_val, y_val), optional
            Held-out data evaluated after every epoch into ``history_``.

        Returns
        -------
        self
        """
        opt_cfg = self._validate_hyperparams()
        X, y = check_X_y(X, y, dtype=np.float64, order="C")
        self.classes_ = unique_labels(y)
        if self.classes_.size < 2:
            raise ValueError("fit needs at least two classes")
        self.n_features_in_ = X.shape[1]
        y_idx = self._encode_labels(y)
        n_classes = self.classes_.size
        counts = np.bincount(y_idx, minlength=n_classes)
        self.class_counts_ = counts
        self.class_split_ = split_classes(counts, head_threshold=int(self.head_threshold),
                                          tail_threshold=int(self.tail_threshold))
        if eval_set is not None:
            x_val = check_array(eval_set[0], dtype=np.float64, order="C")
            y_val = self._encode_labels(eval_set[1])

        n = X.shape[0]
        batch_size = int(self.batch_size)
        steps_per_epoch = math.ceil(n / batch_size)
        epochs, stage1 = int(self.epochs), int(self.stage1_epochs)
        total_steps = epochs * steps_per_epoch

        setup_start = time.perf_counter_ns()
        state = self._init_state(self.n_features_in_, n_classes)
        params = state.trainable
        loss_fn = self._make_loss_fn(state, counts)
        noise = None
        if opt_cfg.kind == "gnm":
            noise = GaussianNoiseSource(opt_cfg, params, stream(int(self.random_state), STREAM_PERTURB))
            if total_steps * params.k <= 50_000_000:  # keep planned noise under ~400 MB
                noise.plan(total_steps)
        self.setup_wall_ns_ = time.perf_counter_ns() - setup_start

        shuffle_rng = stream(int(self.random_state), STREAM_SHUFFLE)
        counter = PassCounter()
        history: list[dict] = []
        self.aborted_ = None
        t = 0
        for epoch in range(1, epochs + 1):
            weights = drw_weights(counts, float(self.drw_beta), epoch - 1, stage1)
            w_hash = hashlib.sha256(weights.values.tobytes()).hexdigest()
            perm = shuffle_rng.permutation(n)
            f0, b0 = counter.forwards, counter.backwards
            step0 = counter.steps
            losses: list[float] = []
            for s in range(steps_per_epoch):
                idx = perm[s * batch_size:(s + 1) * batch_size]
                batch = (X[idx], y_idx[idx], weights.per_sample(y_idx[idx]))
                t_start = time.perf_counter_ns()
                try:
                    if opt_cfg.kind == "sgd":
                        result = sgd_step(params, loss_fn, batch, opt_cfg, t,
                                          total_steps=total_steps, counter=counter)
                    elif opt_cfg.kind == "sam":
                        result = sam_step(params, loss_fn, batch, opt_cfg, t,
                                          total_steps=total_steps, counter=counter)
                    else:
                        result = gnm_step(params, loss_fn, batch, opt_cfg, t,
                                          total_steps=total_steps, noise=noise, counter=counter)
                except NonFiniteLossError as exc:
                    self.aborted_ = {"epoch": epoch, "step": exc.step, "reason": str(exc)}
                    break
                counter.record_step(time.perf_counter_ns() - t_start)
                params = result.params
                losses.append(result.loss)
                t += 1
            if self.aborted_ is not None:
                break
            record = {
                "type": "epoch",
                "epoch": epoch,
                "stage": "robust" if epoch <= stage1 else "rebalance",
                "train_loss": float(np.mean(losses)),
                "steps": steps_per_epoch,
                "forwards": counter.forwards - f0,
                "backwards": counter.backwards - b0,
                "wall_ns": int(sum(counter.step_wall_ns[step0:])),
                "class_weights_sha256": w_hash,
            }
            if eval_set is not None:
                record.update(evaluate_model(state, params, x_val, y_val, self.class_split_))
            history.append(record)

        self.model_state_ = state.with_trainable(params)
        self.params_ = params
        self.history_ = history
        self.pass_counter_ = counter
        self.total_steps_ = total_steps
        return self

    # ------------------------------------------------------------------

    def decision_function(self, X) -> np.ndarray:
        """Raw logits of shape (n_samples, n_classes); no train-time adjustments."""
        check_is_fitted(self, "model_state_")
        X = check_array(X, dtype=np.float64, order="C")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return model_logits(self.model_state_, X, self.params_).data

    def predict(self, X) -> np.ndarray:
        """Argmax-of-logits labels, mapped back to the original class labels."""
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def predict_proba(self, X) -> np.ndarray:
        """Softmax of the raw logits."""
        logits = self.decision_function(X)
        z = logits - logits.max(axis=1, keepdims=True)
        ez = np.exp(z)
        return ez / ez.sum(axis=1, keepdims=True)
