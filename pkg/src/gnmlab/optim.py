"""Optimizer steps: SGD, SAM, and GNM, with exact pass accounting.

All three share the update shape  theta <- theta - alpha_t (g + lambda theta);
they differ only in where the gradient g is evaluated:

* SGD: at theta. One forward + one backward.
* SAM: at theta + rho_sam * g(theta)/||g(theta)||  (two forwards + two backwards).
* GNM: at theta + eps, where eps is clipped Gaussian noise drawn from a stream
  that never looks at the data. One forward + one backward — the whole point.

Steps are functional: they never mutate the incoming ParamSet, so "restore
after perturbing" holds exactly (the original tensors were never touched) and
a zero-radius GNM/SAM run is bitwise an SGD run.
"""

from __future__ import annotations

import math
from collections import deque
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from gnmlab.autodiff import ParamSet, Tensor, backward, scale

__all__ = [
    "SIGMA_DEFAULT",
    "CLAMP_DEFAULT",
    "RHO_SAM_DEFAULT",
    "AMPLITUDE_DEFAULT",
    "OptimizerConfig",
    "PassCounter",
    "Perturbation",
    "NonFiniteLossError",
    "StepResult",
    "GaussianNoiseSource",
    "NeighborhoodStats",
    "GroupGradientNorms",
    "learning_rate",
    "sample_gaussian_perturbation",
    "sgd_step",
    "sam_step",
    "gnm_step",
    "neighborhood_loss_stats",
    "gradient_group_norms",
]

SIGMA_DEFAULT = 1.0 / 3.0
CLAMP_DEFAULT = 1.0
RHO_SAM_DEFAULT = 0.05
AMPLITUDE_DEFAULT = 0.1  # rho_gnm = amplitude * rho_sam

LossFn = Callable[[ParamSet, object], Tensor]


class NonFiniteLossError(RuntimeError):
    """Training objective went NaN/inf; carries the offending step index."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "gnm"
    lr: float = 0.01
    schedule: str = "cosine"
    weight_decay: float = 0.0
    rho_sam: float = RHO_SAM_DEFAULT
    amplitude: float = AMPLITUDE_DEFAULT
    sigma: float = SIGMA_DEFAULT
    clamp: float = CLAMP_DEFAULT

    def __post_init__(self):
        if self.kind not in ("sgd", "sam", "gnm"):
            raise ValueError(f"optimizer kind must be sgd|sam|gnm, got {self.kind!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"schedule must be cosine|constant, got {self.schedule!r}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.rho_sam < 0:
            raise ValueError(f"rho_sam must be >= 0, got {self.rho_sam}")
        if self.amplitude < 0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.clamp <= 0:
            raise ValueError(f"clamp must be > 0, got {self.clamp}")

    @property
    def rho_gnm(self) -> float:
        return self.amplitude * self.rho_sam


def learning_rate(cfg: OptimizerConfig, t: int, total_steps: int) -> float:
    """alpha_t for step t of total_steps; cosine decays from lr (exactly, at t=0) to 0."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= t <= total_steps:
        raise ValueError(f"step index {t} outside [0, {total_steps}]")
    if cfg.schedule == "constant":
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


class PassCounter:
    """Forward/backward pass tallies plus per-step wall time, all monotone."""

    def __init__(self):
        self.forwards = 0
        self.backwards = 0
        self.step_wall_ns: list[int] = []

    def count(self, forwards: int = 0, backwards: int = 0) -> None:
        self.forwards += forwards
        self.backwards += backwards

    def record_step(self, wall_ns: int) -> None:
        self.step_wall_ns.append(int(wall_ns))

    @property
    def steps(self) -> int:
        return len(self.step_wall_ns)


@dataclass(frozen=True)
class Perturbation:
    """Named offsets matching a ParamSet's shapes (the epsilon-tilde of a step)."""

    entries: dict[str, np.ndarray]
    # Set when the construction itself guarantees all-zero entries (e.g. a
    # zero-radius draw), so is_zero needs no scan on the per-step hot path.
    zero: bool = False

    @property
    def k(self) -> int:
        return sum(a.size for a in self.entries.values())

    def max_abs(self) -> float:
        if not self.entries:
            return 0.0
        return max(float(np.abs(a).max()) if a.size else 0.0 for a in self.entries.values())

    def is_zero(self) -> bool:
        return self.zero or all(not a.any() for a in self.entries.values())

    def apply_to(self, params: ParamSet, requires_grad: bool = True) -> ParamSet:
        """theta + eps as a fresh ParamSet; theta itself is never written."""
        if list(self.entries) != params.names():
            raise ValueError("perturbation names do not match the ParamSet")
        return ParamSet({
            name: Tensor(t.data + self.entries[name], requires_grad=requires_grad)
            for name, t in params.items()
        })


def _shapes_of(shapes) -> dict[str, tuple[int, ...]]:
    return shapes.shapes() if isinstance(shapes, ParamSet) else dict(shapes)


def _draw(shapes: dict[str, tuple[int, ...]], rng: np.random.Generator,
          sigma: float, clamp: float, radius: float) -> Perturbation:
    k = sum(int(np.prod(s)) for s in shapes.values())
    flat = rng.standard_normal(k)
    flat *= sigma
    np.clip(flat, -clamp, clamp, out=flat)
    flat *= radius
    entries, lo = {}, 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        entries[name] = flat[lo:lo + size].reshape(shape)
        lo += size
    return Perturbation(entries, zero=(radius == 0.0))


def sample_gaussian_perturbation(cfg: OptimizerConfig, shapes, rng: np.random.Generator,
                                 radius: float | None = None) -> Perturbation:
    """Independent N(0, sigma^2) per entry, clamped to [-clamp, clamp], scaled by the radius.

    The radius defaults to rho_gnm = amplitude * rho_sam, so every entry obeys
    |eps_i| <= radius * clamp. A zero radius still consumes the stream (draws
    are made, then scaled to zero), keeping stream positions independent of the
    radius setting.
    """
    r = cfg.rho_gnm if radius is None else float(radius)
    if r < 0:
        raise ValueError(f"radius must be >= 0, got {r}")
    return _draw(_shapes_of(shapes), rng, cfg.sigma, cfg.clamp, r)


class GaussianNoiseSource:
    """Owns the perturbation stream for one run.

    ``plan(n)`` materializes the next n draws up front — identical values in
    identical order to sampling on demand, since both just walk the same
    generator — so the per-step cost of GNM is a handful of adds rather than a
    fresh RNG pass. Unplanned calls past the plan fall back to on-demand draws.
    """

    def __init__(self, cfg: OptimizerConfig, shapes, rng: np.random.Generator):
        self._cfg = cfg
        self._shapes = _shapes_of(shapes)
        self._rng = rng
        self._planned: deque[Perturbation] = deque()

    def plan(self, n_steps: int) -> None:
        for _ in range(int(n_steps)):
            self._planned.append(sample_gaussian_perturbation(self._cfg, self._shapes, self._rng))

    def next(self) -> Perturbation:
        if self._planned:
            return self._planned.popleft()
        return sample_gaussian_perturbation(self._cfg, self._shapes, self._rng)


@dataclass(frozen=True)
class StepResult:
    """One optimizer step: the new parameters plus what the step saw."""

    params: ParamSet
    loss: float
    lr: float
    grad_norm: float | None = None  # SAM records pass-1 ||g||; others leave None


def _loss_value(loss: Tensor, t: int) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteLossError(t, value)
    return value


def _updated(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float, weight_decay: float) -> ParamSet:
    if weight_decay == 0.0:
        return params.map_arrays(lambda name, a: a - lr * grads[name])
    return params.map_arrays(lambda name, a: a - lr * (grads[name] + weight_decay * a))


def sgd_step(params: ParamSet, loss_fn: LossFn, batch, cfg: OptimizerConfig, t: int,
             *, total_steps: int, counter: PassCounter | None = None) -> StepResult:
    """Plain step: gradient at theta, exactly one forward and one backward."""
    lr = learning_rate(cfg, t, total_steps)
    params.zero_grads()
    loss = loss_fn(params, batch)
    value = _loss_value(loss, t)
    backward(loss)
    if counter is not None:
        counter.count(forwards=1, backwards=1)
    return StepResult(_updated(params, params.grads(), lr, cfg.weight_decay), value, lr)


def sam_step(params: ParamSet, loss_fn: LossFn, batch, cfg: OptimizerConfig, t: int,
             *, total_steps: int, counter: PassCounter | None = None) -> StepResult:
    """Sharpness-aware step: ascend rho_sam along g/||g||_2, then descend from theta.

    The denominator is the unsquared L2 norm over the whole ParamSet. Exactly
    two forwards + two backwards — except rho_sam == 0, which is delegated to
    :func:`sgd_step` outright (one pass, bitwise identical run). A zero
    gradient keeps the two-pass accounting and degenerates to the SGD update.
    """
    if cfg.rho_sam == 0.0:
        return sgd_step(params, loss_fn, batch, cfg, t, total_steps=total_steps, counter=counter)
    lr = learning_rate(cfg, t, total_steps)

    params.zero_grads()
    loss = loss_fn(params, batch)
    value = _loss_value(loss, t)
    backward(loss)
    if counter is not None:
        counter.count(forwards=1, backwards=1)
    grads = params.grads()
    grad_norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))

    if grad_norm > 0.0:
        factor = cfg.rho_sam / grad_norm
        ascent = Perturbation({name: factor * g for name, g in grads.items()})
        probe = ascent.apply_to(params)
    else:
        probe = params  # skip the perturbation; second pass re-evaluates at theta

    probe.zero_grads()
    loss2 = loss_fn(probe, batch)
    _loss_value(loss2, t)
    backward(loss2)
    if counter is not None:
        counter.count(forwards=1, backwards=1)
    return StepResult(_updated(params, probe.grads(), lr, cfg.weight_decay), value, lr,
                      grad_norm=grad_norm)


def gnm_step(params: ParamSet, loss_fn: LossFn, batch, cfg: OptimizerConfig, t: int,
             *, total_steps: int, noise: "GaussianNoiseSource | np.random.Generator",
             counter: PassCounter | None = None) -> StepResult:
    """Gaussian-neighborhood step: one gradient at theta + eps, applied at theta.

    eps comes from ``noise`` (a planned source or a raw generator) and depends
    on nothing the batch knows. An exactly-zero eps (radius 0) evaluates at
    theta itself, which is what makes the rho -> 0 run bitwise SGD.
    """
    lr = learning_rate(cfg, t, total_steps)
    if isinstance(noise, GaussianNoiseSource):
        eps = noise.next()
    else:
        eps = sample_gaussian_perturbation(cfg, params, noise)
    probe = params if eps.is_zero() else eps.apply_to(params)
    probe.zero_grads()
    loss = loss_fn(probe, batch)
    value = _loss_value(loss, t)
    backward(loss)
    if counter is not None:
        counter.count(forwards=1, backwards=1)
    return StepResult(_updated(params, probe.grads(), lr, cfg.weight_decay), value, lr)


@dataclass(frozen=True)
class NeighborhoodStats:
    """Forward-only loss summary over sampled perturbations of theta."""

    mean: float
    max: float
    min: float
    n_used: int
    n_excluded: int
    losses: tuple[float, ...]


def neighborhood_loss_stats(params: ParamSet, loss_fn: LossFn, batch, radius: float,
                            n_samples: int, rng: np.random.Generator,
                            *, sigma: float = SIGMA_DEFAULT, clamp: float = CLAMP_DEFAULT,
                            ) -> NeighborhoodStats:
    """Evaluate the loss at ``n_samples`` points theta + eps (no gradients).

    Non-finite evaluations are excluded and counted rather than poisoning the
    stats; everything excluded is an error.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    shapes = params.shapes()
    losses = []
    excluded = 0
    for _ in range(n_samples):
        eps = _draw(shapes, rng, sigma, clamp, radius)
        point = eps.apply_to(params, requires_grad=False)
        value = float(loss_fn(point, batch).item())
        if np.isfinite(value):
            losses.append(value)
        else:
            excluded += 1
    if not losses:
        raise ValueError(f"all {n_samples} neighborhood evaluations were non-finite")
    arr = np.asarray(losses)
    return NeighborhoodStats(mean=float(arr.mean()), max=float(arr.max()), min=float(arr.min()),
                             n_used=len(losses), n_excluded=excluded, losses=tuple(losses))


@dataclass(frozen=True)
class GroupGradientNorms:
    """L2 norms of each class group's contribution to the batch gradient."""

    group_norms: dict[str, float]
    full_norm: float
    empty_groups: tuple[str, ...]


def _grad_norm_of(params: ParamSet, loss: Tensor) -> float:
    params.zero_grads()
    backward(loss)
    return math.sqrt(sum(float(np.sum(g * g)) for g in params.grads().values()))


def gradient_group_norms(params: ParamSet, loss_fn: LossFn, batch,
                         groups: Mapping[str, Iterable[int]]) -> GroupGradientNorms:
    """Gradient norm of each group's share of a mean-reduced batch loss.

    ``batch`` is ``(x, y)``; ``groups`` maps names to class-index sets that must
    partition the labels present. A group's contribution is its sub-batch loss
    scaled by n_group / n_batch, so the contributions sum to the full loss and
    a single all-covering group reproduces the full-batch norm. Deterministic:
    nothing here draws randomness.
    """
    x, y = batch
    y = np.asarray(y)
    n = y.size
    if n == 0:
        raise ValueError("empty batch")
    class_to_group: dict[int, str] = {}
    for name, classes in groups.items():
        for c in classes:
            if int(c) in class_to_group:
                raise ValueError(f"class {c} appears in groups {class_to_group[int(c)]!r} and {name!r}")
            class_to_group[int(c)] = name
    uncovered = sorted(set(int(v) for v in np.unique(y)) - set(class_to_group))
    if uncovered:
        raise ValueError(f"labels {uncovered} are not covered by any group")

    full_norm = _grad_norm_of(params, loss_fn(params, (x, y)))
    group_norms: dict[str, float] = {}
    empty: list[str] = []
    for name, classes in groups.items():
        mask = np.isin(y, np.asarray(sorted(int(c) for c in classes)))
        n_g = int(mask.sum())
        if n_g == 0:
            group_norms[name] = 0.0
            empty.append(name)
            continue
        contribution = scale(loss_fn(params, (x[mask], y[mask])), n_g / n)
        group_norms[name] = _grad_norm_of(params, contribution)
    return GroupGradientNorms(group_norms=group_norms, full_norm=full_norm, empty_groups=tuple(empty))
