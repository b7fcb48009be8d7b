"""Line-oriented run configuration: ``section.key = value``.

A config file is plain text; blank lines and ``#`` comments are ignored.
Every key has a default, so the empty file is a complete configuration.
Errors carry line numbers and key names so a bad file is locatable at a
glance.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from typing import Callable

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "load_config",
    "apply_overrides",
    "config_to_dict",
]


class ConfigError(ValueError):
    """A config file or override that cannot be accepted, and why."""


@dataclass
class DataConfig:
    classes: int = 10
    n_max: int = 500
    imbalance_ratio: float = 100.0
    dim: int = 32
    separation: float = 40.0
    noise_std: float = 8.0
    test_per_class: int = 100
    head_threshold: int = 50
    tail_threshold: int = 10


@dataclass
class ModelConfig:
    kind: str = "mlp"
    hidden_dims: tuple = (128, 128)
    token_dim: int = 8
    patch_tokens: int = 4
    prompts: int = 2
    layers: int = 2
    merge_w_prompt: float = 0.5
    merge_w_cls: float = 0.5


@dataclass
class OptimConfig:
    kind: str = "gnm"
    lr: float = 0.01
    schedule: str = "cosine"
    weight_decay: float = 0.0
    rho_sam: float = 0.05
    amplitude: float = 0.1
    sigma: float = 1.0 / 3.0
    clamp: float = 1.0


@dataclass
class LossConfig:
    kind: str = "ce"
    drw_beta: float = 0.99


@dataclass
class TrainConfig:
    t1: int = 30
    t2: int = 40
    batch_size: int = 128


@dataclass
class RunMeta:
    seed: int = 0
    out_dir: str = "runs"


@dataclass
class LandscapeConfig:
    range: float = 1.0
    resolution: int = 41
    batch: int = 128


@dataclass
class RunConfig:
    """Everything one training run needs, grouped by section."""

    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunMeta = field(default_factory=RunMeta)
    landscape: LandscapeConfig = field(default_factory=LandscapeConfig)


# ---------------------------------------------------------------------------
# Value parsers. Each raises ValueError with a self-contained message; the
# caller prefixes the line number and key name.


def _int(lo: int | None = None, hi: int | None = None) -> Callable[[str], int]:
    def parse(raw: str) -> int:
        try:
            v = int(raw)
        except ValueError:
            raise ValueError(f"expected an integer, got {raw!r}") from None
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}, got {v}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}, got {v}")
        return v

    return parse


def _float(lo: float | None = None, strict_lo: float | None = None,
           hi_open: float | None = None) -> Callable[[str], float]:
    def parse(raw: str) -> float:
        try:
            v = float(raw)
        except ValueError:
            raise ValueError(f"expected a number, got {raw!r}") from None
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}, got {v}")
        if strict_lo is not None and v <= strict_lo:
            raise ValueError(f"must be > {strict_lo}, got {v}")
        if hi_open is not None and v >= hi_open:
            raise ValueError(f"must be < {hi_open}, got {v}")
        return v

    return parse


def _choice(*options: str) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {raw!r}")
        return raw

    return parse


def _int_tuple(raw: str) -> tuple:
    raw = raw.strip()
    if raw in ("", "()"):
        return ()
    try:
        return tuple(int(part.strip()) for part in raw.split(","))
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {raw!r}") from None


def _str(raw: str) -> str:
    return raw


# key -> ((section, field), parser)
SCHEMA: dict[str, tuple[tuple[str, str], Callable[[str], object]]] = {
    "data.classes": (("data", "classes"), _int(lo=2)),
    "data.n_max": (("data", "n_max"), _int(lo=1)),
    "data.imbalance_ratio": (("data", "imbalance_ratio"), _float(lo=1.0)),
    "data.dim": (("data", "dim"), _int(lo=1)),
    "data.separation": (("data", "separation"), _float(lo=0.0)),
    "data.noise_std": (("data", "noise_std"), _float(lo=0.0)),
    "data.test_per_class": (("data", "test_per_class"), _int(lo=1)),
    "data.head_threshold": (("data", "head_threshold"), _int(lo=0)),
    "data.tail_threshold": (("data", "tail_threshold"), _int(lo=0)),
    "model.kind": (("model", "kind"), _choice("mlp", "prompted")),
    "model.hidden_dims": (("model", "hidden_dims"), _int_tuple),
    "model.token_dim": (("model", "token_dim"), _int(lo=1)),
    "model.patch_tokens": (("model", "patch_tokens"), _int(lo=1)),
    "model.prompts": (("model", "prompts"), _int(lo=0)),
    "model.layers": (("model", "layers"), _int(lo=1)),
    "model.merge_w_prompt": (("model", "merge_w_prompt"), _float()),
    "model.merge_w_cls": (("model", "merge_w_cls"), _float()),
    "optim.kind": (("optim", "kind"), _choice("sgd", "sam", "gnm")),
    "optim.lr": (("optim", "lr"), _float(strict_lo=0.0)),
    "optim.schedule": (("optim", "schedule"), _choice("cosine", "constant")),
    "optim.weight_decay": (("optim", "weight_decay"), _float(lo=0.0)),
    "optim.rho_sam": (("optim", "rho_sam"), _float(lo=0.0)),
    "optim.amplitude": (("optim", "amplitude"), _float(lo=0.0)),
    "optim.sigma": (("optim", "sigma"), _float(strict_lo=0.0)),
    "optim.clamp": (("optim", "clamp"), _float(strict_lo=0.0)),
    "loss.kind": (("loss", "kind"), _choice("ce", "ce+balanced-softmax")),
    "loss.drw_beta": (("loss", "drw_beta"), _float(lo=0.0, hi_open=1.0)),
    "train.t1": (("train", "t1"), _int(lo=0)),
    "train.t2": (("train", "t2"), _int(lo=1)),
    "train.batch_size": (("train", "batch_size"), _int(lo=1)),
    "run.seed": (("run", "seed"), _int(lo=0)),
    "run.out_dir": (("run", "out_dir"), _str),
    "landscape.range": (("landscape", "range"), _float(strict_lo=0.0)),
    "landscape.resolution": (("landscape", "resolution"), _int(lo=1)),
    "landscape.batch": (("landscape", "batch"), _int(lo=1)),
}


def _set_key(cfg: RunConfig, key: str, raw: str, where: str) -> None:
    if key not in SCHEMA:
        raise ConfigError(f"{where}unknown key {key!r}")
    (section, attr), parse = SCHEMA[key]
    try:
        value = parse(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}{key}: {exc}") from None
    setattr(getattr(cfg, section), attr, value)


def validate_config(cfg: RunConfig) -> RunConfig:
    """Enforce invariants that span keys; error messages name the keys."""
    if cfg.train.t1 > cfg.train.t2:
        raise ConfigError(
            f"train.t1 ({cfg.train.t1}) must be <= train.t2 ({cfg.train.t2})"
        )
    if cfg.data.tail_threshold > cfg.data.head_threshold:
        raise ConfigError(
            f"data.tail_threshold ({cfg.data.tail_threshold}) must be <= "
            f"data.head_threshold ({cfg.data.head_threshold})"
        )
    if cfg.data.n_max < cfg.data.imbalance_ratio:
        raise ConfigError(
            f"data.n_max ({cfg.data.n_max}) must be >= data.imbalance_ratio "
            f"({cfg.data.imbalance_ratio}) so the rarest class keeps one sample"
        )
    return cfg


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines into a RunConfig; every key is optional.

    Raises
    ------
    ConfigError
        On a malformed line, unknown key, unparsable value, duplicate key,
        or violated cross-key invariant — each naming the line and key.
    """
    cfg = RunConfig()
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key in seen:
            raise ConfigError(
                f"line {lineno}: duplicate key {key!r} (first set on line {seen[key]})"
            )
        seen[key] = lineno
        _set_key(cfg, key, raw, where=f"line {lineno}: ")
    return validate_config(cfg)


def load_config(path) -> RunConfig:
    """Read and parse a config file."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Copy ``cfg``, set schema keys from ``key -> raw value`` pairs, re-validate.

    The input config is left untouched.
    """
    out = copy.deepcopy(cfg)
    for key, raw in overrides.items():
        _set_key(out, key, str(raw), where="override ")
    return validate_config(out)


def config_to_dict(cfg: RunConfig) -> dict:
    """Nested plain-type dict (tuples become lists) for JSON echoes."""
    out: dict[str, dict] = {}
    for section_field in fields(cfg):
        section = getattr(cfg, section_field.name)
        sec_out = {}
        for f in fields(section):
            v = getattr(section, f.name)
            sec_out[f.name] = list(v) if isinstance(v, tuple) else v
        out[section_field.name] = sec_out
    return out
