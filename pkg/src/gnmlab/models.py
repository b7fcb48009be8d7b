"""Toy models: an MLP baseline and a prompted token-mixing network.

The prompted network emulates deep visual prompt tuning at desk scale. A frozen
"backbone" (patch projection, class token, and per-layer mixing blocks, all
drawn once from a fixed seed so every run shares the same pretrained-like
weights) carries a token sequence; fresh trainable prompt rows are prepended at
every layer and their block outputs discarded, so layer l consumes
``[p^{l-1}; z_cls^{l-1}; Z^{l-1}]`` and emits ``[z_cls^l; Z^l]``. The classifier
head reads a merge of the last prompt parameter and the final class token.

Only prompts and head are trainable; optimizers never see frozen tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from gnmlab.autodiff import (
    ParamSet,
    Tensor,
    add,
    concat_rows,
    gather_rows,
    layer_norm,
    linear,
    matmul,
    relu,
    reshape,
    scale,
)

__all__ = [
    "MLPConfig",
    "PromptedNetConfig",
    "ModelState",
    "init_mlp",
    "init_prompted",
    "mlp_forward",
    "vpt_forward",
    "merge_cls_token",
    "model_logits",
]

# One backbone per architecture, shared by every run: emulates "pretrained".
BACKBONE_SEED = 714025

HEAD_INIT_STD = 0.02  # small head init keeps initial logits near zero


@dataclass(frozen=True)
class MLPConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (128, 128)
    n_classes: int = 10

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden dims must be >= 1, got {self.hidden_dims}")


@dataclass(frozen=True)
class PromptedNetConfig:
    input_dim: int
    token_dim: int = 8
    n_patch_tokens: int = 4
    n_layers: int = 2
    n_prompts: int = 2
    n_classes: int = 10
    merge_w_prompt: float = 0.5
    merge_w_cls: float = 0.5
    ffn_mult: int = 2

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.token_dim < 1 or self.n_patch_tokens < 1:
            raise ValueError("token_dim and n_patch_tokens must be >= 1")
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.n_prompts < 0:
            raise ValueError(f"n_prompts must be >= 0, got {self.n_prompts}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.ffn_mult < 1:
            raise ValueError(f"ffn_mult must be >= 1, got {self.ffn_mult}")

    @property
    def seq_len(self) -> int:
        """Tokens entering each block: n_prompts + class token + patch tokens."""
        return self.n_prompts + 1 + self.n_patch_tokens


@dataclass(frozen=True)
class ModelState:
    """A model = static config + frozen backbone + the trainable ParamSet."""

    kind: str  # "mlp" | "prompted"
    config: MLPConfig | PromptedNetConfig
    frozen: ParamSet
    trainable: ParamSet

    def __post_init__(self):
        overlap = set(self.frozen.names()) & set(self.trainable.names())
        if overlap:
            raise ValueError(f"frozen and trainable parameter names overlap: {sorted(overlap)}")

    def with_trainable(self, params: ParamSet) -> "ModelState":
        """Same architecture and backbone, new optimizer-owned parameters."""
        if params.names() != self.trainable.names():
            raise ValueError("replacement ParamSet must keep the same parameter names and order")
        return replace(self, trainable=params)


def init_mlp(config: MLPConfig, rng: np.random.Generator) -> ModelState:
    """Fully trainable MLP; hidden layers use fan-in scaling, head uses std 0.02."""
    params: dict[str, np.ndarray] = {}
    fan_in = config.input_dim
    for i, h in enumerate(config.hidden_dims):
        params[f"hidden.{i}.weight"] = rng.standard_normal((h, fan_in)) * np.sqrt(2.0 / fan_in)
        params[f"hidden.{i}.bias"] = np.zeros(h)
        fan_in = h
    params["head.weight"] = rng.standard_normal((config.n_classes, fan_in)) * HEAD_INIT_STD
    params["head.bias"] = np.zeros(config.n_classes)
    return ModelState(kind="mlp", config=config, frozen=ParamSet({}),
                      trainable=ParamSet.from_arrays(params))


def _init_backbone(config: PromptedNetConfig) -> ParamSet:
    rng = np.random.Generator(np.random.PCG64(BACKBONE_SEED))
    d, D, F = config.input_dim, config.token_dim, config.ffn_mult * config.token_dim
    arrays: dict[str, np.ndarray] = {
        "patch.weight": rng.standard_normal((config.n_patch_tokens * D, d)) * HEAD_INIT_STD,
        "cls_token": rng.standard_normal((1, D)) * HEAD_INIT_STD,
    }
    for l in range(config.n_layers):
        arrays[f"block.{l}.mix.weight"] = rng.standard_normal((D, D)) * HEAD_INIT_STD
        arrays[f"block.{l}.ffn0.weight"] = rng.standard_normal((F, D)) * HEAD_INIT_STD
        arrays[f"block.{l}.ffn0.bias"] = np.zeros(F)
        arrays[f"block.{l}.ffn1.weight"] = rng.standard_normal((D, F)) * HEAD_INIT_STD
        arrays[f"block.{l}.ffn1.bias"] = np.zeros(D)
    return ParamSet.from_arrays(arrays, requires_grad=False)


def init_prompted(config: PromptedNetConfig, rng: np.random.Generator) -> ModelState:
    """Frozen backbone from the fixed seed; prompts and head from the run stream."""
    trainable: dict[str, np.ndarray] = {}
    for l in range(config.n_layers):
        if config.n_prompts > 0:
            trainable[f"prompt.{l}"] = rng.standard_normal((config.n_prompts, config.token_dim)) * HEAD_INIT_STD
    trainable["head.weight"] = rng.standard_normal((config.n_classes, config.token_dim)) * HEAD_INIT_STD
    trainable["head.bias"] = np.zeros(config.n_classes)
    return ModelState(kind="prompted", config=config, frozen=_init_backbone(config),
                      trainable=ParamSet.from_arrays(trainable))


def mlp_forward(state: ModelState, x, params: ParamSet | None = None) -> Tensor:
    """Batched logits for the MLP; ``params`` overrides the stored trainable set."""
    if state.kind != "mlp":
        raise ValueError(f"mlp_forward on a {state.kind!r} model")
    p = state.trainable if params is None else params
    cfg: MLPConfig = state.config
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.ndim != 2 or h.shape[1] != cfg.input_dim:
        raise ValueError(f"expected input of shape (B, {cfg.input_dim}), got {h.shape}")
    for i in range(len(cfg.hidden_dims)):
        h = relu(linear(h, p[f"hidden.{i}.weight"], p[f"hidden.{i}.bias"]))
    return linear(h, p["head.weight"], p["head.bias"])


def merge_cls_token(final_prompt: Tensor | None, final_cls: Tensor, w_prompt: float, w_cls: float) -> Tensor:
    """Head input: w_prompt * mean(prompt rows) + w_cls * cls token (both 1 x D).

    With no prompt rows at all the cls token passes through untouched (the
    weights don't apply to a degenerate merge, so the unprompted network is
    recovered bit for bit). With prompts present, w_prompt == 0 drops the
    prompt branch but still scales the cls token by w_cls, and w_cls == 1
    keeps that branch exact.
    """
    if final_cls.ndim != 2 or final_cls.shape[0] != 1:
        raise ValueError(f"final_cls must be a 1-row matrix, got shape {final_cls.shape}")
    if final_prompt is None or final_prompt.shape[0] == 0:
        return final_cls
    cls_term = final_cls if w_cls == 1.0 else scale(final_cls, w_cls)
    if w_prompt == 0.0:
        return cls_term
    n_p = final_prompt.shape[0]
    pool = Tensor(np.full((1, n_p), 1.0 / n_p))
    prompt_mean = matmul(pool, final_prompt)
    return add(scale(prompt_mean, w_prompt), cls_term)


def _block(config: PromptedNetConfig, frozen: ParamSet, layer: int, seq: Tensor) -> Tensor:
    """One frozen mixing block over a full sequence (prompts included).

    Mixing is length-agnostic: every token receives the mean token passed
    through a learned D x D map, so prompts influence all other tokens while
    the backbone stays independent of how many prompts are prepended.
    """
    s = seq.shape[0]
    normed = layer_norm(seq)
    pool = Tensor(np.full((1, s), 1.0 / s))
    ctx = matmul(matmul(pool, normed), frozen[f"block.{layer}.mix.weight"])
    mixed = add(seq, matmul(Tensor(np.ones((s, 1))), ctx))
    ffn_in = layer_norm(mixed)
    ffn = linear(relu(linear(ffn_in, frozen[f"block.{layer}.ffn0.weight"], frozen[f"block.{layer}.ffn0.bias"])),
                 frozen[f"block.{layer}.ffn1.weight"], frozen[f"block.{layer}.ffn1.bias"])
    return add(mixed, ffn)


def vpt_forward(state: ModelState, patch_tokens, params: ParamSet | None = None,
                ) -> tuple[Tensor, Tensor | None, Tensor]:
    """Single-sample prompted forward.

    Returns ``(logits[C], last prompt parameter[n_p x D] or None, final cls[D])``.
    The last prompt returned is the parameter fed into the final block — block
    outputs at prompt positions are discarded every layer.
    """
    if state.kind != "prompted":
        raise ValueError(f"vpt_forward on a {state.kind!r} model")
    p = state.trainable if params is None else params
    cfg: PromptedNetConfig = state.config
    tokens = patch_tokens if isinstance(patch_tokens, Tensor) else Tensor(patch_tokens)
    if tokens.shape != (cfg.n_patch_tokens, cfg.token_dim):
        raise ValueError(
            f"patch tokens must have shape ({cfg.n_patch_tokens}, {cfg.token_dim}), got {tokens.shape}"
        )

    carry = concat_rows([state.frozen["cls_token"], tokens])  # [z_cls; Z]
    last_prompt: Tensor | None = None
    for l in range(cfg.n_layers):
        if cfg.n_prompts > 0:
            last_prompt = p[f"prompt.{l}"]
            seq = concat_rows([last_prompt, carry])
        else:
            seq = carry
        assert seq.shape == (cfg.seq_len, cfg.token_dim), "sequence length broke at a layer boundary"
        out = _block(cfg, state.frozen, l, seq)
        assert out.shape == (cfg.seq_len, cfg.token_dim)
        # retain [z_cls; Z]: fresh prompts next layer, their outputs dropped
        carry = gather_rows(out, range(cfg.n_prompts, cfg.seq_len)) if cfg.n_prompts > 0 else out

    final_cls = gather_rows(carry, [0])
    merged = merge_cls_token(last_prompt, final_cls, cfg.merge_w_prompt, cfg.merge_w_cls)
    logits_row = linear(merged, p["head.weight"], p["head.bias"])
    return (reshape(logits_row, (cfg.n_classes,)),
            last_prompt,
            reshape(final_cls, (cfg.token_dim,)))


def _patchify(state: ModelState, x_row: Tensor) -> Tensor:
    cfg: PromptedNetConfig = state.config
    flat = linear(x_row, state.frozen["patch.weight"])
    return reshape(flat, (cfg.n_patch_tokens, cfg.token_dim))


def _prompted_logits_row(state: ModelState, x_row: Tensor, params: ParamSet | None) -> Tensor:
    """(1, C) logits for one flat input row; shares all of vpt_forward's path."""
    cfg: PromptedNetConfig = state.config
    logits, _, _ = vpt_forward(state, _patchify(state, x_row), params)
    return reshape(logits, (1, cfg.n_classes))


def model_logits(state: ModelState, x, params: ParamSet | None = None) -> Tensor:
    """Batched (B, C) logits for either model kind; the one forward entry point."""
    if state.kind == "mlp":
        return mlp_forward(state, x, params)
    cfg: PromptedNetConfig = state.config
    xt = x if isinstance(x, Tensor) else Tensor(x)
    if xt.ndim != 2 or xt.shape[1] != cfg.input_dim:
        raise ValueError(f"expected input of shape (B, {cfg.input_dim}), got {xt.shape}")
    rows = [_prompted_logits_row(state, gather_rows(xt, [i]), params) for i in range(xt.shape[0])]
    return concat_rows(rows)
