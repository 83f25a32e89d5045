"""Transformer encoder over token sequences (TE), the two-layer transformer
over utterance embeddings (TL1, TL2), and the cross attention between
question and utterance tokens (MHA).

All forwards accept a single sequence (S, ...) or a batch (B, S, ...), are
read-only over the weights, and draw dropout noise from an explicit rng.
Attention masks are boolean, True marking real (attendable) positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import CapacityError, ConfigError, ShapeError
from .tensor import (
    MASK_SCORE,
    Tensor,
    as_tensor,
    dropout,
    gelu,
    index_select,
    layer_norm,
    matmul,
    reshape,
    softmax,
    transpose,
)

LN_EPS = 1e-12
INIT_STD = 0.02

STAGE_TMLM = "tmlm"
STAGE_UMLM = "umlm"
STAGE_UOP = "uop"
STAGE_FINETUNED = "finetuned"
STAGES = (STAGE_TMLM, STAGE_UMLM, STAGE_UOP, STAGE_FINETUNED)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_layers: int = 2
    num_heads: int = 2
    hidden_size: int = 32
    intermediate_size: int = 64
    max_tokens: int = 12  # n_max: words per utterance
    max_utterances: int = 8  # m_max: utterances per dialogue
    dropout_p: float = 0.1
    use_utterance_positions: bool = True

    def __post_init__(self):
        for name in (
            "vocab_size",
            "num_layers",
            "num_heads",
            "hidden_size",
            "intermediate_size",
            "max_tokens",
            "max_utterances",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def token_position_capacity(self) -> int:
        return self.max_tokens * self.max_utterances + 1

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "hidden_size": self.hidden_size,
            "intermediate_size": self.intermediate_size,
            "max_tokens": self.max_tokens,
            "max_utterances": self.max_utterances,
            "dropout_p": self.dropout_p,
            "use_utterance_positions": self.use_utterance_positions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _layer_names(prefix: str) -> list[str]:
    return [
        f"{prefix}.attn_wq", f"{prefix}.attn_bq",
        f"{prefix}.attn_wk", f"{prefix}.attn_bk",
        f"{prefix}.attn_wv", f"{prefix}.attn_bv",
        f"{prefix}.attn_wo", f"{prefix}.attn_bo",
        f"{prefix}.ln1_g", f"{prefix}.ln1_b",
        f"{prefix}.ff_w1", f"{prefix}.ff_b1",
        f"{prefix}.ff_w2", f"{prefix}.ff_b2",
        f"{prefix}.ln2_g", f"{prefix}.ln2_b",
    ]


def stage_tensor_names(config: ModelConfig, stage: str) -> list[str]:
    """Canonical ordered tensor list owned by each pipeline stage."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    names = ["token_emb", "token_pos_emb"]
    for i in range(config.num_layers):
        names.extend(_layer_names(f"te.{i}"))
    if stage in (STAGE_TMLM, STAGE_UMLM):
        names.append("vocab_bias")
    else:
        names.append("utt_pos_emb")
        for i in range(2):
            names.extend(_layer_names(f"tl.{i}"))
        if stage == STAGE_UOP:
            names.extend(["uop_w", "uop_b"])
        else:
            names.extend([
                "mha.wq", "mha.bq", "mha.wk", "mha.bk", "mha.wv", "mha.bv",
                "mha.wo", "mha.bo", "mha.ln_g", "mha.ln_b",
                "uid_w", "uid_b", "sl_w", "sl_b", "sr_w", "sr_b",
            ])
    return names


def tensor_shape(config: ModelConfig, name: str) -> tuple[int, ...]:
    h = config.hidden_size
    inter = config.intermediate_size
    base = name.rsplit(".", 1)[-1]
    if name == "token_emb":
        return (config.vocab_size, h)
    if name == "token_pos_emb":
        return (config.token_position_capacity, h)
    if name == "utt_pos_emb":
        return (config.max_utterances + 1, h)
    if name == "vocab_bias":
        return (config.vocab_size,)
    if name == "uop_w":
        return (h, 2)
    if name == "uop_b":
        return (2,)
    if name in ("uid_w", "sl_w", "sr_w"):
        return (h, 1)
    if name in ("uid_b", "sl_b", "sr_b"):
        return (1,)
    if base in ("attn_wq", "attn_wk", "attn_wv", "attn_wo", "wq", "wk", "wv", "wo"):
        return (h, h)
    if base in ("ff_w1",):
        return (h, inter)
    if base in ("ff_w2",):
        return (inter, h)
    if base in ("ff_b1",):
        return (inter,)
    if base in (
        "attn_bq", "attn_bk", "attn_bv", "attn_bo", "bq", "bk", "bv", "bo",
        "ff_b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b", "ln_g", "ln_b",
    ):
        return (h,)
    raise ConfigError(f"unknown tensor name {name!r}")


def _init_tensor(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> Tensor:
    base = name.rsplit(".", 1)[-1]
    if base.startswith("ln") and base.endswith("_g"):
        arr = np.ones(shape)
    elif len(shape) == 1:
        arr = np.zeros(shape)  # biases
    else:
        arr = rng.normal(0.0, INIT_STD, size=shape)
    return Tensor(arr, requires_grad=True)


@dataclass
class EncoderWeights:
    """All learnable parameters for one pipeline stage, keyed by name.

    The vocabulary projection weight is the transpose of ``token_emb``
    (tied); only its bias is a separate tensor.
    """

    config: ModelConfig
    stage: str
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def named(self) -> Iterable[tuple[str, Tensor]]:
        return self.params.items()

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p in self.params.items():
            g = p.grad_array()
            out[name] = np.zeros_like(p.array) if g is None else g
        return out


def init_encoder_weights(
    config: ModelConfig, stage: str, rng: np.random.Generator
) -> EncoderWeights:
    params = {
        name: _init_tensor(name, tensor_shape(config, name), rng)
        for name in stage_tensor_names(config, stage)
    }
    return EncoderWeights(config, stage, params)


# -- forward passes -----------------------------------------------------------


def _as_batched(x, ndim_single: int):
    """Coerce to a Tensor with a leading batch axis; report if one was added."""
    x = as_tensor(x)
    if x.ndim == ndim_single:
        return reshape(x, (1,) + x.shape), True
    return x, False


def _additive_key_mask(mask: np.ndarray | None, batch: int, length: int) -> Tensor | None:
    """(B, 1, 1, S) additive scores: 0 on real keys, MASK_SCORE on padding."""
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    if m.shape != (batch, length):
        raise ShapeError(f"attention mask shape {m.shape} != {(batch, length)}")
    add = np.where(m, 0.0, MASK_SCORE)[:, None, None, :]
    return Tensor(add)


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, s, h = x.shape
    return transpose(reshape(x, (b, s, num_heads, h // num_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, nh, s, d = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, s, nh * d))


def _self_attention_block(
    w: EncoderWeights,
    prefix: str,
    x: Tensor,
    add_mask: Tensor | None,
    training: bool,
    rng,
) -> Tensor:
    cfg = w.config
    p = cfg.dropout_p
    q = _split_heads(matmul(x, w[f"{prefix}.attn_wq"]) + w[f"{prefix}.attn_bq"], cfg.num_heads)
    k = _split_heads(matmul(x, w[f"{prefix}.attn_wk"]) + w[f"{prefix}.attn_bk"], cfg.num_heads)
    v = _split_heads(matmul(x, w[f"{prefix}.attn_wv"]) + w[f"{prefix}.attn_bv"], cfg.num_heads)
    scale = 1.0 / math.sqrt(cfg.hidden_size // cfg.num_heads)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * scale
    if add_mask is not None:
        scores = scores + add_mask
    probs = dropout(softmax(scores, axis=-1), p, training, rng)
    ctx = _merge_heads(matmul(probs, v))
    attn_out = matmul(ctx, w[f"{prefix}.attn_wo"]) + w[f"{prefix}.attn_bo"]
    x = layer_norm(
        x + dropout(attn_out, p, training, rng),
        w[f"{prefix}.ln1_g"], w[f"{prefix}.ln1_b"], LN_EPS,
    )
    hidden = gelu(matmul(x, w[f"{prefix}.ff_w1"]) + w[f"{prefix}.ff_b1"])
    ff = matmul(hidden, w[f"{prefix}.ff_w2"]) + w[f"{prefix}.ff_b2"]
    return layer_norm(
        x + dropout(ff, p, training, rng),
        w[f"{prefix}.ln2_g"], w[f"{prefix}.ln2_b"], LN_EPS,
    )


def te_forward(
    weights: EncoderWeights,
    config: ModelConfig,
    token_ids,
    attention_mask=None,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Token ids (S,) or (B, S) -> contextual embeddings (S, h) or (B, S, h).

    Padding keys are excluded from every softmax so appended PAD tokens
    leave real positions unchanged.
    """
    ids = np.asarray(token_ids, dtype=np.intp)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    b, s = ids.shape
    if s > config.token_position_capacity:
        raise CapacityError(
            f"sequence length {s} exceeds positional capacity "
            f"{config.token_position_capacity}"
        )
    if attention_mask is not None and single:
        attention_mask = np.asarray(attention_mask, dtype=bool)[None, :]
    add_mask = _additive_key_mask(attention_mask, b, s)
    tok = index_select(weights["token_emb"], ids.reshape(-1))
    x = reshape(tok, (b, s, config.hidden_size))
    pos = index_select(weights["token_pos_emb"], np.arange(s))
    x = dropout(x + pos, config.dropout_p, training, rng)
    for i in range(config.num_layers):
        x = _self_attention_block(weights, f"te.{i}", x, add_mask, training, rng)
    return reshape(x, (s, config.hidden_size)) if single else x


def tl_forward(
    weights: EncoderWeights,
    config: ModelConfig,
    utterance_embeddings,
    *,
    position_offset: int = 0,
    attention_mask=None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Utterance embedding sequence (S, h) or (B, S, h) -> T^c of same shape.

    Learned utterance-position embeddings (row ``position_offset + j`` for
    element j) are added before TL1 unless disabled in the config; without
    them the two layers are permutation-equivariant.
    """
    x, single = _as_batched(utterance_embeddings, 2)
    b, s, h = x.shape
    if position_offset + s > config.max_utterances + 1:
        raise CapacityError(
            f"utterance sequence of {s} at offset {position_offset} exceeds "
            f"capacity {config.max_utterances + 1}"
        )
    if attention_mask is not None and single:
        attention_mask = np.asarray(attention_mask, dtype=bool)[None, :]
    add_mask = _additive_key_mask(attention_mask, b, s)
    if config.use_utterance_positions:
        pos = index_select(
            weights["utt_pos_emb"], np.arange(position_offset, position_offset + s)
        )
        x = x + pos
    x = dropout(x, config.dropout_p, training, rng)
    for i in range(2):
        x = _self_attention_block(weights, f"tl.{i}", x, add_mask, training, rng)
    return reshape(x, (s, h)) if single else x


def mha_forward(
    weights: EncoderWeights,
    config: ModelConfig,
    question_embeddings,
    utterance_embeddings,
    *,
    question_mask=None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Cross attention: utterance token positions attend over the question.

    ``utterance_embeddings`` (queries) may be (S_u, h) or batched
    (B, S_u, h); ``question_embeddings`` (keys/values) may be (S_q, h) or
    (B, S_q, h) and broadcasts over the utterance batch when 2-d. The output
    adds a residual of the utterance input, so zeroing the output projection
    (weight and bias) returns the input exactly.
    """
    xq, _ = _as_batched(question_embeddings, 2)
    xu, single = _as_batched(utterance_embeddings, 2)
    if xq.shape[1] == 0 or xu.shape[1] == 0:
        raise ShapeError("mha_forward requires non-empty question and utterance inputs")
    cfg = config
    p = cfg.dropout_p
    if question_mask is not None:
        qm = np.asarray(question_mask, dtype=bool)
        if qm.ndim == 1:
            qm = qm[None, :]
        add_mask = Tensor(np.where(qm, 0.0, MASK_SCORE)[:, None, None, :])
    else:
        add_mask = None
    normed = layer_norm(xu, weights["mha.ln_g"], weights["mha.ln_b"], LN_EPS)
    q = _split_heads(matmul(normed, weights["mha.wq"]) + weights["mha.bq"], cfg.num_heads)
    k = _split_heads(matmul(xq, weights["mha.wk"]) + weights["mha.bk"], cfg.num_heads)
    v = _split_heads(matmul(xq, weights["mha.wv"]) + weights["mha.bv"], cfg.num_heads)
    scale = 1.0 / math.sqrt(cfg.hidden_size // cfg.num_heads)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * scale
    if add_mask is not None:
        scores = scores + add_mask
    probs = dropout(softmax(scores, axis=-1), p, training, rng)
    ctx = _merge_heads(matmul(probs, v))
    out = matmul(ctx, weights["mha.wo"]) + weights["mha.bo"]
    result = xu + dropout(out, p, training, rng)
    return reshape(result, result.shape[1:]) if single else result
