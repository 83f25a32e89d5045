"""Versioned binary checkpoints and cross-stage weight transfer.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header
(sorted keys), then the tensor payloads as little-endian float64 in header
directory order. Tensor names are sorted, offsets are derived, and the rng
state round-trips through the header, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import (
    STAGE_FINETUNED,
    STAGE_UOP,
    STAGES,
    EncoderWeights,
    ModelConfig,
    _init_tensor,
    stage_tensor_names,
    tensor_shape,
)
from .errors import CheckpointError, SequencingError
from .optim import AdamState
from .tensor import Tensor
from .vocab import Vocab

MAGIC = b"DLQACKP1"
FORMAT_VERSION = 1

_STAGE_ORDER = {s: i for i, s in enumerate(STAGES)}

# Tensors carried over between stages: the token encoder group always, the
# utterance-transformer group when the source stage has trained one.
_TE_GROUP_PREFIXES = ("token_emb", "token_pos_emb", "te.")
_TL_GROUP_PREFIXES = ("utt_pos_emb", "tl.")


@dataclass
class Checkpoint:
    weights: EncoderWeights
    vocab: Vocab
    global_step: int = 0
    adam: AdamState | None = None
    rng_state: dict | None = None
    train_state: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.weights.config

    @property
    def stage(self) -> str:
        return self.weights.stage

    def can_resume(self) -> bool:
        return self.adam is not None and self.rng_state is not None


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    tensors: dict[str, np.ndarray] = {
        name: p.array for name, p in ckpt.weights.named()
    }
    if ckpt.adam is not None:
        for name, m in ckpt.adam.first_moment.items():
            tensors[f"adam.m.{name}"] = m
        for name, v in ckpt.adam.second_moment.items():
            tensors[f"adam.v.{name}"] = v
    directory = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": FORMAT_VERSION,
        "stage": ckpt.stage,
        "global_step": ckpt.global_step,
        "model_config": ckpt.config.to_dict(),
        "vocab": list(ckpt.vocab.id_to_token),
        "adam": None
        if ckpt.adam is None
        else {
            "beta1": ckpt.adam.beta1,
            "beta2": ckpt.adam.beta2,
            "epsilon": ckpt.adam.epsilon,
            "weight_decay": ckpt.adam.weight_decay,
            "step": ckpt.adam.step,
        },
        "rng_state": ckpt.rng_state,
        "train_state": ckpt.train_state,
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in sorted(tensors):
            f.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {header.get('format_version')} "
            f"unsupported (expected {FORMAT_VERSION})"
        )
    config = ModelConfig.from_dict(header["model_config"])
    stage = header["stage"]
    vocab = Vocab.from_tokens(header["vocab"])
    payload = raw[16 + hlen :]
    arrays: dict[str, np.ndarray] = {}
    for ent in header["tensors"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        arrays[ent["name"]] = arr.reshape(shape).astype(np.float64)

    expected = stage_tensor_names(config, stage)
    params: dict[str, Tensor] = {}
    for name in expected:
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name!r} for stage {stage}")
        want = tensor_shape(config, name)
        if arrays[name].shape != want:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {arrays[name].shape}, "
                f"config implies {want}"
            )
        params[name] = Tensor(arrays[name].copy(), requires_grad=True)
    weights = EncoderWeights(config, stage, params)

    adam = None
    if header["adam"] is not None:
        a = header["adam"]
        adam = AdamState(
            beta1=a["beta1"],
            beta2=a["beta2"],
            epsilon=a["epsilon"],
            weight_decay=a["weight_decay"],
            step=a["step"],
        )
        for name in expected:
            mkey, vkey = f"adam.m.{name}", f"adam.v.{name}"
            if mkey in arrays:
                adam.first_moment[name] = arrays[mkey].copy()
            if vkey in arrays:
                adam.second_moment[name] = arrays[vkey].copy()
    return Checkpoint(
        weights=weights,
        vocab=vocab,
        global_step=header["global_step"],
        adam=adam,
        rng_state=header["rng_state"],
        train_state=header["train_state"],
    )


def _in_group(name: str, prefixes: tuple[str, ...]) -> bool:
    return any(name == p or name.startswith(p) for p in prefixes)


def transfer_weights(
    source: Checkpoint,
    target_stage: str,
    target_config: ModelConfig,
    rng: np.random.Generator,
) -> EncoderWeights:
    """Initialize weights for the next stage: token-encoder tensors copied
    exactly, utterance-transformer tensors copied when the source stage has
    them, everything else (new task heads included) freshly initialized."""
    if target_stage not in _STAGE_ORDER:
        raise SequencingError(f"unknown stage {target_stage!r}")
    if _STAGE_ORDER[source.stage] >= _STAGE_ORDER[target_stage]:
        raise SequencingError(
            f"cannot transfer from stage {source.stage!r} to {target_stage!r}"
        )
    source_has_tl = source.stage in (STAGE_UOP, STAGE_FINETUNED)
    params: dict[str, Tensor] = {}
    mismatched: list[str] = []
    for name in stage_tensor_names(target_config, target_stage):
        want = tensor_shape(target_config, name)
        copy = _in_group(name, _TE_GROUP_PREFIXES) or (
            source_has_tl and _in_group(name, _TL_GROUP_PREFIXES)
        )
        if copy:
            if name not in source.weights:
                mismatched.append(f"{name} (absent in source)")
                continue
            src = source.weights[name].array
            if src.shape != want:
                mismatched.append(f"{name} (source {src.shape} vs target {want})")
                continue
            params[name] = Tensor(src.copy(), requires_grad=True)
        else:
            params[name] = _init_tensor(name, want, rng)
    if mismatched:
        raise CheckpointError(
            "incompatible checkpoint for transfer; offending tensors: "
            + ", ".join(mismatched)
        )
    return EncoderWeights(target_config, target_stage, params)
