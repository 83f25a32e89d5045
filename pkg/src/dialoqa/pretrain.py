"""Instance construction and losses for the three sequential pre-training
tasks: token-level MLM over the concatenated dialogue, utterance-level MLM
predicting a single masked word from the utterance CLS, and utterance order
prediction over the shuffled-or-not second half.

Sequence layouts:
    token-level  : [CLS] s_1 w_11 .. w_1n  s_2 w_21 ..   (one sequence per dialogue)
    per-utterance: [CLS] s_i w_i1 .. w_in               (u-MLM, UOP, fine-tuning)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Dialogue
from .encoder import EncoderWeights, ModelConfig, te_forward, tl_forward
from .errors import CapacityError, CorpusError
from .tensor import (
    Tensor,
    concat,
    index_select,
    matmul,
    mean_cross_entropy,
    reshape,
    transpose,
    tsum,
)
from .vocab import SPECIAL_TOKENS, Vocab, encode_utterance

UOP_SHUFFLED = 0
UOP_IN_ORDER = 1


@dataclass(frozen=True)
class TmlmInstance:
    token_ids: tuple[int, ...]
    mask_positions: tuple[int, ...]
    mask_labels: tuple[int, ...]


@dataclass(frozen=True)
class UmlmInstance:
    token_ids: tuple[int, ...]
    mask_position: int
    mask_label: int


@dataclass(frozen=True)
class UopInstance:
    utterance_token_ids: tuple[tuple[int, ...], ...]
    label: int  # UOP_IN_ORDER or UOP_SHUFFLED


# -- masking ------------------------------------------------------------------


def mask_tokens(
    vocab: Vocab,
    token_ids: Sequence[int],
    maskable_positions: Sequence[int],
    rng: np.random.Generator,
    ratio: float = 0.15,
    *,
    force_at_least_one: bool = True,
) -> tuple[list[int], list[int], list[int]]:
    """Select maskable positions independently with probability ``ratio``;
    of the selected, 80% become MASK, 10% a random non-special id, 10% stay
    unchanged. Returns (masked ids, positions, original labels)."""
    if not maskable_positions:
        raise CorpusError("mask_tokens: no maskable positions")
    ids = list(token_ids)
    positions = sorted(maskable_positions)
    draws = rng.random(len(positions))
    selected = [p for p, u in zip(positions, draws) if u < ratio]
    if not selected and force_at_least_one:
        selected = [positions[int(rng.integers(len(positions)))]]
    labels = []
    for p in selected:
        labels.append(ids[p])
        u = rng.random()
        if u < 0.8:
            ids[p] = vocab.mask
        elif u < 0.9:
            ids[p] = int(rng.integers(len(SPECIAL_TOKENS), len(vocab)))
    return ids, selected, labels


def encode_dialogue_concat(vocab: Vocab, dialogue: Dialogue) -> tuple[list[int], list[int]]:
    """[CLS] then speaker+words per utterance; also returns the positions of
    word slots whose id is maskable (not a special token)."""
    ids = [vocab.cls]
    maskable = []
    for utt in dialogue.utterances:
        utt_ids = encode_utterance(vocab, utt)
        base = len(ids)
        ids.extend(utt_ids)
        for j, tid in enumerate(utt_ids[1:], start=1):
            if not vocab.is_special(tid):
                maskable.append(base + j)
    return ids, maskable


def encode_utterance_with_cls(vocab: Vocab, utterance) -> list[int]:
    return [vocab.cls] + encode_utterance(vocab, utterance)


# -- instance builders ----------------------------------------------------


def build_tmlm_instance(
    vocab: Vocab,
    config: ModelConfig,
    dialogue: Dialogue,
    rng: np.random.Generator,
    ratio: float = 0.15,
    *,
    force_at_least_one: bool = True,
) -> TmlmInstance:
    ids, maskable = encode_dialogue_concat(vocab, dialogue)
    if len(ids) > config.token_position_capacity:
        raise CapacityError(
            f"dialogue encodes to {len(ids)} tokens, capacity is "
            f"{config.token_position_capacity}; truncate first"
        )
    masked, positions, labels = mask_tokens(
        vocab, ids, maskable, rng, ratio, force_at_least_one=force_at_least_one
    )
    return TmlmInstance(tuple(masked), tuple(positions), tuple(labels))


def build_umlm_instances(
    vocab: Vocab,
    dialogue: Dialogue,
    rng: np.random.Generator,
    samples_per_utterance: int = 1,
) -> list[UmlmInstance]:
    """Per utterance, sample distinct word positions without replacement (all
    of them when fewer exist); each yields one single-MASK instance over
    [CLS] s_i w_i1..w_in. Utterances with no maskable word are skipped."""
    if samples_per_utterance < 1:
        raise CorpusError(f"samples_per_utterance must be >= 1")
    out = []
    for utt in dialogue.utterances:
        ids = encode_utterance_with_cls(vocab, utt)
        word_slots = [j for j in range(2, len(ids)) if not vocab.is_special(ids[j])]
        if not word_slots:
            continue
        k = min(samples_per_utterance, len(word_slots))
        picks = rng.choice(len(word_slots), size=k, replace=False)
        for j in sorted(word_slots[i] for i in picks):
            masked = list(ids)
            label = masked[j]
            masked[j] = vocab.mask
            out.append(UmlmInstance(tuple(masked), j, label))
    return out


def build_uop_instance(
    vocab: Vocab,
    dialogue: Dialogue,
    rng: np.random.Generator,
    shuffle_prob: float = 0.5,
) -> UopInstance | None:
    """Split at ceil(m/2); with probability shuffle_prob the second half is
    replaced by a uniformly random non-identity permutation of itself.
    Returns None (skip) when the second half has fewer than 2 utterances,
    since no non-identity permutation exists."""
    utts = dialogue.utterances
    m = len(utts)
    split = (m + 1) // 2
    second = list(utts[split:])
    if len(second) < 2:
        return None
    label = UOP_IN_ORDER
    if rng.random() < shuffle_prob:
        n2 = len(second)
        while True:
            perm = rng.permutation(n2)
            if not np.array_equal(perm, np.arange(n2)):
                break
        second = [second[i] for i in perm]
        label = UOP_SHUFFLED
    ordered = list(utts[:split]) + second
    seqs = tuple(tuple(encode_utterance_with_cls(vocab, u)) for u in ordered)
    return UopInstance(seqs, label)


# -- batching helpers -----------------------------------------------------


def pad_batch(
    sequences: Sequence[Sequence[int]], pad_id: int
) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences to a rectangle; mask True on real positions."""
    n = len(sequences)
    width = max(len(s) for s in sequences)
    ids = np.full((n, width), pad_id, dtype=np.intp)
    mask = np.zeros((n, width), dtype=bool)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def vocab_logits(weights: EncoderWeights, rows: Tensor) -> Tensor:
    """Tied projection: rows (N, h) -> (N, |V|) through token_emb^T + bias."""
    return matmul(rows, transpose(weights["token_emb"], (1, 0))) + weights["vocab_bias"]


def _gather_rows(out: Tensor, flat_indices) -> Tensor:
    """Pick rows of a (B, L, h) tensor by flat index b*L + position."""
    b, l, h = out.shape
    return index_select(reshape(out, (b * l, h)), np.asarray(flat_indices, dtype=np.intp))


def _group_rows(rows: Tensor, counts: Sequence[int]) -> tuple[Tensor, np.ndarray]:
    """Regroup (N, h) rows into (B, S_max, h) with zero padding; also returns
    the (B, S_max) validity mask. Row order must follow the counts."""
    n, h = rows.shape
    b = len(counts)
    s_max = max(counts)
    padded = concat([rows, Tensor(np.zeros((1, h)))], axis=0)
    idx = np.full((b, s_max), n, dtype=np.intp)
    mask = np.zeros((b, s_max), dtype=bool)
    off = 0
    for i, c in enumerate(counts):
        idx[i, :c] = off + np.arange(c)
        mask[i, :c] = True
        off += c
    grouped = reshape(index_select(padded, idx.reshape(-1)), (b, s_max, h))
    return grouped, mask


# -- losses -----------------------------------------------------------------


def tmlm_batch_loss(
    weights: EncoderWeights,
    config: ModelConfig,
    instances: Sequence[TmlmInstance],
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean cross-entropy over every masked position in the batch, each
    predicted from its own output embedding through the tied projection."""
    ids, mask = pad_batch([inst.token_ids for inst in instances], 0)
    out = te_forward(weights, config, ids, mask, training=training, rng=rng)
    width = ids.shape[1]
    flat_idx = [
        b * width + p for b, inst in enumerate(instances) for p in inst.mask_positions
    ]
    labels = [lab for inst in instances for lab in inst.mask_labels]
    logits = vocab_logits(weights, _gather_rows(out, flat_idx))
    return mean_cross_entropy(logits, labels)


def tmlm_loss(
    weights: EncoderWeights,
    config: ModelConfig,
    instance: TmlmInstance,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    return tmlm_batch_loss(weights, config, [instance], training=training, rng=rng)


def umlm_batch_loss(
    weights: EncoderWeights,
    config: ModelConfig,
    instances: Sequence[UmlmInstance],
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Cross-entropy of each instance's single mask label predicted from the
    CLS output embedding, averaged over the batch."""
    ids, mask = pad_batch([inst.token_ids for inst in instances], 0)
    out = te_forward(weights, config, ids, mask, training=training, rng=rng)
    width = ids.shape[1]
    cls_rows = _gather_rows(out, [b * width for b in range(len(instances))])
    logits = vocab_logits(weights, cls_rows)
    return mean_cross_entropy(logits, [inst.mask_label for inst in instances])


def umlm_loss(
    weights: EncoderWeights,
    config: ModelConfig,
    instance: UmlmInstance,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    return umlm_batch_loss(weights, config, [instance], training=training, rng=rng)


def uop_batch_logits(
    weights: EncoderWeights,
    config: ModelConfig,
    instances: Sequence[UopInstance],
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """(B, 2) order logits: every utterance runs through TE independently,
    the CLS embeddings go through TL1/TL2 with utterance positions, and the
    mean-pooled sequence is projected to two classes."""
    seqs = [seq for inst in instances for seq in inst.utterance_token_ids]
    counts = [len(inst.utterance_token_ids) for inst in instances]
    ids, mask = pad_batch(seqs, 0)
    out = te_forward(weights, config, ids, mask, training=training, rng=rng)
    width = ids.shape[1]
    cls_rows = _gather_rows(out, [i * width for i in range(len(seqs))])
    grouped, utt_mask = _group_rows(cls_rows, counts)
    tc = tl_forward(
        weights, config, grouped,
        position_offset=1, attention_mask=utt_mask, training=training, rng=rng,
    )
    weights_mask = utt_mask[:, :, None].astype(np.float64)
    pooled = tsum(tc * Tensor(weights_mask), axis=1)
    pooled = pooled * Tensor(1.0 / utt_mask.sum(axis=1, keepdims=True))
    return matmul(pooled, weights["uop_w"]) + weights["uop_b"]


def uop_batch_loss(
    weights: EncoderWeights,
    config: ModelConfig,
    instances: Sequence[UopInstance],
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    logits = uop_batch_logits(weights, config, instances, training=training, rng=rng)
    return mean_cross_entropy(logits, [inst.label for inst in instances])


def uop_loss(
    weights: EncoderWeights,
    config: ModelConfig,
    instance: UopInstance,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    return uop_batch_loss(weights, config, [instance], training=training, rng=rng)


def mlm_perplexity(losses_and_counts: Sequence[tuple[float, int]]) -> float:
    """exp of the position-weighted mean cross-entropy."""
    total = sum(c for _, c in losses_and_counts)
    if total == 0:
        return math.nan
    return math.exp(sum(l * c for l, c in losses_and_counts) / total)
