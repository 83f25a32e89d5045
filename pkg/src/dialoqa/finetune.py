"""Multi-task fine-tuning for span QA: utterance-ID prediction over the
TL-refined CLS sequence, per-utterance left/right span heads over the
question-attended token embeddings, the summed joint loss, and final answer
selection.

Label spaces: uid_label 0 means "no answer", i means utterance U_i (1-based).
Span slots are shifted by one: slot 0 is the null slot (the speaker position
of E'_i), slot k >= 1 addresses token w_ik.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Dialogue, QAExample
from .encoder import EncoderWeights, ModelConfig, mha_forward, te_forward, tl_forward
from .errors import CapacityError, ShapeError
from .pretrain import _gather_rows, _group_rows, pad_batch
from .tensor import (
    Tensor,
    cross_entropy,
    index_select,
    matmul,
    mean,
    reshape,
    softmax,
    stack,
)
from .vocab import Vocab, encode_utterance


@dataclass(frozen=True)
class QAEncoding:
    question_ids: tuple[int, ...]  # [CLS] q_1 .. q_n
    utterance_ids: tuple[tuple[int, ...], ...]  # [CLS] s_i w_i1 .. w_in each
    uid_label: int  # 0 = unanswerable
    span_labels: tuple[tuple[int, int], ...]  # per utterance (left, right)

    @property
    def num_utterances(self) -> int:
        return len(self.utterance_ids)


@dataclass(frozen=True)
class Prediction:
    utterance_index: int  # 0 = no answer, i = utterance U_i
    token_start: int | None  # 0-based within the utterance; None for no answer
    token_end: int | None
    uid_scores: tuple[float, ...]


def encode_for_qa(
    vocab: Vocab, config: ModelConfig, question: QAExample, dialogue: Dialogue
) -> QAEncoding:
    """Encode question and utterances as separate CLS-led sequences and derive
    labels from the first gold span. The dialogue must already be truncated
    to the config limits."""
    if len(dialogue.utterances) > config.max_utterances:
        raise CapacityError(
            f"dialogue has {len(dialogue.utterances)} utterances, "
            f"config allows {config.max_utterances}; truncate first"
        )
    for utt in dialogue.utterances:
        if len(utt.tokens) > config.max_tokens:
            raise CapacityError(
                f"utterance has {len(utt.tokens)} tokens, config allows "
                f"{config.max_tokens}; truncate first"
            )
    question_ids = tuple([vocab.cls] + [vocab.word_id(t) for t in question.question_tokens])
    utterance_ids = tuple(
        tuple([vocab.cls] + encode_utterance(vocab, u)) for u in dialogue.utterances
    )
    span_labels = [(0, 0)] * len(dialogue.utterances)
    uid_label = 0
    if question.answers:
        gold = question.answers[0]
        uid_label = gold.utterance_index + 1
        span_labels[gold.utterance_index] = (gold.token_start + 1, gold.token_end + 1)
    return QAEncoding(question_ids, utterance_ids, uid_label, tuple(span_labels))


def _qa_forward(
    weights: EncoderWeights,
    config: ModelConfig,
    encoding: QAEncoding,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """Shared forward: returns (uid_logits (m+1,), left logits (m, S),
    right logits (m, S), per-utterance head widths n_i+1)."""
    m = encoding.num_utterances
    seqs = [encoding.question_ids, *encoding.utterance_ids]
    ids, mask = pad_batch(seqs, 0)
    out = te_forward(weights, config, ids, mask, training=training, rng=rng)
    width = ids.shape[1]

    cls_rows = _gather_rows(out, [i * width for i in range(m + 1)])
    tc = tl_forward(
        weights, config, cls_rows, position_offset=0, training=training, rng=rng
    )
    uid_logits = reshape(matmul(tc, weights["uid_w"]) + weights["uid_b"], (m + 1,))

    q_len = len(encoding.question_ids)
    question_tokens = _gather_rows(out, list(range(1, q_len)))  # E'_q, no CLS
    utt_rows = _gather_rows(
        out,
        [i * width + j for i in range(1, m + 1) for j in range(1, len(seqs[i]))],
    )
    head_widths = [len(u) - 1 for u in encoding.utterance_ids]  # speaker + n_i
    grouped, valid = _group_rows(utt_rows, head_widths)
    attended = mha_forward(
        weights, config, question_tokens, grouped, training=training, rng=rng
    )
    s_max = grouped.shape[1]
    left = reshape(matmul(attended, weights["sl_w"]) + weights["sl_b"], (m, s_max))
    right = reshape(matmul(attended, weights["sr_w"]) + weights["sr_b"], (m, s_max))
    return uid_logits, left, right, head_widths


def _row_slice(t: Tensor, row: int, length: int) -> Tensor:
    picked = reshape(index_select(t, [row], axis=0), (t.shape[1],))
    return index_select(picked, np.arange(length))


def uid_forward(
    weights: EncoderWeights,
    config: ModelConfig,
    encoding: QAEncoding,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Softmax scores over m+1 labels; index 0 ("no answer") comes from the
    question position of T^c, index i from utterance U_i."""
    uid_logits, _, _, _ = _qa_forward(weights, config, encoding, training=training, rng=rng)
    return softmax(uid_logits, axis=-1)


def span_forward(
    weights: EncoderWeights,
    config: ModelConfig,
    encoding: QAEncoding,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> list[tuple[Tensor, Tensor]]:
    """Per utterance, (left, right) softmax score vectors of width n_i+1;
    slot 0 (the speaker position) is the null slot."""
    _, left, right, widths = _qa_forward(weights, config, encoding, training=training, rng=rng)
    out = []
    for i, n_plus_1 in enumerate(widths):
        out.append(
            (
                softmax(_row_slice(left, i, n_plus_1), axis=-1),
                softmax(_row_slice(right, i, n_plus_1), axis=-1),
            )
        )
    return out


def qa_loss_from_logits(
    uid_logits: Tensor,
    left: Tensor,
    right: Tensor,
    head_widths: Sequence[int],
    encoding: QAEncoding,
) -> Tensor:
    """Sum of the task cross-entropies. Answerable: UID CE plus left/right CE
    on the gold utterance. Unanswerable: UID CE plus the per-utterance
    null-slot CEs averaged over utterances."""
    loss = cross_entropy(uid_logits, encoding.uid_label)
    if encoding.uid_label > 0:
        g = encoding.uid_label - 1
        l_lab, r_lab = encoding.span_labels[g]
        loss = loss + cross_entropy(_row_slice(left, g, head_widths[g]), l_lab)
        loss = loss + cross_entropy(_row_slice(right, g, head_widths[g]), r_lab)
    else:
        l_terms = [
            cross_entropy(_row_slice(left, i, w), 0) for i, w in enumerate(head_widths)
        ]
        r_terms = [
            cross_entropy(_row_slice(right, i, w), 0) for i, w in enumerate(head_widths)
        ]
        loss = loss + mean(stack(l_terms)) + mean(stack(r_terms))
    return loss


def joint_loss(
    weights: EncoderWeights,
    config: ModelConfig,
    encoding: QAEncoding,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    uid_logits, left, right, widths = _qa_forward(
        weights, config, encoding, training=training, rng=rng
    )
    return qa_loss_from_logits(uid_logits, left, right, widths, encoding)


def predict(
    weights: EncoderWeights, config: ModelConfig, encoding: QAEncoding
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Inference scores: (uid softmax (m+1,), per-utterance (left, right)
    softmax arrays). Deterministic; dropout off."""
    uid_logits, left, right, widths = _qa_forward(weights, config, encoding)
    uid = softmax(uid_logits, axis=-1).array
    spans = []
    for i, n_plus_1 in enumerate(widths):
        ls = softmax(_row_slice(left, i, n_plus_1), axis=-1).array
        rs = softmax(_row_slice(right, i, n_plus_1), axis=-1).array
        spans.append((ls, rs))
    return uid, spans


def select_answer(uid_scores, span_scores) -> Prediction:
    """Pick the answer: per utterance the best (l, r) with 1 <= l <= r, an
    utterance bears a span when that sum beats its null slots, the highest
    UID score among span-bearing utterances wins; no answer when nothing
    bears a span or the UID argmax is label 0. Ties break toward the lowest
    utterance index, then lowest l, then lowest r."""
    uid = np.asarray(uid_scores, dtype=np.float64)
    if uid.ndim != 1 or uid.shape[0] != len(span_scores) + 1:
        raise ShapeError(
            f"uid scores of length {uid.shape} do not match "
            f"{len(span_scores)} utterances"
        )
    candidates: list[tuple[int, int, int]] = []
    for i, (ls, rs) in enumerate(span_scores):
        ls = np.asarray(ls, dtype=np.float64)
        rs = np.asarray(rs, dtype=np.float64)
        if ls.shape != rs.shape or ls.ndim != 1 or ls.shape[0] < 1:
            raise ShapeError(f"bad span score shapes for utterance {i}")
        n = ls.shape[0] - 1
        best = None
        for l in range(1, n + 1):
            for r in range(l, n + 1):
                s = ls[l] + rs[r]
                if best is None or s > best[0]:
                    best = (s, l, r)
        if best is not None and best[0] > ls[0] + rs[0]:
            candidates.append((i, best[1], best[2]))
    top = 0
    for i in range(1, uid.shape[0]):
        if uid[i] > uid[top]:
            top = i
    if top == 0 or not candidates:
        return Prediction(0, None, None, tuple(float(x) for x in uid))
    pick = candidates[0]
    for cand in candidates[1:]:
        if uid[cand[0] + 1] > uid[pick[0] + 1]:
            pick = cand
    i, l, r = pick
    return Prediction(i + 1, l - 1, r - 1, tuple(float(x) for x in uid))
