"""Corpus data model: dialogues made of speaker turns, questions with gold
answer spans, JSON ingestion with validation, episode-based splitting, and
length truncation.

On-disk schema (UTF-8 JSON):

    {"dialogues": [{
        "episode_id": int, "scene_id": str,
        "utterances": [{"speaker": str, "text": str}],
        "questions": [{"qid": str, "question": str,
                       "answers": [{"utterance_index": int, "token_start": int,
                                    "token_end": int, "text": str}]}]}]}

Token indices refer to whitespace tokenization of the lowercased utterance
text. Answer spans never cross utterance boundaries.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .errors import CorpusError
from .vocab import tokenize

QUESTION_TYPES = ("what", "who", "when", "where", "why", "how")


@dataclass(frozen=True)
class Utterance:
    speaker: str
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class Dialogue:
    episode_id: int
    scene_id: str
    utterances: tuple[Utterance, ...]


@dataclass(frozen=True)
class AnswerSpan:
    utterance_index: int
    token_start: int
    token_end: int  # inclusive
    text: str


@dataclass(frozen=True)
class QAExample:
    qid: str
    question_tokens: tuple[str, ...]
    answers: tuple[AnswerSpan, ...]
    question_type: str

    @property
    def answerable(self) -> bool:
        return bool(self.answers)


@dataclass(frozen=True)
class CorpusSplit:
    training: tuple[tuple[Dialogue, tuple[QAExample, ...]], ...]
    development: tuple[tuple[Dialogue, tuple[QAExample, ...]], ...]
    evaluation: tuple[tuple[Dialogue, tuple[QAExample, ...]], ...]
    pretrain_extra: tuple[Dialogue, ...] = field(default_factory=tuple)


def question_type_of(question_tokens: Sequence[str]) -> str:
    """First interrogative word wins; 'other' when none appears."""
    for tok in question_tokens:
        w = tok.lower()
        if w in QUESTION_TYPES:
            return w
    return "other"


def _normalize_text(text: str) -> str:
    return re.sub(r"\s+", " ", text.lower()).strip()


def make_example(qid: str, question: str, answers: Sequence[AnswerSpan]) -> QAExample:
    toks = tuple(tokenize(question))
    return QAExample(qid, toks, tuple(answers), question_type_of(toks))


def _validate_span(span: AnswerSpan, dialogue: Dialogue, qid: str) -> None:
    if not 0 <= span.utterance_index < len(dialogue.utterances):
        raise CorpusError(
            f"question {qid!r}: answer utterance_index {span.utterance_index} "
            f"out of range for {len(dialogue.utterances)} utterances"
        )
    toks = dialogue.utterances[span.utterance_index].tokens
    if not 0 <= span.token_start <= span.token_end < len(toks):
        raise CorpusError(
            f"question {qid!r}: answer span [{span.token_start}, {span.token_end}] "
            f"out of range for utterance of {len(toks)} tokens"
        )
    joined = " ".join(toks[span.token_start : span.token_end + 1])
    if _normalize_text(span.text) != joined:
        raise CorpusError(
            f"question {qid!r}: answer text {span.text!r} does not match "
            f"span tokens {joined!r}"
        )


def load_corpus(path: str | Path) -> list[tuple[Dialogue, list[QAExample]]]:
    """Parse and validate a corpus file; rejects violating records with their
    location."""
    raw = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise CorpusError(f"{path}: malformed JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(doc, dict) or "dialogues" not in doc:
        raise CorpusError(f"{path}: expected a top-level object with 'dialogues'")
    out: list[tuple[Dialogue, list[QAExample]]] = []
    for di, dd in enumerate(doc["dialogues"]):
        where = f"{path}: dialogues[{di}]"
        try:
            episode_id = int(dd["episode_id"])
            scene_id = str(dd["scene_id"])
            utterances = []
            for ud in dd["utterances"]:
                toks = tuple(tokenize(str(ud["text"])))
                if not toks:
                    raise CorpusError(f"{where}: utterance with empty text")
                utterances.append(Utterance(str(ud["speaker"]), toks))
        except (KeyError, TypeError, ValueError) as e:
            raise CorpusError(f"{where}: {e}") from e
        if episode_id < 1:
            raise CorpusError(f"{where}: episode_id must be positive")
        if not utterances:
            raise CorpusError(f"{where}: dialogue has no utterances")
        dialogue = Dialogue(episode_id, scene_id, tuple(utterances))
        questions = []
        for qd in dd.get("questions", ()):
            try:
                qid = str(qd["qid"])
                spans = tuple(
                    AnswerSpan(
                        int(ad["utterance_index"]),
                        int(ad["token_start"]),
                        int(ad["token_end"]),
                        str(ad["text"]),
                    )
                    for ad in qd.get("answers", ())
                )
                ex = make_example(qid, str(qd["question"]), spans)
            except (KeyError, TypeError, ValueError) as e:
                raise CorpusError(f"{where}: bad question record: {e}") from e
            for span in ex.answers:
                _validate_span(span, dialogue, ex.qid)
            questions.append(ex)
        out.append((dialogue, questions))
    return out


def save_corpus(
    corpus: Sequence[tuple[Dialogue, Sequence[QAExample]]], path: str | Path
) -> None:
    doc = {
        "dialogues": [
            {
                "episode_id": d.episode_id,
                "scene_id": d.scene_id,
                "utterances": [
                    {"speaker": u.speaker, "text": " ".join(u.tokens)}
                    for u in d.utterances
                ],
                "questions": [
                    {
                        "qid": q.qid,
                        "question": " ".join(q.question_tokens),
                        "answers": [
                            {
                                "utterance_index": a.utterance_index,
                                "token_start": a.token_start,
                                "token_end": a.token_end,
                                "text": a.text,
                            }
                            for a in q.answers
                        ],
                    }
                    for q in qs
                ],
            }
            for d, qs in corpus
        ]
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def split_by_episode(
    corpus: Sequence[tuple[Dialogue, Sequence[QAExample]]],
    train_max_episode: int = 20,
    dev_max_episode: int = 22,
    pretrain_extra: Sequence[Dialogue] = (),
) -> CorpusSplit:
    """Partition by episode id: <= train_max train, <= dev_max development,
    the rest evaluation. Scenes of one episode never straddle splits."""
    if train_max_episode >= dev_max_episode:
        raise CorpusError(
            f"train_max_episode {train_max_episode} must be < "
            f"dev_max_episode {dev_max_episode}"
        )
    train, dev, evaluation = [], [], []
    for d, qs in corpus:
        entry = (d, tuple(qs))
        if d.episode_id <= train_max_episode:
            train.append(entry)
        elif d.episode_id <= dev_max_episode:
            dev.append(entry)
        else:
            evaluation.append(entry)
    return CorpusSplit(tuple(train), tuple(dev), tuple(evaluation), tuple(pretrain_extra))


def truncate(dialogue: Dialogue, m_max: int, n_max: int) -> Dialogue:
    """Keep the first m_max utterances and the first n_max tokens of each."""
    if m_max < 1 or n_max < 1:
        raise CorpusError(f"truncation limits must be >= 1, got ({m_max}, {n_max})")
    utts = tuple(
        replace(u, tokens=u.tokens[:n_max]) for u in dialogue.utterances[:m_max]
    )
    return replace(dialogue, utterances=utts)


def truncate_pair(
    dialogue: Dialogue,
    questions: Sequence[QAExample],
    m_max: int,
    n_max: int,
) -> tuple[Dialogue, list[QAExample]]:
    """Truncate a dialogue and drop gold spans that fall outside the kept
    region; a question whose spans all drop becomes unanswerable."""
    d = truncate(dialogue, m_max, n_max)
    kept_questions = []
    for q in questions:
        kept = tuple(
            a
            for a in q.answers
            if a.utterance_index < m_max and a.token_end < n_max
        )
        kept_questions.append(replace(q, answers=kept))
    return d, kept_questions
