"""Deterministic synthetic dialogue/QA corpus generator.

Every utterance opens with an ordinal marker tied to its position (so
utterance order is recoverable from content) followed by one templated fact.
Questions ask about a fact's key entity, answers are spans inside the fact's
utterance, and unanswerable questions reference an entity the dialogue never
mentions. Entities are drawn without replacement inside a dialogue so each
question has a unique supporting utterance.
"""

from __future__ import annotations

import numpy as np

from .corpus import AnswerSpan, Dialogue, QAExample, Utterance, make_example

SPEAKERS = ("alice", "bob", "carol", "dave", "erin", "frank")
ORDINALS = ("first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth")
OBJECTS = ("keys", "wallet", "phone", "book", "lamp", "ticket", "umbrella",
           "jacket", "letter", "camera", "map", "radio")
PLACES = ("kitchen", "garage", "office", "park", "library", "station", "attic", "cafe")
DAYS = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")
EVENTS = ("meeting", "party", "dinner", "rehearsal", "exam", "picnic", "concert", "game")
CAUSES = ("rain", "traffic", "noise", "strike", "fog", "thunder")
VEHICLES = ("train", "bus", "bike", "car", "tram")
NAMES = SPEAKERS

FACT_TYPES = ("where", "who", "when", "what", "why", "how")


def _build_fact(kind: str, rng: np.random.Generator, used: dict[str, set]):
    """Returns (utterance tokens, question text, relative answer span, key)."""

    def fresh(pool_name: str, pool: tuple[str, ...]) -> str:
        taken = used.setdefault(pool_name, set())
        options = [x for x in pool if x not in taken]
        pick = options[int(rng.integers(len(options)))]
        taken.add(pick)
        return pick

    if kind == "where":
        obj = fresh("objects", OBJECTS)
        place = PLACES[int(rng.integers(len(PLACES)))]
        tokens = ["the", obj, "is", "in", "the", place]
        return tokens, f"where is the {obj}", (4, 5), obj
    if kind == "who":
        obj = fresh("objects", OBJECTS)
        name = NAMES[int(rng.integers(len(NAMES)))]
        tokens = [name, "kept", "the", obj]
        return tokens, f"who kept the {obj}", (0, 0), obj
    if kind == "when":
        event = fresh("events", EVENTS)
        day = DAYS[int(rng.integers(len(DAYS)))]
        tokens = ["the", event, "is", "on", day]
        return tokens, f"when is the {event}", (3, 4), event
    if kind == "what":
        obj = fresh("objects", OBJECTS)
        name = fresh("names", NAMES)  # the question keys on the name
        tokens = [name, "found", "the", obj]
        return tokens, f"what did {name} find", (2, 3), obj
    if kind == "why":
        event = fresh("events", EVENTS)
        cause = CAUSES[int(rng.integers(len(CAUSES)))]
        tokens = ["the", event, "stopped", "because", "of", "the", cause]
        return tokens, f"why did the {event} stop", (3, 6), event
    if kind == "how":
        name = fresh("names", NAMES)
        vehicle = VEHICLES[int(rng.integers(len(VEHICLES)))]
        tokens = [name, "traveled", "by", vehicle]
        return tokens, f"how did {name} travel", (2, 3), name
    raise ValueError(f"unknown fact kind {kind!r}")


def _unanswerable_question(rng: np.random.Generator, used: dict[str, set]) -> str:
    unused = [o for o in OBJECTS if o not in used.get("objects", set())]
    obj = unused[int(rng.integers(len(unused)))]
    used.setdefault("objects", set()).add(obj)
    return f"where is the {obj}"


def generate_dialogue(
    episode_id: int,
    scene_id: str,
    rng: np.random.Generator,
    *,
    min_utterances: int = 4,
    max_utterances: int = 6,
    questions: int = 3,
    unanswerable_fraction: float = 0.15,
) -> tuple[Dialogue, list[QAExample]]:
    m = int(rng.integers(min_utterances, max_utterances + 1))
    cast = list(rng.choice(len(SPEAKERS), size=3, replace=False))
    used: dict[str, set] = {}
    utterances = []
    facts = []  # (utterance index, question text, answer span)
    for i in range(m):
        kind = FACT_TYPES[int(rng.integers(len(FACT_TYPES)))]
        tokens, question, (a0, a1), _key = _build_fact(kind, rng, used)
        full = [ORDINALS[i]] + tokens  # the marker shifts spans by one
        speaker = SPEAKERS[cast[int(rng.integers(len(cast)))]]
        utterances.append(Utterance(speaker, tuple(full)))
        facts.append((i, question, (a0 + 1, a1 + 1)))
    dialogue = Dialogue(episode_id, scene_id, tuple(utterances))

    examples = []
    q_count = min(questions, m)
    picks = rng.choice(m, size=q_count, replace=False)
    for k, fi in enumerate(sorted(int(p) for p in picks)):
        qid = f"e{episode_id}{scene_id}q{k}"
        ui, question, (a0, a1) = facts[fi]
        if rng.random() < unanswerable_fraction:
            examples.append(make_example(qid, _unanswerable_question(rng, used), ()))
            continue
        text = " ".join(utterances[ui].tokens[a0 : a1 + 1])
        span = AnswerSpan(ui, a0, a1, text)
        examples.append(make_example(qid, question, (span,)))
    return dialogue, examples


def generate_corpus(
    *,
    num_episodes: int = 26,
    scenes_per_episode: int = 2,
    questions_per_dialogue: int = 3,
    seed: int = 0,
    min_utterances: int = 4,
    max_utterances: int = 6,
    unanswerable_fraction: float = 0.15,
) -> list[tuple[Dialogue, list[QAExample]]]:
    rng = np.random.default_rng(seed)
    corpus = []
    for ep in range(1, num_episodes + 1):
        for sc in range(scenes_per_episode):
            corpus.append(
                generate_dialogue(
                    ep,
                    f"s{sc}",
                    rng,
                    min_utterances=min_utterances,
                    max_utterances=max_utterances,
                    questions=questions_per_dialogue,
                    unanswerable_fraction=unanswerable_fraction,
                )
            )
    return corpus
