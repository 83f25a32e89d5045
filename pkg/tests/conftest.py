"""Shared test helpers: the independent brute-force answer-selection oracle
and small fixture builders."""

import numpy as np


def brute_force_select(uid_scores, span_scores):
    """Exhaustive enumeration over all (utterance, l, r) candidates under the
    selection rule; returns (utterance_index, token_start, token_end) with
    (0, None, None) meaning no answer. Written independently of the library
    implementation."""
    uid = [float(x) for x in uid_scores]
    bearers = []
    for i, (ls, rs) in enumerate(span_scores):
        ls = [float(x) for x in ls]
        rs = [float(x) for x in rs]
        n = len(ls) - 1
        cands = [
            (ls[l] + rs[r], l, r)
            for l in range(1, n + 1)
            for r in range(l, n + 1)
        ]
        if not cands:
            continue
        best_sum = max(c[0] for c in cands)
        if best_sum > ls[0] + rs[0]:
            _, l, r = min(
                (c for c in cands if c[0] == best_sum), key=lambda c: (c[1], c[2])
            )
            bearers.append((i, l, r))
    top = uid.index(max(uid))
    if top == 0 or not bearers:
        return (0, None, None)
    best_uid = max(uid[b[0] + 1] for b in bearers)
    i, l, r = min((b for b in bearers if uid[b[0] + 1] == best_uid), key=lambda b: b[0])
    return (i + 1, l - 1, r - 1)


def random_score_grids(rng: np.random.Generator, *, integer: bool):
    """A random selection problem with m <= 4 utterances, n <= 5 tokens.
    Integer grids make ties frequent."""
    m = int(rng.integers(1, 5))
    uid = rng.integers(0, 4, size=m + 1).astype(float) if integer else rng.random(m + 1)
    spans = []
    for _ in range(m):
        n = int(rng.integers(1, 6))
        if integer:
            spans.append(
                (rng.integers(0, 3, size=n + 1).astype(float),
                 rng.integers(0, 3, size=n + 1).astype(float))
            )
        else:
            spans.append((rng.random(n + 1), rng.random(n + 1)))
    return uid, spans
