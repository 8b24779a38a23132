"""QE ground truth from (translation, post-edit) pairs.

A shift-free minimal edit alignment (unit-cost Levenshtein over tokens)
yields the sentence HTER, per-token OK/BAD word tags and per-boundary
OK/BAD gap tags. Reordering shows up as deletion plus insertion, never as
a shift operation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

OK = 0
BAD = 1

MATCH = "match"
SUB = "sub"
DEL = "del"
INS = "ins"

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EditOp:
    """One alignment step. ``i`` indexes the MT side, ``j`` the post-edit
    side; -1 marks the side an op does not touch."""

    kind: str
    i: int
    j: int


@dataclass(frozen=True)
class QeLabels:
    h: float
    y: tuple[int, ...]
    g: tuple[int, ...]


def align(m: Sequence, t: Sequence) -> list[EditOp]:
    """Minimal edit script turning ``m`` into ``t``.

    Unit costs for substitution, deletion and insertion. Ties during
    backtrace prefer match/substitute, then delete, then insert, so equal
    inputs always produce identical scripts.
    """
    lm, lt = len(m), len(t)
    d = [[0] * (lt + 1) for _ in range(lm + 1)]
    for i in range(1, lm + 1):
        d[i][0] = i
    for j in range(1, lt + 1):
        d[0][j] = j
    for i in range(1, lm + 1):
        row, prev = d[i], d[i - 1]
        mi = m[i - 1]
        for j in range(1, lt + 1):
            diag = prev[j - 1] + (mi != t[j - 1])
            up = prev[j] + 1
            left = row[j - 1] + 1
            best = diag
            if up < best:
                best = up
            if left < best:
                best = left
            row[j] = best

    ops: list[EditOp] = []
    i, j = lm, lt
    while i > 0 or j > 0:
        cur = d[i][j]
        if i > 0 and j > 0 and cur == d[i - 1][j - 1] + (m[i - 1] != t[j - 1]):
            kind = MATCH if m[i - 1] == t[j - 1] else SUB
            ops.append(EditOp(kind, i - 1, j - 1))
            i -= 1
            j -= 1
        elif i > 0 and cur == d[i - 1][j] + 1:
            ops.append(EditOp(DEL, i - 1, -1))
            i -= 1
        else:
            ops.append(EditOp(INS, -1, j - 1))
            j -= 1
    ops.reverse()
    return ops


def script_cost(script: Sequence[EditOp]) -> int:
    return sum(1 for op in script if op.kind != MATCH)


def hter(script: Sequence[EditOp], t_len: int) -> float:
    """Edit fraction relative to the post-edit length, clipped to [0, 1]."""
    cost = script_cost(script)
    if t_len <= 0:
        if cost > 0:
            log.warning("empty post-edit with %d edits; HTER defined as 1.0", cost)
            return 1.0
        return 0.0
    return min(1.0, cost / t_len)


def word_tags(script: Sequence[EditOp], m_len: int) -> list[int]:
    """OK per matched MT token; substituted or deleted tokens are BAD."""
    tags = [BAD] * m_len
    for op in script:
        if op.kind == MATCH:
            tags[op.i] = OK
    return tags


def gap_tags(script: Sequence[EditOp], m_len: int) -> list[int]:
    """One tag per boundary (m_len + 1 of them, sentence start included).

    A gap is BAD when the alignment inserts at least one post-edit token
    at that boundary; several insertions still give a single BAD tag.
    """
    tags = [OK] * (m_len + 1)
    consumed = 0
    for op in script:
        if op.kind == INS:
            tags[consumed] = BAD
        else:
            consumed += 1
    return tags


def label(m: Sequence, t: Sequence) -> QeLabels:
    """HTER plus word and gap tags for one (MT, post-edit) pair."""
    script = align(m, t)
    return QeLabels(
        h=hter(script, len(t)),
        y=tuple(word_tags(script, len(m))),
        g=tuple(gap_tags(script, len(m))),
    )
