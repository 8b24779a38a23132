"""Evaluation metrics for sentence-level scores and word/gap tag sequences.

Sentence level: Pearson, Spearman (average ranks on ties), MAE, RMSE and
the quantile-ranking DeltaAvg. Tag level: per-class F1 for OK and BAD plus
their product (F1-Multi), the primary word-level figure.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


class UndefinedCorrelationError(ValueError):
    """Correlation is undefined (constant input or fewer than two points)."""


def _validate_pair(x, y, min_n=2):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"inputs must be equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < min_n:
        raise UndefinedCorrelationError(f"need at least {min_n} points, got {x.size}")
    return x, y


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _validate_pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc)) * math.sqrt(float(yc @ yc))
    if denom == 0.0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return float(xc @ yc) / denom


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank block."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _validate_pair(x, y)
    return pearson(_average_ranks(x), _average_ranks(y))


def mae(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _validate_pair(x, y, min_n=1)
    return float(np.abs(x - y).mean())


def rmse(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _validate_pair(x, y, min_n=1)
    return float(np.sqrt(((x - y) ** 2).mean()))


def delta_avg(scores: Sequence[float], truth: Sequence[float]) -> float:
    """Quantile ranking quality of predicted scores against true HTER.

    Sentences are ranked by predicted score, best (lowest) first. For each
    quantile count q in 2..n//2 the first k/q fractions (k = 1..q-1) are
    compared with the global mean of the true values, and the deltas are
    averaged. Sign is oriented so that ranking by the true values themselves
    scores highest; random rankings score near zero.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if s.shape != t.shape or s.ndim != 1:
        raise ValueError(f"inputs must be equal-length vectors, got {s.shape} and {t.shape}")
    n = s.size
    if n < 4:
        raise ValueError(f"delta_avg needs at least 4 sentences, got {n}")
    order = np.argsort(s, kind="stable")
    # center first so a constant truth vector yields exactly zero
    centered = t[order] - t.mean()
    prefix = np.concatenate([[0.0], np.cumsum(centered)])
    deltas = []
    for q in range(2, n // 2 + 1):
        width = n // q
        heads = [prefix[k * width] / (k * width) for k in range(1, q)]
        deltas.append(float(np.mean(heads)))
    return -float(np.mean(deltas))


def f1_multi(pred: Sequence[int], truth: Sequence[int]) -> tuple[float, float, float]:
    """Per-class F1 for OK (0) and BAD (1), plus their product."""
    p = np.asarray(pred, dtype=np.int64).ravel()
    t = np.asarray(truth, dtype=np.int64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"tag sequences differ in length: {p.size} vs {t.size}")
    scores = []
    for cls in (0, 1):
        tp = int(np.sum((p == cls) & (t == cls)))
        fp = int(np.sum((p == cls) & (t != cls)))
        fn = int(np.sum((p != cls) & (t == cls)))
        if tp + fp + fn == 0:
            log.warning("class %d absent from predictions and truth; F1 set to 0", cls)
            scores.append(0.0)
            continue
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    f1_ok, f1_bad = scores
    return f1_ok, f1_bad, f1_ok * f1_bad


@dataclass
class MetricReport:
    """Bundle of whichever metrics a run produced; None marks absent tasks."""

    n_sentences: int = 0
    pearson: float | None = None
    spearman: float | None = None
    mae: float | None = None
    rmse: float | None = None
    delta_avg: float | None = None
    n_word_tokens: int = 0
    word_f1_ok: float | None = None
    word_f1_bad: float | None = None
    word_f1_multi: float | None = None
    n_gap_tokens: int = 0
    gap_f1_ok: float | None = None
    gap_f1_bad: float | None = None
    gap_f1_multi: float | None = None

    def as_kv(self) -> str:
        lines = []
        for name, value in vars(self).items():
            if value is None:
                continue
            if isinstance(value, float):
                lines.append(f"{name}={value:.6f}")
            else:
                lines.append(f"{name}={value}")
        return "\n".join(lines) + "\n"

    def as_text(self) -> str:
        rows = []
        if self.pearson is not None:
            rows.append(f"sentence level  (n={self.n_sentences})")
            for name in ("pearson", "spearman", "mae", "rmse", "delta_avg"):
                value = getattr(self, name)
                if value is not None:
                    rows.append(f"  {name:<10} {value: .4f}")
        if self.word_f1_multi is not None:
            rows.append(f"word level      (tokens={self.n_word_tokens})")
            rows.append(f"  {'f1_ok':<10} {self.word_f1_ok: .4f}")
            rows.append(f"  {'f1_bad':<10} {self.word_f1_bad: .4f}")
            rows.append(f"  {'f1_multi':<10} {self.word_f1_multi: .4f}")
        if self.gap_f1_multi is not None:
            rows.append(f"gap level       (gaps={self.n_gap_tokens})")
            rows.append(f"  {'f1_ok':<10} {self.gap_f1_ok: .4f}")
            rows.append(f"  {'f1_bad':<10} {self.gap_f1_bad: .4f}")
            rows.append(f"  {'f1_multi':<10} {self.gap_f1_multi: .4f}")
        return "\n".join(rows) + "\n"


def sentence_report(pred: Sequence[float], truth: Sequence[float]) -> MetricReport:
    pred = list(pred)
    truth = list(truth)
    report = MetricReport(n_sentences=len(pred))
    report.pearson = pearson(pred, truth)
    report.spearman = spearman(pred, truth)
    report.mae = mae(pred, truth)
    report.rmse = rmse(pred, truth)
    if len(pred) >= 4:
        report.delta_avg = delta_avg(pred, truth)
    return report
