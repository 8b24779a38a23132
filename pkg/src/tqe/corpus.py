"""Corpus handling: filtering, vocabulary, BPE and the synthetic QE task.

Word tokenization is whitespace splitting (QE corpora come pre-tokenized);
BPE is an optional layer on top. The segmentation matrix produced while
applying BPE maps subword-level feature rows back to word-level rows by
averaging, via a single (sparse, row-stochastic) matrix product.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .ter_labeler import label

log = logging.getLogger(__name__)

PAD_ID, UNK_ID, BOS_ID, EOS_ID, BLANK_ID = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("<pad>", "<unk>", "<s>", "</s>", "<blank>")

MAX_SENTENCE_LEN = 70
MIN_LENGTH_RATIO = 1.0 / 3.0
MAX_LENGTH_RATIO = 3.0

BPE_END = "</w>"


class Vocab:
    """Token-to-id map with fixed reserved ids (pad, unk, bos, eos, blank)."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.tokens: list[str] = list(RESERVED_TOKENS)
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.index:
            self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return self.index[token]

    @classmethod
    def build(cls, corpus: Iterable[Sequence[str]], max_size: int | None = None,
              min_count: int = 1) -> "Vocab":
        """Frequency-sorted vocabulary; ties broken by token string so the
        result is independent of corpus order."""
        counts: dict[str, int] = {}
        for sent in corpus:
            for tok in sent:
                counts[tok] = counts.get(tok, 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        vocab = cls()
        for tok, c in ranked:
            if c < min_count:
                break
            if max_size is not None and len(vocab) >= max_size:
                break
            vocab.add(tok)
        return vocab

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index


def filter_pair(s: Sequence[str], t: Sequence[str]) -> bool:
    """Keep a pair only if both sides are short enough and the length ratio
    stays within [1/3, 3]. Empty sides are rejected."""
    if not s or not t:
        log.warning("dropping pair with an empty side")
        return False
    if len(s) > MAX_SENTENCE_LEN or len(t) > MAX_SENTENCE_LEN:
        return False
    ratio = len(s) / len(t)
    return MIN_LENGTH_RATIO <= ratio <= MAX_LENGTH_RATIO


def combine_training_corpus(parallel: Sequence, qe_pairs: Sequence,
                            rng: np.random.Generator) -> list:
    """Pretraining corpus: the parallel pairs plus ten copies of the QE
    (source, post-edit) pairs, shuffled."""
    combined = list(parallel) + 10 * list(qe_pairs)
    rng.shuffle(combined)
    return combined


# ---------------------------------------------------------------------------
# byte pair encoding

@dataclass
class BpeMerges:
    """Ordered merge rules. Rank order is the application priority."""

    rules: list[tuple[str, str]] = field(default_factory=list)

    def rank(self) -> dict[tuple[str, str], int]:
        return {pair: i for i, pair in enumerate(self.rules)}

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for a, b in self.rules:
                fh.write(f"{a} {b}\n")

    @classmethod
    def load(cls, path: str | Path) -> "BpeMerges":
        rules = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split(" ")
                if len(parts) == 2:
                    rules.append((parts[0], parts[1]))
        return cls(rules)


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word) + (BPE_END,)


def learn_bpe(corpus: Iterable[Sequence[str]], num_merges: int) -> BpeMerges:
    """Greedy most-frequent adjacent-pair merges; ties prefer the
    lexicographically smallest pair, so learning is deterministic."""
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    word_counts: dict[tuple[str, ...], int] = {}
    for sent in corpus:
        for word in sent:
            sym = _word_symbols(word)
            word_counts[sym] = word_counts.get(sym, 0) + 1
    words = list(word_counts.items())
    rules: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pair_counts: dict[tuple[str, str], int] = {}
        for sym, count in words:
            for a, b in zip(sym, sym[1:]):
                pair_counts[(a, b)] = pair_counts.get((a, b), 0) + count
        if not pair_counts:
            break
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        rules.append(best)
        merged = best[0] + best[1]
        new_words = []
        for sym, count in words:
            out = []
            i = 0
            while i < len(sym):
                if i + 1 < len(sym) and (sym[i], sym[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(sym[i])
                    i += 1
            new_words.append((tuple(out), count))
        words = new_words
    return BpeMerges(rules)


def bpe_segment_word(word: str, merges: BpeMerges,
                     _rank_cache: dict | None = None) -> list[str]:
    """Split one word into subword units by replaying the merge rules."""
    ranks = merges.rank() if _rank_cache is None else _rank_cache
    sym = list(_word_symbols(word))
    while len(sym) > 1:
        best_rank, best_pos = None, None
        for i, pair in enumerate(zip(sym, sym[1:])):
            r = ranks.get(pair)
            if r is not None and (best_rank is None or r < best_rank):
                best_rank, best_pos = r, i
        if best_rank is None:
            break
        target = (sym[best_pos], sym[best_pos + 1])
        out = []
        i = 0
        while i < len(sym):
            if i + 1 < len(sym) and (sym[i], sym[i + 1]) == target:
                out.append(sym[i] + sym[i + 1])
                i += 2
            else:
                out.append(sym[i])
                i += 1
        sym = out
    return sym


def bpe_decode(subwords: Sequence[str]) -> list[str]:
    """Rejoin subword units into words at the end-of-word markers."""
    words, current = [], ""
    for unit in subwords:
        current += unit
        if current.endswith(BPE_END):
            words.append(current[: -len(BPE_END)])
            current = ""
    if current:
        words.append(current)
    return words


@dataclass
class SegmentationMatrix:
    """Row-stochastic sparse map from subword feature rows to word rows.

    Row i holds weight 1/n on each of word i's n subword columns; the
    column supports partition the subwords.
    """

    n_words: int
    n_subwords: int
    rows: list[list[int]]

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_words, self.n_subwords))
        for i, cols in enumerate(self.rows):
            dense[i, cols] = 1.0 / len(cols)
        return dense

    def validate(self) -> None:
        seen: list[int] = []
        for cols in self.rows:
            if not cols:
                raise ValueError("segmentation row without any subword")
            seen.extend(cols)
        if sorted(seen) != list(range(self.n_subwords)):
            raise ValueError("subword columns do not partition the units")


def apply_bpe(words: Sequence[str], merges: BpeMerges) -> tuple[list[str], SegmentationMatrix]:
    """Segment a word sequence; also return the word/subword alignment."""
    ranks = merges.rank()
    subwords: list[str] = []
    rows: list[list[int]] = []
    for word in words:
        units = bpe_segment_word(word, merges, ranks)
        start = len(subwords)
        subwords.extend(units)
        rows.append(list(range(start, len(subwords))))
    return subwords, SegmentationMatrix(len(words), len(subwords), rows)


def pool_features(features, seg: SegmentationMatrix):
    """Average subword feature rows into word rows, i.e. multiply by the
    segmentation matrix. Tensors go through a dense matmul and stay
    differentiable; ndarrays take a sparse path that accumulates each row's
    weighted terms in column order, exactly matching a per-word loop."""
    if isinstance(features, ad.Tensor):
        if features.shape[0] != seg.n_subwords:
            raise ad.ShapeError(
                f"feature rows {features.shape[0]} != subword count {seg.n_subwords}"
            )
        return ad.matmul(ad.Tensor(seg.to_dense()), features)
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != seg.n_subwords:
        raise ad.ShapeError(
            f"feature rows {features.shape[0]} != subword count {seg.n_subwords}"
        )
    out = np.empty((seg.n_words,) + features.shape[1:])
    for i, cols in enumerate(seg.rows):
        weight = 1.0 / len(cols)
        acc = features[cols[0]] * weight
        for j in cols[1:]:
            acc = acc + features[j] * weight
        out[i] = acc
    return out


# ---------------------------------------------------------------------------
# synthetic desk-scale task

@dataclass
class TripletExample:
    """One QE record: source, MT output, post-edit, and derived labels."""

    s: list[str]
    m: list[str]
    t: list[str]
    h: float
    y: list[int]
    g: list[int]


@dataclass
class SynthConfig:
    vocab_size: int = 64
    n_parallel: int = 2000
    n_triplets: int = 900
    p_sub: float = 0.15
    p_del: float = 0.05
    p_ins: float = 0.05
    min_len: int = 4
    max_len: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 8:
            raise ValueError("vocab_size must be at least 8")
        for name in ("p_sub", "p_del", "p_ins"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {rate}")


@dataclass
class SynthTask:
    parallel: list[tuple[list[str], list[str]]]
    triplets: list[TripletExample]
    # generator-side edit accounting, the oracle for mean-HTER checks
    applied_edit_fraction: float


def _make_translator(vocab_size: int, rng: np.random.Generator):
    src_words = [f"s{i}" for i in range(vocab_size)]
    tgt_words = [f"t{i}" for i in range(vocab_size)]
    perm = rng.permutation(vocab_size)
    mapping = {src_words[i]: tgt_words[perm[i]] for i in range(vocab_size)}

    def translate(src_sent: list[str]) -> list[str]:
        # symbol-wise mapping, then reversal: target order depends on
        # source order, so source attention has to carry real signal
        return [mapping[w] for w in reversed(src_sent)]

    return src_words, tgt_words, translate


def _corrupt(t: list[str], tgt_words: list[str], cfg: SynthConfig,
             rng: np.random.Generator) -> tuple[list[str], int]:
    """Substitution, deletion and insertion noise; returns the corrupted
    sequence and the number of edits actually applied."""
    edits = 0
    out: list[str] = []
    for tok in t:
        if rng.random() < cfg.p_ins:
            out.append(tgt_words[rng.integers(len(tgt_words))])
            edits += 1
        if rng.random() < cfg.p_del:
            edits += 1
            continue
        if rng.random() < cfg.p_sub:
            choice = tok
            while choice == tok:
                choice = tgt_words[rng.integers(len(tgt_words))]
            out.append(choice)
            edits += 1
        else:
            out.append(tok)
    if rng.random() < cfg.p_ins:
        out.append(tgt_words[rng.integers(len(tgt_words))])
        edits += 1
    return out, edits


def generate_synthetic_task(cfg: SynthConfig) -> SynthTask:
    """Random parallel corpus plus QE triplets with exact labels.

    Sources are uniform random over the synthetic alphabet; the true
    target is a fixed bijective word mapping applied to the reversed
    source; the MT side is the target corrupted at the configured rates.
    Labels come from the edit-alignment labeler.
    """
    rng = np.random.default_rng(cfg.seed)
    src_words, tgt_words, translate = _make_translator(cfg.vocab_size, rng)

    def sample_source() -> list[str]:
        n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        return [src_words[i] for i in rng.integers(len(src_words), size=n)]

    parallel = []
    for _ in range(cfg.n_parallel):
        s = sample_source()
        parallel.append((s, translate(s)))

    triplets = []
    total_edits = 0
    total_len = 0
    for _ in range(cfg.n_triplets):
        s = sample_source()
        t = translate(s)
        m, edits = _corrupt(t, tgt_words, cfg, rng)
        if not m:  # deletion noise wiped the sentence; keep one true token
            m = [t[0]]
            edits = max(0, edits - 1)
        lab = label(m, t)
        triplets.append(TripletExample(s, m, t, lab.h, list(lab.y), list(lab.g)))
        total_edits += edits
        total_len += len(t)
    fraction = total_edits / total_len if total_len else 0.0
    return SynthTask(parallel, triplets, fraction)


# ---------------------------------------------------------------------------
# plain-text file formats

def read_token_file(path: str | Path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines()]


def write_token_file(path: str | Path, sentences: Iterable[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sent in sentences:
            fh.write(" ".join(sent) + "\n")


def read_float_file(path: str | Path) -> list[float]:
    with open(path, encoding="utf-8") as fh:
        return [float(line) for line in fh.read().splitlines() if line.strip()]


def write_float_file(path: str | Path, values: Iterable[float]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in values:
            fh.write(f"{v:.6f}\n")


def read_tag_file(path: str | Path) -> list[list[int]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh.read().splitlines():
            out.append([0 if tok == "OK" else 1 for tok in line.split()])
    return out


def write_tag_file(path: str | Path, tag_seqs: Iterable[Sequence[int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tags in tag_seqs:
            fh.write(" ".join("OK" if t == 0 else "BAD" for t in tags) + "\n")
