"""Per-token QE features for (source, MT) pairs from a frozen checkpoint.

Each MT position k yields the concatenation of the two latent rows, the
embeddings of its neighbor tokens (BOS/EOS at the sentence ends), and a
4-vector of mismatch statistics from the reconstruction logits: the logit
of the MT token, the max logit, their difference (always <= 0) and an
indicator that the argmax disagrees with the MT token. No feature reads
the embedding of the token itself, so a wrong token cannot vouch for
itself.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import BOS_ID, EOS_ID
from .expert_model import ExpertCheckpoint, ExpertModel

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"QEFT1"
MISMATCH_WIDTH = 4


class VocabMismatchError(ValueError):
    """Dataset vocabulary differs from the checkpoint's."""


@dataclass
class FeatureSequence:
    """Feature rows for one sentence: shape [T, width]."""

    sent_id: int
    rows: np.ndarray

    @property
    def length(self) -> int:
        return self.rows.shape[0]

    @property
    def width(self) -> int:
        return self.rows.shape[1]


def feature_width(d_model: int) -> int:
    # latents (2 d) + neighbor embeddings (2 d) + mismatch block
    return 4 * d_model + MISMATCH_WIDTH


def extract_mismatch(logits_row: np.ndarray, mt_id: int) -> np.ndarray:
    """Mismatch 4-vector for one position. Argmax ties resolve to the
    lowest index; the indicator compares ids, not logit values."""
    logits_row = np.asarray(logits_row, dtype=np.float64)
    if not 0 <= mt_id < logits_row.shape[0]:
        raise IndexError(f"token id {mt_id} outside logits of size {logits_row.shape[0]}")
    i_max = int(np.argmax(logits_row))
    own = logits_row[mt_id]
    top = logits_row[i_max]
    return np.array([own, top, own - top, float(mt_id != i_max)])


def extract_model_derived(model: ExpertModel, s_ids: Sequence[int],
                          m_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Latent and neighbor-embedding features plus the logits matrix.

    Runs with noise disabled, so extraction is deterministic and the
    latents equal their means. Returns (features [T, 4d], logits [T, V]).
    """
    m_arr = np.asarray(m_ids, dtype=np.int64)
    if m_arr.size == 0:
        raise ValueError("cannot extract features for an empty translation")
    with ad.no_grad():
        memory = model.encode_source(np.asarray(s_ids, dtype=np.int64))
        latents = model.encode_target_bidirectional(m_arr, memory)
        logits = model.reconstruct_logits(latents).data
    table = model.params["tgt_embed"].data
    prev_ids = np.concatenate([[BOS_ID], m_arr[:-1]])
    next_ids = np.concatenate([m_arr[1:], [EOS_ID]])
    feats = np.concatenate(
        [latents.z_fwd.data, latents.z_bwd.data, table[prev_ids], table[next_ids]],
        axis=1,
    )
    return feats, logits


def extract_sentence_features(model: ExpertModel, s_ids: Sequence[int],
                              m_ids: Sequence[int]) -> np.ndarray:
    """Full per-token feature rows [T, 4d + 4] for one sentence pair."""
    derived, logits = extract_model_derived(model, s_ids, m_ids)
    mism = np.stack([extract_mismatch(logits[k], int(m)) for k, m in enumerate(m_ids)])
    return np.concatenate([derived, mism], axis=1)


def extract_features(checkpoint: ExpertCheckpoint,
                     dataset: Sequence[tuple[Sequence[int], Sequence[int]]],
                     src_vocab_tokens: Sequence[str] | None = None,
                     tgt_vocab_tokens: Sequence[str] | None = None,
                     path: str | Path | None = None,
                     checkpoint_name: str = "checkpoint") -> list[FeatureSequence]:
    """Extract features for every (source ids, MT ids) pair, optionally
    streaming them to a feature file. The checkpoint is never mutated."""
    if src_vocab_tokens is not None and list(src_vocab_tokens) != checkpoint.src_vocab:
        raise VocabMismatchError(
            f"source vocabulary differs from the one in {checkpoint_name}")
    if tgt_vocab_tokens is not None and list(tgt_vocab_tokens) != checkpoint.tgt_vocab:
        raise VocabMismatchError(
            f"target vocabulary differs from the one in {checkpoint_name}")
    model = checkpoint.to_model()
    out = []
    for sent_id, (s_ids, m_ids) in enumerate(dataset):
        rows = extract_sentence_features(model, s_ids, m_ids)
        out.append(FeatureSequence(sent_id, rows))
    if path is not None:
        write_feature_file(path, out)
    return out


# ---------------------------------------------------------------------------
# feature file format

def write_feature_file(path: str | Path, seqs: Sequence[FeatureSequence]) -> None:
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        for seq in seqs:
            rows = np.ascontiguousarray(seq.rows, dtype="<f8")
            fh.write(struct.pack("<QII", seq.sent_id, rows.shape[0], rows.shape[1]))
            fh.write(rows.tobytes())


def read_feature_file(path: str | Path) -> list[FeatureSequence]:
    seqs = []
    with open(path, "rb") as fh:
        got = fh.read(len(FEATURE_MAGIC))
        if got != FEATURE_MAGIC:
            raise ValueError(f"{path}: bad magic {got!r}, expected {FEATURE_MAGIC!r}")
        while True:
            header = fh.read(16)
            if not header:
                break
            sent_id, t, width = struct.unpack("<QII", header)
            data = np.frombuffer(fh.read(8 * t * width), dtype="<f8")
            seqs.append(FeatureSequence(sent_id, data.reshape(t, width).copy()))
    return seqs
