"""Shared fixtures: one small trained synthetic experiment reused by the
expert, feature and predictor test modules (training is the slow part, so
it happens once per session)."""

import numpy as np
import pytest

from tqe.corpus import (
    EOS_ID,
    SynthConfig,
    Vocab,
    combine_training_corpus,
    generate_synthetic_task,
)
from tqe.expert_model import ExpertConfig, train_expert
from tqe.feature_extractor import extract_features


def encode_pairs(pairs, src_vocab, tgt_vocab):
    """Encode (source, target) token pairs; EOS closes every source so the
    model has an end anchor for the reversed alignment."""
    return [
        (np.array(src_vocab.encode(s) + [EOS_ID], dtype=np.int64),
         np.array(tgt_vocab.encode(t), dtype=np.int64))
        for s, t in pairs
    ]


class MiniExperiment:
    """Small but genuinely trained synthetic setup."""

    def __init__(self):
        self.synth_config = SynthConfig(
            vocab_size=32, n_parallel=800, n_triplets=320, seed=7,
            p_sub=0.15, p_del=0.05, p_ins=0.05, min_len=4, max_len=10)
        task = generate_synthetic_task(self.synth_config)
        self.task = task
        self.train_triplets = task.triplets[:160]
        self.dev_triplets = task.triplets[160:240]
        self.test_triplets = task.triplets[240:320]
        rng = np.random.default_rng(7)
        combined = combine_training_corpus(
            task.parallel, [(ex.s, ex.t) for ex in self.train_triplets], rng)
        self.src_vocab = Vocab.build([s for s, _ in combined])
        self.tgt_vocab = Vocab.build([t for _, t in combined])
        self.expert_config = ExpertConfig(
            src_vocab_size=len(self.src_vocab),
            tgt_vocab_size=len(self.tgt_vocab),
            d_model=32, n_layers=2, d_ff=64, n_heads=4,
            sigma=0.1, kl_weight=1e-3)
        self.checkpoint = train_expert(
            encode_pairs(combined, self.src_vocab, self.tgt_vocab),
            self.expert_config, self.src_vocab, self.tgt_vocab,
            seed=7, epochs=10, batch_size=64, log_every=0)

    def encode_st(self, triplets):
        return encode_pairs([(ex.s, ex.m) for ex in triplets],
                            self.src_vocab, self.tgt_vocab)

    def features(self, triplets):
        return [fs.rows for fs in extract_features(self.checkpoint,
                                                   self.encode_st(triplets))]


@pytest.fixture(scope="session")
def mini_experiment():
    return MiniExperiment()
