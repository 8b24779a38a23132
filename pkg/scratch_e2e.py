"""Throwaway: full end-to-end synthetic run at acceptance sizes to measure
Pearson/Spearman/F1-Multi and runtime."""
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from tqe.corpus import EOS_ID, SynthConfig, Vocab, generate_synthetic_task, combine_training_corpus
from tqe.expert_model import ExpertConfig, train_expert
from tqe.feature_extractor import extract_features
from tqe.metrics import f1_multi, pearson, spearman
from tqe.qe_predictor import QeConfig, train_qe, tune_threshold, tags_from_probs

T0 = time.time()

def stamp(msg):
    print(f"[{time.time()-T0:6.1f}s] {msg}", flush=True)

cfg = SynthConfig(vocab_size=64, n_parallel=2000, n_triplets=900, seed=0,
                  p_sub=0.15, p_del=0.05, p_ins=0.05)
task = generate_synthetic_task(cfg)
train_trip = task.triplets[:500]
dev_trip = task.triplets[500:700]
test_trip = task.triplets[700:900]

qe_pairs = [(ex.s, ex.t) for ex in train_trip]
rng = np.random.default_rng(0)
combined = combine_training_corpus(task.parallel, qe_pairs, rng)
src_vocab = Vocab.build([s for s, _ in combined])
tgt_vocab = Vocab.build([t for _, t in combined])
stamp(f"data ready: {len(combined)} pretrain pairs")

def enc_pair(s, t):
    return (np.array(src_vocab.encode(s) + [EOS_ID]), np.array(tgt_vocab.encode(t)))

enc = [enc_pair(s, t) for s, t in combined]
mcfg = ExpertConfig(src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab),
                    d_model=32, n_layers=2, d_ff=64, n_heads=4, sigma=0.1,
                    kl_weight=1e-3)
ckpt = train_expert(enc, mcfg, src_vocab, tgt_vocab, seed=0, epochs=12,
                    batch_size=64, log_every=0)
stamp(f"expert trained, loss {ckpt.loss:.4f}")

def featset(trips):
    ds = [(np.array(src_vocab.encode(ex.s) + [EOS_ID]), np.array(tgt_vocab.encode(ex.m)))
          for ex in trips]
    return [fs.rows for fs in extract_features(ckpt, ds)]

f_train = featset(train_trip)
f_dev = featset(dev_trip)
f_test = featset(test_trip)
stamp(f"features extracted, width {f_train[0].shape[1]}")

qcfg = QeConfig(lstm_hidden=64, epochs=30, lr=1e-3, seed=0)
qe = train_qe(f_train,
              [ex.h for ex in train_trip],
              [ex.y for ex in train_trip],
              [ex.g for ex in train_trip],
              qcfg)
stamp("qe trained")

dev_preds = [qe.predict(f) for f in f_dev]
theta_w = tune_threshold([p.word_bad_prob for p in dev_preds],
                         [ex.y for ex in dev_trip])
theta_g = tune_threshold([p.gap_bad_prob for p in dev_preds],
                         [ex.g for ex in dev_trip])
stamp(f"thresholds: word {theta_w}, gap {theta_g}")

test_preds = [qe.predict(f) for f in f_test]
h_hat = [p.hter_hat for p in test_preds]
h_true = [ex.h for ex in test_trip]
pw = pearson(h_hat, h_true)
sw = spearman(h_hat, h_true)
tags_pred = np.concatenate([tags_from_probs(p.word_bad_prob, theta_w) for p in test_preds])
tags_true = np.concatenate([ex.y for ex in test_trip])
f1o, f1b, f1m = f1_multi(tags_pred, tags_true)
gtags_pred = np.concatenate([tags_from_probs(p.gap_bad_prob, theta_g) for p in test_preds])
gtags_true = np.concatenate([ex.g for ex in test_trip])
g1o, g1b, g1m = f1_multi(gtags_pred, gtags_true)
stamp(f"TEST pearson {pw:.4f} spearman {sw:.4f}")
stamp(f"TEST word f1_ok {f1o:.4f} f1_bad {f1b:.4f} f1_multi {f1m:.4f}")
stamp(f"TEST gap  f1_ok {g1o:.4f} f1_bad {g1b:.4f} f1_multi {g1m:.4f}")

# mismatch discrimination check (criterion 4 direction)
bad_mask = tags_true == 1
hard = np.concatenate([f[:, -1] for f in f_test])
stamp(f"hard-mismatch mean BAD {hard[bad_mask].mean():.3f} vs OK {hard[~bad_mask].mean():.3f}")
soft = np.concatenate([f[:, -2] for f in f_test])
stamp(f"soft-gap mean BAD {soft[bad_mask].mean():.3f} vs OK {soft[~bad_mask].mean():.3f}")
