"""Throwaway: ablation ordering check, one seed (reuses e2e recipe)."""
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from tqe.corpus import EOS_ID, SynthConfig, Vocab, generate_synthetic_task, combine_training_corpus
from tqe.expert_model import ExpertConfig, train_expert
from tqe.feature_extractor import extract_features
from tqe.metrics import pearson
from tqe.qe_predictor import QeConfig, train_qe

T0 = time.time()

def run_seed(seed):
    cfg = SynthConfig(vocab_size=64, n_parallel=2000, n_triplets=900, seed=seed,
                      p_sub=0.15, p_del=0.05, p_ins=0.05)
    task = generate_synthetic_task(cfg)
    train_trip = task.triplets[:500]
    test_trip = task.triplets[700:900]
    qe_pairs = [(ex.s, ex.t) for ex in train_trip]
    rng = np.random.default_rng(seed)
    combined = combine_training_corpus(task.parallel, qe_pairs, rng)
    src_vocab = Vocab.build([s for s, _ in combined])
    tgt_vocab = Vocab.build([t for _, t in combined])
    enc = [(np.array(src_vocab.encode(s) + [EOS_ID]), np.array(tgt_vocab.encode(t)))
           for s, t in combined]
    mcfg = ExpertConfig(src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab),
                        d_model=32, n_layers=2, d_ff=64, n_heads=4, sigma=0.1,
                        kl_weight=1e-3)
    ckpt = train_expert(enc, mcfg, src_vocab, tgt_vocab, seed=seed, epochs=12,
                        batch_size=64, log_every=0)

    def featset(trips):
        ds = [(np.array(src_vocab.encode(ex.s) + [EOS_ID]),
               np.array(tgt_vocab.encode(ex.m))) for ex in trips]
        return [fs.rows for fs in extract_features(ckpt, ds)]

    f_train, f_test = featset(train_trip), featset(test_trip)
    h_train = [ex.h for ex in train_trip]
    h_test = [ex.h for ex in test_trip]
    out = {}
    for name, sl in [("md+mm", slice(None)), ("md", slice(0, 128)), ("mm", slice(128, 132))]:
        qcfg = QeConfig(lstm_hidden=64, epochs=30, lr=1e-3, seed=seed)
        qe = train_qe([f[:, sl] for f in f_train], h_train,
                      [ex.y for ex in train_trip], [ex.g for ex in train_trip], qcfg)
        preds = [qe.predict(f[:, sl]).hter_hat for f in f_test]
        out[name] = pearson(preds, h_test)
    print(f"[{time.time()-T0:6.1f}s] seed {seed}: " +
          " ".join(f"{k}={v:.4f}" for k, v in out.items()), flush=True)
    return out

results = [run_seed(s) for s in (0, 1, 2)]
for key in ("md+mm", "md", "mm"):
    print(f"mean {key}: {np.mean([r[key] for r in results]):.4f}")
