"""Throwaway: can MD-only reach high Pearson with better QE training?"""
import os, pickle, sys, time
import numpy as np
sys.path.insert(0, "src")

from tqe.corpus import EOS_ID, SynthConfig, Vocab, generate_synthetic_task, combine_training_corpus
from tqe.expert_model import ExpertConfig, train_expert
from tqe.feature_extractor import extract_features
from tqe.metrics import pearson
from tqe.qe_predictor import QeConfig, train_qe

CACHE = "/tmp/md_cache.pkl"

if os.path.exists(CACHE):
    with open(CACHE, "rb") as fh:
        blob = pickle.load(fh)
else:
    cfg = SynthConfig(vocab_size=64, n_parallel=2000, n_triplets=900, seed=0,
                      p_sub=0.15, p_del=0.05, p_ins=0.05)
    task = generate_synthetic_task(cfg)
    train_trip = task.triplets[:500]
    test_trip = task.triplets[700:900]
    qe_pairs = [(ex.s, ex.t) for ex in train_trip]
    rng = np.random.default_rng(0)
    combined = combine_training_corpus(task.parallel, qe_pairs, rng)
    sv = Vocab.build([s for s, _ in combined])
    tv = Vocab.build([t for _, t in combined])
    enc = [(np.array(sv.encode(s) + [EOS_ID]), np.array(tv.encode(t)))
           for s, t in combined]
    mcfg = ExpertConfig(src_vocab_size=len(sv), tgt_vocab_size=len(tv),
                        d_model=32, n_layers=2, d_ff=64, n_heads=4, sigma=0.1,
                        kl_weight=1e-3)
    ckpt = train_expert(enc, mcfg, sv, tv, seed=0, epochs=12, batch_size=64, log_every=0)

    def featset(trips):
        ds = [(np.array(sv.encode(ex.s) + [EOS_ID]), np.array(tv.encode(ex.m)))
              for ex in trips]
        return [fs.rows for fs in extract_features(ckpt, ds)]

    blob = {
        "f_train": featset(train_trip), "f_test": featset(test_trip),
        "h_train": [ex.h for ex in train_trip], "h_test": [ex.h for ex in test_trip],
        "y_train": [ex.y for ex in train_trip], "g_train": [ex.g for ex in train_trip],
    }
    with open(CACHE, "wb") as fh:
        pickle.dump(blob, fh)
    print("cache built", flush=True)

f_train, f_test = blob["f_train"], blob["f_test"]
h_train, h_test = blob["h_train"], blob["h_test"]
y_train, g_train = blob["y_train"], blob["g_train"]

sl = slice(0, 128)  # MD block
for epochs, hidden, lr in [(30, 64, 1e-3), (80, 64, 1e-3), (80, 64, 3e-3),
                           (80, 128, 1e-3), (150, 64, 2e-3)]:
    t0 = time.time()
    qcfg = QeConfig(lstm_hidden=hidden, epochs=epochs, lr=lr, seed=0)
    qe = train_qe([f[:, sl] for f in f_train], h_train, y_train, g_train, qcfg)
    preds = [qe.predict(f[:, sl]).hter_hat for f in f_test]
    print(f"MD-only epochs={epochs} hidden={hidden} lr={lr}: "
          f"pearson {pearson(preds, h_test):.4f}  ({time.time()-t0:.0f}s)", flush=True)
