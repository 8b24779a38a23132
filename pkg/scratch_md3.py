"""Throwaway: pretraining-variant grid for the MD/MM ablation ordering."""
import sys, time
import numpy as np
sys.path.insert(0, "src")

from tqe.corpus import EOS_ID, SynthConfig, Vocab, generate_synthetic_task, combine_training_corpus
from tqe.expert_model import ExpertConfig, train_expert
from tqe.feature_extractor import extract_features
from tqe.metrics import f1_multi, pearson
from tqe.qe_predictor import QeConfig, train_qe, tune_threshold, tags_from_probs

T0 = time.time()
cfg = SynthConfig(vocab_size=64, n_parallel=2000, n_triplets=900, seed=0,
                  p_sub=0.15, p_del=0.05, p_ins=0.05)
task = generate_synthetic_task(cfg)
train_trip, dev_trip, test_trip = (task.triplets[:500], task.triplets[500:700],
                                   task.triplets[700:900])
rng = np.random.default_rng(0)
combined = combine_training_corpus(task.parallel, [(ex.s, ex.t) for ex in train_trip], rng)
sv = Vocab.build([s for s, _ in combined])
tv = Vocab.build([t for _, t in combined])
enc = [(np.array(sv.encode(s) + [EOS_ID]), np.array(tv.encode(t))) for s, t in combined]

def run_variant(tag, sigma, kl, epochs):
    mcfg = ExpertConfig(src_vocab_size=len(sv), tgt_vocab_size=len(tv),
                        d_model=32, n_layers=2, d_ff=64, n_heads=4,
                        sigma=sigma, kl_weight=kl)
    ckpt = train_expert(enc, mcfg, sv, tv, seed=0, epochs=epochs,
                        batch_size=64, log_every=0)
    def featset(trips):
        ds = [(np.array(sv.encode(ex.s) + [EOS_ID]), np.array(tv.encode(ex.m)))
              for ex in trips]
        return [fs.rows for fs in extract_features(ckpt, ds)]
    f_train, f_dev, f_test = featset(train_trip), featset(dev_trip), featset(test_trip)
    h_train = [ex.h for ex in train_trip]
    h_test = [ex.h for ex in test_trip]
    res = {}
    for name, sl in [("full", slice(None)), ("md", slice(0, 128)), ("mm", slice(128, 132))]:
        qcfg = QeConfig(lstm_hidden=64, epochs=30, lr=1e-3, seed=0)
        qe = train_qe([f[:, sl] for f in f_train], h_train,
                      [ex.y for ex in train_trip], [ex.g for ex in train_trip], qcfg)
        res[name] = pearson([qe.predict(f[:, sl]).hter_hat for f in f_test], h_test)
        if name == "md":
            dev_pred = [qe.predict(f[:, sl]).word_bad_prob for f in f_dev]
            th = tune_threshold(dev_pred, [ex.y for ex in dev_trip])
            tags = np.concatenate([tags_from_probs(qe.predict(f[:, sl]).word_bad_prob, th)
                                   for f in f_test])
            truth = np.concatenate([ex.y for ex in test_trip])
            res["md_word_f1"] = f1_multi(tags, truth)[2]
    print(f"[{time.time()-T0:5.0f}s] {tag}: " +
          " ".join(f"{k}={v:.4f}" for k, v in res.items()), flush=True)

run_variant("sigma0.3_kl1e-3_ep12", 0.3, 1e-3, 12)
run_variant("sigma0.1_kl1e-2_ep12", 0.1, 1e-2, 12)
run_variant("sigma0.5_kl1e-3_ep12", 0.5, 1e-3, 12)
run_variant("sigma0.3_kl1e-2_ep12", 0.3, 1e-2, 12)
run_variant("sigma0.1_kl1e-3_ep6", 0.1, 1e-3, 6)
