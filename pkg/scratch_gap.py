"""Throwaway: diagnose gap-expert recovery."""
import sys, time
import numpy as np
sys.path.insert(0, "src")

import logging
logging.basicConfig(level=logging.INFO, format="%(message)s")

from tqe import autodiff as ad
from tqe.corpus import EOS_ID, SynthConfig, Vocab, generate_synthetic_task
from tqe.expert_model import ExpertConfig, train_gap_expert

cfg = SynthConfig(vocab_size=64, n_parallel=3000, n_triplets=0, seed=7,
                  min_len=4, max_len=10)
task = generate_synthetic_task(cfg)
src_vocab = Vocab.build([s for s, _ in task.parallel])
tgt_vocab = Vocab.build([t for _, t in task.parallel])
pairs = [(np.array(src_vocab.encode(s) + [EOS_ID]), np.array(tgt_vocab.encode(t)))
         for s, t in task.parallel]

mcfg = ExpertConfig(src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab),
                    d_model=32, n_layers=2, d_ff=64, n_heads=4, sigma=0.05,
                    kl_weight=1e-3)
t0 = time.time()
ckpt = train_gap_expert(pairs, mcfg, src_vocab, tgt_vocab, p_del=0.2, seed=7,
                        epochs=60, batch_size=64, lr=1.5e-3, log_every=0)
print(f"trained {time.time()-t0:.0f}s loss {ckpt.loss:.4f}")
model = ckpt.to_model()

rng = np.random.default_rng(1)
hits = total = 0
top5 = 0
wrong_gap_right_token = 0
for s, t in pairs[:100]:
    if len(t) < 3:
        continue
    k = int(rng.integers(1, len(t) - 1))
    thinned = np.delete(t, k)
    with ad.no_grad():
        mem = model.encode_source(s)
        lat = model.encode_target_bidirectional(thinned, mem)
        glog = model.gap_logits(lat).data
    pred = glog.argmax(-1)
    hits += int(pred[k] == t[k])
    top5 += int(t[k] in np.argsort(glog[k])[::-1][:5])
    if t[k] in pred:
        wrong_gap_right_token += 1
    total += 1
print(f"exact {hits}/{total}, top5 {top5}/{total}, token-somewhere {wrong_gap_right_token}/{total}")

# deeper diagnostics
rng = np.random.default_rng(2)
pb, pt, ranks, tok_acc = [], [], [], []
for s, t in pairs[:60]:
    if len(t) < 3:
        continue
    k = int(rng.integers(1, len(t) - 1))
    thinned = np.delete(t, k)
    with ad.no_grad():
        mem = model.encode_source(s)
        lat = model.encode_target_bidirectional(thinned, mem)
        glog = model.gap_logits(lat).data
        tlog = model.reconstruct_logits(lat).data
    tok_acc.append(float((tlog.argmax(-1) == thinned).mean()))
    row = glog[k]
    p = np.exp(row - row.max()); p /= p.sum()
    pb.append(p[4]); pt.append(p[t[k]])
    ranks.append(int((row > row[t[k]]).sum()))
print(f"token acc on thinned {np.mean(tok_acc):.3f}")
print(f"at deletion gap: mean p(BLANK) {np.mean(pb):.3f}, mean p(true) {np.mean(pt):.3f}, mean rank of true {np.mean(ranks):.2f}")
