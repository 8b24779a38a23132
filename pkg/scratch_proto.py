"""Throwaway prototype: learnability + speed, probing on held-out pairs
from the SAME task (same word mapping)."""
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from tqe import autodiff as ad
from tqe.corpus import EOS_ID, SynthConfig, Vocab, generate_synthetic_task, combine_training_corpus
from tqe.expert_model import ExpertConfig, train_expert

t0 = time.time()
cfg = SynthConfig(vocab_size=64, n_parallel=2050, n_triplets=500, seed=0,
                  p_sub=0.15, p_del=0.05, p_ins=0.05)
task = generate_synthetic_task(cfg)
heldout = task.parallel[-50:]
qe_pairs = [(ex.s, ex.t) for ex in task.triplets]
rng = np.random.default_rng(0)
combined = combine_training_corpus(task.parallel[:2000], qe_pairs, rng)
src_vocab = Vocab.build([s for s, _ in combined])
tgt_vocab = Vocab.build([t for _, t in combined])

enc = [(np.array(src_vocab.encode(s) + [EOS_ID]), np.array(tgt_vocab.encode(t)))
       for s, t in combined]

mcfg = ExpertConfig(src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab),
                    d_model=32, n_layers=2, d_ff=64, n_heads=4, sigma=0.1,
                    kl_weight=1e-3)

import logging
logging.basicConfig(level=logging.INFO, format="%(message)s")

t0 = time.time()
ckpt = train_expert(enc, mcfg, src_vocab, tgt_vocab, seed=0, epochs=8,
                    batch_size=64, log_every=0)
print(f"trained in {time.time()-t0:.1f}s, final loss {ckpt.loss:.4f}")

model = ckpt.to_model()

def probe_acc(pairs):
    correct = total = 0
    nll = 0.0
    with ad.no_grad():
        for s, t in pairs:
            s_ids = np.array(src_vocab.encode(s) + [EOS_ID])
            t_ids = np.array(tgt_vocab.encode(t))
            mem = model.encode_source(s_ids)
            lat = model.encode_target_bidirectional(t_ids, mem)
            logits = model.reconstruct_logits(lat).data
            pred = logits.argmax(axis=-1)
            correct += int((pred == t_ids).sum())
            total += len(t_ids)
            m = logits.max(-1, keepdims=True)
            lse = m[:, 0] + np.log(np.exp(logits - m).sum(-1))
            nll += float((lse - logits[np.arange(len(t_ids)), t_ids]).sum())
    return correct / total, nll / total

acc, nll = probe_acc(heldout)
print(f"held-out token accuracy {acc:.3f}, NLL {nll:.3f}")
acc_tr, nll_tr = probe_acc(task.parallel[:50])
print(f"train token accuracy {acc_tr:.3f}, NLL {nll_tr:.3f}")
