import pickle, sys
import numpy as np
sys.path.insert(0, "src")
from tqe.metrics import f1_multi, pearson
from tqe.qe_predictor import QeConfig, train_qe, tune_threshold, tags_from_probs

with open("/tmp/md_cache.pkl", "rb") as fh:
    blob = pickle.load(fh)
f_train, f_test = blob["f_train"], blob["f_test"]
h_train, h_test = blob["h_train"], blob["h_test"]
y_train, g_train = blob["y_train"], blob["g_train"]
y_test = blob.get("y_test")

# oracle check: what does plain mean-mismatch give for HTER?
mm_mean = [f[:, -1].mean() for f in f_test]
print("pearson(mean indicator, h):", round(pearson(mm_mean, h_test), 4))

for name, sl in [("md", slice(0, 128)), ("mm", slice(128, 132)), ("full", slice(None))]:
    qcfg = QeConfig(lstm_hidden=64, epochs=40, lr=1e-3, seed=0)
    qe = train_qe([f[:, sl] for f in f_train], h_train, y_train, g_train, qcfg)
    preds = [qe.predict(f[:, sl]) for f in f_test]
    p = pearson([x.hter_hat for x in preds], h_test)
    # word-level discrimination without threshold tuning: AUC-ish via mean prob gap
    print(f"{name}: pearson {p:.4f}")
