"""Bi-LSTM quality estimation heads over extracted feature sequences.

One single-layer LSTM per direction runs over the per-token features; a
sigmoid regression head reads the final state of each direction to predict
sentence HTER, a two-class softmax head tags each token OK/BAD, and a gap
head tags each of the T+1 boundaries from the hidden states of the tokens
on both sides (zero states beyond the ends). All three losses train
jointly; decision thresholds for the taggers are tuned on development
data afterwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .expert_model import glorot, read_blob_file, write_blob_file
from .metrics import f1_multi

log = logging.getLogger(__name__)

QE_MAGIC = b"QEBL1"
_PROB_EPS = 1e-12  # keeps probabilities inside (0,1) through float rounding


@dataclass
class QeConfig:
    lstm_hidden: int = 128
    layers: int = 1
    lambda_sent: float = 1.0
    lambda_word: float = 1.0
    lambda_gap: float = 1.0
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if self.layers != 1:
            raise ValueError("the QE recurrence is a single-layer Bi-LSTM")
        weights = (self.lambda_sent, self.lambda_word, self.lambda_gap)
        if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
            raise ValueError("task weights must be >= 0 and not all zero")


@dataclass
class Prediction:
    hter_hat: float
    word_bad_prob: np.ndarray
    gap_bad_prob: np.ndarray


@dataclass
class DecisionThreshold:
    theta_word: float = 0.5
    theta_gap: float = 0.5


class QeModel:
    """Parameters plus forward passes for the three QE heads."""

    def __init__(self, feature_width: int, config: QeConfig,
                 rng: np.random.Generator | None = None):
        self.config = config
        self.feature_width = feature_width
        self.thresholds = DecisionThreshold()
        self.feat_mean = np.zeros(feature_width)
        self.feat_std = np.ones(feature_width)
        rng = rng or np.random.default_rng(config.seed)
        h = config.lstm_hidden
        self.params: dict[str, Tensor] = {}
        for direction in ("f", "b"):
            self.params[f"lstm_{direction}.wx"] = Tensor(
                glorot(rng, feature_width, 4 * h), requires_grad=True)
            self.params[f"lstm_{direction}.wh"] = Tensor(
                glorot(rng, h, 4 * h), requires_grad=True)
            bias = np.zeros(4 * h)
            bias[h:2 * h] = 1.0  # open forget gates at the start of training
            self.params[f"lstm_{direction}.b"] = Tensor(bias, requires_grad=True)
        self.params["sent.w"] = Tensor(glorot(rng, 2 * h, 1), requires_grad=True)
        self.params["sent.b"] = Tensor(np.zeros(1), requires_grad=True)
        self.params["word.w"] = Tensor(glorot(rng, 2 * h, 2), requires_grad=True)
        self.params["word.b"] = Tensor(np.zeros(2), requires_grad=True)
        self.params["gap.w"] = Tensor(glorot(rng, 4 * h, 2), requires_grad=True)
        self.params["gap.b"] = Tensor(np.zeros(2), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    # -- forward -------------------------------------------------------------

    def _normalize(self, feats: Tensor) -> Tensor:
        if not self.config.standardize:
            return feats
        return ad.div(ad.sub(feats, Tensor(self.feat_mean)), Tensor(self.feat_std))

    def _run_lstm(self, direction: str, feats: Tensor) -> Tensor:
        """One direction over [B, T, F]; returns [B, T, H] in input order."""
        p = self.params
        wx, wh, b = (p[f"lstm_{direction}.wx"], p[f"lstm_{direction}.wh"],
                     p[f"lstm_{direction}.b"])
        bsz, t_len, _ = feats.shape
        hdim = self.config.lstm_hidden
        steps = range(t_len) if direction == "f" else range(t_len - 1, -1, -1)
        h = Tensor(np.zeros((bsz, hdim)))
        c = Tensor(np.zeros((bsz, hdim)))
        outputs: list[Tensor | None] = [None] * t_len
        for k in steps:
            x = feats[:, k, :]
            gates = ad.add(ad.add(ad.matmul(x, wx), ad.matmul(h, wh)), b)
            i_g = ad.sigmoid(gates[:, 0 * hdim:1 * hdim])
            f_g = ad.sigmoid(gates[:, 1 * hdim:2 * hdim])
            cand = ad.tanh(gates[:, 2 * hdim:3 * hdim])
            o_g = ad.sigmoid(gates[:, 3 * hdim:4 * hdim])
            c = ad.add(ad.mul(f_g, c), ad.mul(i_g, cand))
            h = ad.mul(o_g, ad.tanh(c))
            outputs[k] = ad.reshape(h, (bsz, 1, hdim))
        return ad.concat(outputs, axis=1)

    def bilstm_forward(self, feats) -> tuple[Tensor, Tensor]:
        """Hidden states of both directions; zero initial states.

        Accepts [T, F] for one sentence or [B, T, F] for a batch.
        """
        if isinstance(feats, np.ndarray):
            feats = Tensor(feats)
        single = feats.ndim == 2
        if single:
            feats = ad.reshape(feats, (1,) + feats.shape)
        feats = self._normalize(feats)
        h_fwd = self._run_lstm("f", feats)
        h_bwd = self._run_lstm("b", feats)
        if single:
            return h_fwd[0], h_bwd[0]
        return h_fwd, h_bwd

    def _batched(self, h: Tensor) -> Tensor:
        return ad.reshape(h, (1,) + h.shape) if h.ndim == 2 else h

    def predict_hter(self, h_fwd: Tensor, h_bwd: Tensor) -> Tensor:
        """Sigmoid regression from the final state of each direction: the
        forward pass ends at position T, the backward pass at position 1."""
        h_fwd, h_bwd = self._batched(h_fwd), self._batched(h_bwd)
        t_len = h_fwd.shape[1]
        summary = ad.concat([h_fwd[:, t_len - 1, :], h_bwd[:, 0, :]], axis=-1)
        out = ad.sigmoid(ad.add(ad.matmul(summary, self.params["sent.w"]),
                                self.params["sent.b"]))
        return ad.reshape(out, (out.shape[0],))

    def word_logits(self, h_fwd: Tensor, h_bwd: Tensor) -> Tensor:
        h = ad.concat([self._batched(h_fwd), self._batched(h_bwd)], axis=-1)
        return ad.add(ad.matmul(h, self.params["word.w"]), self.params["word.b"])

    def gap_logits(self, h_fwd: Tensor, h_bwd: Tensor) -> Tensor:
        """Per-boundary logits from [h_fwd_k; h_bwd_k; h_fwd_k+1; h_bwd_k+1]
        with zero vectors standing in beyond the sentence."""
        h_fwd, h_bwd = self._batched(h_fwd), self._batched(h_bwd)
        bsz, t_len, hdim = h_fwd.shape
        zero = Tensor(np.zeros((bsz, 1, hdim)))
        f_pad = ad.concat([zero, h_fwd, zero], axis=1)
        b_pad = ad.concat([zero, h_bwd, zero], axis=1)
        left = slice(0, t_len + 1)
        right = slice(1, t_len + 2)
        gap_in = ad.concat([f_pad[:, left], b_pad[:, left],
                            f_pad[:, right], b_pad[:, right]], axis=-1)
        return ad.add(ad.matmul(gap_in, self.params["gap.w"]), self.params["gap.b"])

    @staticmethod
    def _bad_probs(logits: np.ndarray) -> np.ndarray:
        # two-class softmax reduces to a sigmoid of the logit difference
        diff = logits[..., 1] - logits[..., 0]
        probs = np.where(diff >= 0,
                         1.0 / (1.0 + np.exp(-np.clip(diff, -700, 700))),
                         np.exp(np.clip(diff, -700, 700))
                         / (1.0 + np.exp(np.clip(diff, -700, 700))))
        return np.clip(probs, _PROB_EPS, 1.0 - _PROB_EPS)

    def predict(self, feats: np.ndarray) -> Prediction:
        """All three heads for one sentence's feature matrix [T, F]."""
        if feats.shape[1] != self.feature_width:
            raise ad.ShapeError(
                f"feature width {feats.shape[1]} != model width {self.feature_width}")
        with ad.no_grad():
            h_fwd, h_bwd = self.bilstm_forward(feats)
            hter = self.predict_hter(h_fwd, h_bwd).data[0]
            word = self._bad_probs(self.word_logits(h_fwd, h_bwd).data[0])
            gap = self._bad_probs(self.gap_logits(h_fwd, h_bwd).data[0])
        hter = float(np.clip(hter, _PROB_EPS, 1.0 - _PROB_EPS))
        return Prediction(hter, word, gap)

    # -- persistence -----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        kv = {f.name: str(getattr(self.config, f.name)) for f in fields(QeConfig)}
        kv["feature_width"] = str(self.feature_width)
        kv["theta_word"] = repr(self.thresholds.theta_word)
        kv["theta_gap"] = repr(self.thresholds.theta_gap)
        arrays = {name: t.data for name, t in self.params.items()}
        arrays["feat_mean"] = self.feat_mean
        arrays["feat_std"] = self.feat_std
        write_blob_file(path, QE_MAGIC, kv, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "QeModel":
        kv, arrays = read_blob_file(path, QE_MAGIC)
        kwargs = {}
        for f in fields(QeConfig):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.type == "bool":
                kwargs[f.name] = raw in ("True", "1")
            elif f.type == "float":
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        model = cls(int(kv["feature_width"]), QeConfig(**kwargs))
        for name, arr in arrays.items():
            if name == "feat_mean":
                model.feat_mean = arr
            elif name == "feat_std":
                model.feat_std = arr
            else:
                model.params[name].data = arr.copy()
        model.thresholds = DecisionThreshold(float(kv["theta_word"]),
                                             float(kv["theta_gap"]))
        return model


def tags_from_probs(probs: np.ndarray, theta: float) -> np.ndarray:
    """BAD wherever the BAD probability reaches the threshold."""
    return (np.asarray(probs) >= theta).astype(np.int64)


# ---------------------------------------------------------------------------
# training

def _validate_lengths(features, hter, word_tags, gap_tags) -> None:
    for idx, feats in enumerate(features):
        t_len = feats.shape[0]
        if word_tags is not None and len(word_tags[idx]) != t_len:
            raise ValueError(
                f"sentence {idx}: {len(word_tags[idx])} word tags for {t_len} tokens")
        if gap_tags is not None and len(gap_tags[idx]) != t_len + 1:
            raise ValueError(
                f"sentence {idx}: {len(gap_tags[idx])} gap tags for {t_len} tokens")
    if hter is not None and len(hter) != len(features):
        raise ValueError(f"{len(hter)} HTER labels for {len(features)} sentences")


def train_qe(features: Sequence[np.ndarray],
             hter: Sequence[float] | None,
             word_tags: Sequence[Sequence[int]] | None,
             gap_tags: Sequence[Sequence[int]] | None,
             config: QeConfig) -> QeModel:
    """Multi-task Adam training; tasks without labels drop out of the loss.

    Deterministic for a fixed config seed. Sentences are bucketed by
    length so each batch is a dense block.
    """
    features = [np.asarray(f, dtype=np.float64) for f in features]
    _validate_lengths(features, hter, word_tags, gap_tags)
    lam_sent = config.lambda_sent if hter is not None else 0.0
    lam_word = config.lambda_word if word_tags is not None else 0.0
    lam_gap = config.lambda_gap if gap_tags is not None else 0.0
    if lam_sent == lam_word == lam_gap == 0.0:
        raise ValueError("no labels supplied for any task")

    rng = np.random.default_rng(config.seed)
    width = features[0].shape[1]
    model = QeModel(width, config, rng)
    if config.standardize:
        stacked = np.concatenate(features, axis=0)
        model.feat_mean = stacked.mean(axis=0)
        model.feat_std = np.maximum(stacked.std(axis=0), 1e-8)
    # heads of disabled tasks stay out of the optimizer (they get no grads)
    active = [t for name, t in model.params.items()
              if name.startswith("lstm")
              or (name.startswith("sent") and lam_sent > 0)
              or (name.startswith("word") and lam_word > 0)
              or (name.startswith("gap") and lam_gap > 0)]
    opt = ad.Adam(active, lr=config.lr)

    buckets: dict[int, list[int]] = {}
    for idx, feats in enumerate(features):
        buckets.setdefault(feats.shape[0], []).append(idx)

    step = 0
    for epoch in range(config.epochs):
        batches = []
        for t_len in sorted(buckets):
            members = list(buckets[t_len])
            rng.shuffle(members)
            for i in range(0, len(members), config.batch_size):
                batches.append(members[i:i + config.batch_size])
        order = rng.permutation(len(batches))
        total, seen = 0.0, 0
        for bi in order:
            batch = batches[bi]
            feats = Tensor(np.stack([features[i] for i in batch]))
            with ad.tape_scope():
                h_fwd, h_bwd = model.bilstm_forward(feats)
                loss = Tensor(0.0)
                if lam_sent > 0:
                    target = np.array([hter[i] for i in batch])
                    pred = model.predict_hter(h_fwd, h_bwd)
                    err = ad.sub(pred, Tensor(target))
                    loss = ad.add(loss, ad.mul(ad.mean(ad.square(err)), lam_sent))
                if lam_word > 0:
                    logits = model.word_logits(h_fwd, h_bwd)
                    b, t, _ = logits.shape
                    target = np.concatenate([word_tags[i] for i in batch])
                    xent = ad.cross_entropy_from_logits(
                        ad.reshape(logits, (b * t, 2)), target)
                    loss = ad.add(loss, ad.mul(xent, lam_word))
                if lam_gap > 0:
                    logits = model.gap_logits(h_fwd, h_bwd)
                    b, t, _ = logits.shape
                    target = np.concatenate([gap_tags[i] for i in batch])
                    xent = ad.cross_entropy_from_logits(
                        ad.reshape(logits, (b * t, 2)), target)
                    loss = ad.add(loss, ad.mul(xent, lam_gap))
                if not np.isfinite(loss.item()):
                    raise ad.TapeError(f"non-finite QE loss at step {step}")
                ad.backward(loss)
            ad.clip_grad_norm(active, 5.0)
            opt.step()
            step += 1
            total += loss.item() * len(batch)
            seen += len(batch)
        log.info("qe epoch %d mean loss %.4f", epoch, total / max(seen, 1))
    return model


def tune_threshold(probs: Sequence[np.ndarray] | np.ndarray,
                   labels: Sequence[Sequence[int]] | np.ndarray) -> float:
    """Grid search over 0.01..0.99 maximizing F1-Multi on development data.

    Ties pick the lowest threshold. A single-class development set gets a
    warning and the neutral 0.5."""
    if isinstance(probs, np.ndarray) and probs.ndim == 1:
        flat_p = probs
    else:
        flat_p = np.concatenate([np.asarray(p).ravel() for p in probs])
    if isinstance(labels, np.ndarray) and labels.ndim == 1:
        flat_l = labels
    else:
        flat_l = np.concatenate([np.asarray(l).ravel() for l in labels])
    if flat_p.size == 0:
        raise ValueError("empty development set")
    if len(set(flat_l.tolist())) < 2:
        log.warning("development labels contain a single class; threshold = 0.5")
        return 0.5
    best_theta, best_score = 0.5, -1.0
    for theta in np.arange(0.01, 1.00, 0.01):
        theta = round(float(theta), 2)
        _, _, multi = f1_multi(tags_from_probs(flat_p, theta), flat_l)
        if multi > best_score:
            best_theta, best_score = theta, multi
    return best_theta


def ensemble_predict(models: Sequence[QeModel], feats: np.ndarray) -> Prediction:
    """Arithmetic mean of every model's score and BAD probabilities."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    widths = {m.feature_width for m in models}
    if len(widths) > 1:
        raise ad.ShapeError(f"ensemble feature widths differ: {sorted(widths)}")
    preds = [m.predict(feats) for m in models]
    return Prediction(
        hter_hat=float(np.mean([p.hter_hat for p in preds])),
        word_bad_prob=np.mean([p.word_bad_prob for p in preds], axis=0),
        gap_bad_prob=np.mean([p.gap_bad_prob for p in preds], axis=0),
    )
