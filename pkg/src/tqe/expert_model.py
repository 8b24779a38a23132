"""Bidirectional conditional language model over (source, target) pairs.

A transformer encoder reads the source; two masked transformer streams
read the target, one left-to-right over t_{<k} and one right-to-left over
t_{>k}, both cross-attending to the source memory. Each stream ends in a
Gaussian latent layer (mean plus fixed-sigma noise during training); a
linear reconstructor predicts token k from the concatenated latents, so no
path from t_k can reach its own prediction. An optional gap head predicts
which token, if any, is missing at each inter-token boundary.

The information constraint is enforced by input shifting, not by holes in
the attention mask: the forward stream's input at position k is the
embedding of t_{k-1} (BOS at the front) under a causal mask, and the
backward stream's input is t_{k+1} (EOS at the back) under an anti-causal
mask. Every layer therefore preserves the constraint by construction.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BLANK_ID, BOS_ID, EOS_ID, Vocab

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BLEX1"


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class ExpertConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    d_ff: int = 512
    n_heads: int = 8
    sigma: float = 0.1
    kl_weight: float = 1e-3
    max_len: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even for sinusoidal positions")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.kl_weight < 0:
            raise ValueError(f"kl_weight must be >= 0, got {self.kl_weight}")

    def as_kv(self) -> dict[str, str]:
        return {f.name: repr(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ExpertConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in kv:
                caster = float if f.type == "float" else int
                kwargs[f.name] = caster(kv[f.name])
        return cls(**kwargs)


@dataclass
class LatentStates:
    """Per-position latent rows for both directions, plus their means.

    Row k of the forward stream depends only on the source and t_{<k};
    row k of the backward stream only on the source and t_{>k}. With noise
    off the samples equal the means.
    """

    z_fwd: Tensor
    z_bwd: Tensor
    mu_fwd: Tensor
    mu_bwd: Tensor


def sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx = np.arange(0, d, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, idx / d)
    table = np.zeros((max_len, d))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
           shape: tuple[int, ...] | None = None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class ExpertModel:
    """Parameter container plus forward passes; see the module docstring."""

    def __init__(self, config: ExpertConfig, rng: np.random.Generator | None = None,
                 with_gap_head: bool = False):
        self.config = config
        self.with_gap_head = with_gap_head
        self.params: dict[str, Tensor] = {}
        self._pos = sinusoidal_positions(config.max_len, config.d_model)
        rng = rng or np.random.default_rng(0)
        self._init_params(rng)

    # -- construction ------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True)

    def _init_block(self, prefix: str, rng: np.random.Generator, cross: bool) -> None:
        d, dff = self.config.d_model, self.config.d_ff
        attns = ("self", "cross") if cross else ("self",)
        for attn in attns:
            for mat in ("wq", "wk", "wv", "wo"):
                self._add(f"{prefix}.{attn}.{mat}", glorot(rng, d, d))
            self._add(f"{prefix}.{attn}.ln_g", np.ones(d))
            self._add(f"{prefix}.{attn}.ln_b", np.zeros(d))
        self._add(f"{prefix}.ff.w1", glorot(rng, d, dff))
        self._add(f"{prefix}.ff.b1", np.zeros(dff))
        self._add(f"{prefix}.ff.w2", glorot(rng, dff, d))
        self._add(f"{prefix}.ff.b2", np.zeros(d))
        self._add(f"{prefix}.ff.ln_g", np.ones(d))
        self._add(f"{prefix}.ff.ln_b", np.zeros(d))

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d = cfg.d_model
        self._add("src_embed", glorot(rng, cfg.src_vocab_size, d))
        self._add("tgt_embed", glorot(rng, cfg.tgt_vocab_size, d))
        for i in range(cfg.n_layers):
            self._init_block(f"enc{i}", rng, cross=False)
            self._init_block(f"fwd{i}", rng, cross=True)
            self._init_block(f"bwd{i}", rng, cross=True)
        self._add("recon.w", glorot(rng, 2 * d, cfg.tgt_vocab_size))
        self._add("recon.b", np.zeros(cfg.tgt_vocab_size))
        if self.with_gap_head:
            self._add("gap.w", glorot(rng, 4 * d, cfg.tgt_vocab_size))
            self._add("gap.b", np.zeros(cfg.tgt_vocab_size))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    # -- forward pieces ------------------------------------------------------

    def _attention(self, prefix: str, queries: Tensor, keys: Tensor,
                   mask: np.ndarray) -> Tensor:
        p = self.params
        cfg = self.config
        heads, dk = cfg.n_heads, cfg.d_model // cfg.n_heads
        b, tq = queries.shape[0], queries.shape[1]
        tk = keys.shape[1]

        def split(x: Tensor, t: int) -> Tensor:
            x = ad.reshape(x, (b, t, heads, dk))
            return ad.transpose(x, (0, 2, 1, 3))

        q = split(ad.matmul(queries, p[f"{prefix}.wq"]), tq)
        k = split(ad.matmul(keys, p[f"{prefix}.wk"]), tk)
        v = split(ad.matmul(keys, p[f"{prefix}.wv"]), tk)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), dk ** -0.5)
        weights = ad.masked_softmax(scores, mask)
        ctx = ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3))
        ctx = ad.reshape(ctx, (b, tq, cfg.d_model))
        return ad.matmul(ctx, p[f"{prefix}.wo"])

    def _sublayer(self, prefix: str, x: Tensor, sub: Tensor) -> Tensor:
        p = self.params
        return ad.layer_norm(ad.add(x, sub), p[f"{prefix}.ln_g"], p[f"{prefix}.ln_b"])

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(ad.add(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return ad.add(ad.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _embed(self, table: str, ids: np.ndarray) -> Tensor:
        d = self.config.d_model
        emb = ad.mul(ad.embedding(self.params[table], ids), np.sqrt(d))
        return ad.add(emb, Tensor(self._pos[: ids.shape[-1]]))

    @staticmethod
    def _as_batch(ids) -> tuple[np.ndarray, bool]:
        arr = np.asarray(ids, dtype=np.int64)
        if arr.ndim == 1:
            return arr[None, :], True
        return arr, False

    def _truncate(self, ids: np.ndarray) -> np.ndarray:
        if ids.shape[-1] > self.config.max_len:
            log.warning("sequence length %d exceeds max_len %d; truncating",
                        ids.shape[-1], self.config.max_len)
            ids = ids[..., : self.config.max_len]
        return ids

    # -- public passes -------------------------------------------------------

    def encode_source(self, s_ids) -> Tensor:
        """Source memory: self-attention blocks over the embedded source."""
        ids, single = self._as_batch(s_ids)
        ids = self._truncate(ids)
        t = ids.shape[1]
        mask = np.ones((t, t), dtype=bool)
        x = self._embed("src_embed", ids)
        for i in range(self.config.n_layers):
            x = self._sublayer(f"enc{i}.self",
                               x, self._attention(f"enc{i}.self", x, x, mask))
            x = self._sublayer(f"enc{i}.ff", x, self._ffn(f"enc{i}.ff", x))
        return x[0] if single else x

    def _stream(self, name: str, in_ids: np.ndarray, memory: Tensor,
                mask: np.ndarray) -> Tensor:
        x = self._embed("tgt_embed", in_ids)
        tk = memory.shape[1]
        cross_mask = np.ones((in_ids.shape[1], tk), dtype=bool)
        for i in range(self.config.n_layers):
            pre = f"{name}{i}"
            x = self._sublayer(f"{pre}.self",
                               x, self._attention(f"{pre}.self", x, x, mask))
            x = self._sublayer(f"{pre}.cross",
                               x, self._attention(f"{pre}.cross", x, memory, cross_mask))
            x = self._sublayer(f"{pre}.ff", x, self._ffn(f"{pre}.ff", x))
        return x

    def encode_target_bidirectional(self, t_ids, memory: Tensor,
                                    noise_rng: np.random.Generator | None = None
                                    ) -> LatentStates:
        """Latent rows for every target position.

        The forward stream feeds t_{k-1} under a causal mask, the backward
        stream t_{k+1} under an anti-causal mask. With ``noise_rng`` given
        (training), latents are mean plus sigma-scaled Gaussian noise.
        """
        ids, single = self._as_batch(t_ids)
        if ids.shape[1] == 0:
            raise ValueError("empty target sequence")
        ids = self._truncate(ids)
        b, t = ids.shape
        mem = memory
        if isinstance(mem, Tensor) and mem.ndim == 2:
            mem = ad.reshape(mem, (1,) + mem.shape)
        fwd_in = np.concatenate([np.full((b, 1), BOS_ID, dtype=np.int64),
                                 ids[:, :-1]], axis=1)
        bwd_in = np.concatenate([ids[:, 1:],
                                 np.full((b, 1), EOS_ID, dtype=np.int64)], axis=1)
        causal = np.tril(np.ones((t, t), dtype=bool))
        mu_fwd = self._stream("fwd", fwd_in, mem, causal)
        mu_bwd = self._stream("bwd", bwd_in, mem, causal.T)
        if single:
            mu_fwd, mu_bwd = mu_fwd[0], mu_bwd[0]
        sigma = self.config.sigma
        if noise_rng is not None and sigma > 0:
            z_fwd = ad.add(mu_fwd, Tensor(sigma * noise_rng.standard_normal(mu_fwd.shape)))
            z_bwd = ad.add(mu_bwd, Tensor(sigma * noise_rng.standard_normal(mu_bwd.shape)))
        else:
            z_fwd, z_bwd = mu_fwd, mu_bwd
        return LatentStates(z_fwd, z_bwd, mu_fwd, mu_bwd)

    def reconstruct_logits(self, latents: LatentStates) -> Tensor:
        """Token logits per position from the concatenated latent rows."""
        z = ad.concat([latents.z_fwd, latents.z_bwd], axis=-1)
        return ad.add(ad.matmul(z, self.params["recon.w"]), self.params["recon.b"])

    def gap_logits(self, latents: LatentStates) -> Tensor:
        """Boundary logits: gap k sees the latents of the tokens on both
        sides, with zero rows standing in beyond the sentence ends."""
        if "gap.w" not in self.params:
            raise ValueError("model was built without a gap head")
        zf, zb = latents.z_fwd, latents.z_bwd
        single = zf.ndim == 2
        if single:
            zf = ad.reshape(zf, (1,) + zf.shape)
            zb = ad.reshape(zb, (1,) + zb.shape)
        b, t, d = zf.shape
        zero = Tensor(np.zeros((b, 1, d)))
        zf_pad = ad.concat([zero, zf, zero], axis=1)
        zb_pad = ad.concat([zero, zb, zero], axis=1)
        left = slice(0, t + 1)
        right = slice(1, t + 2)
        gap_in = ad.concat([
            zf_pad[:, left], zb_pad[:, left],
            zf_pad[:, right], zb_pad[:, right],
        ], axis=-1)
        out = ad.add(ad.matmul(gap_in, self.params["gap.w"]), self.params["gap.b"])
        return out[0] if single else out

    # -- losses ----------------------------------------------------------------

    def _kl_surrogate(self, latents: LatentStates) -> Tensor:
        # mu-dependent part of the Gaussian KL against a standard normal,
        # averaged over every latent entry in both streams
        return ad.mul(ad.add(ad.mean(ad.square(latents.mu_fwd)),
                             ad.mean(ad.square(latents.mu_bwd))), 0.25)

    def loss_on_batch(self, s_ids, t_ids,
                      noise_rng: np.random.Generator | None = None,
                      gap_targets: np.ndarray | None = None) -> tuple[Tensor, dict]:
        """Mean token NLL plus the weighted KL surrogate; adds the gap-head
        NLL when gap targets are supplied."""
        ids, _ = self._as_batch(t_ids)
        memory = self.encode_source(np.asarray(s_ids, dtype=np.int64))
        latents = self.encode_target_bidirectional(ids, memory, noise_rng)
        logits = self.reconstruct_logits(latents)
        b, t, v = logits.shape
        nll = ad.cross_entropy_from_logits(ad.reshape(logits, (b * t, v)), ids.reshape(-1))
        loss = nll
        stats = {"nll": nll.item()}
        if gap_targets is not None:
            glog = self.gap_logits(latents)
            gb, gt, gv = glog.shape
            gap_nll = ad.cross_entropy_from_logits(
                ad.reshape(glog, (gb * gt, gv)), np.asarray(gap_targets).reshape(-1))
            loss = ad.add(loss, gap_nll)
            stats["gap_nll"] = gap_nll.item()
        if self.config.kl_weight > 0:
            loss = ad.add(loss, ad.mul(self._kl_surrogate(latents), self.config.kl_weight))
        stats["loss"] = loss.item()
        return loss, stats


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class ExpertCheckpoint:
    """Everything needed to reproduce the model's forward pass bit-exactly."""

    config: ExpertConfig
    params: dict[str, np.ndarray]
    src_vocab: list[str]
    tgt_vocab: list[str]
    step: int = 0
    loss: float = 0.0
    with_gap_head: bool = False

    def to_model(self) -> ExpertModel:
        model = ExpertModel(self.config, np.random.default_rng(0),
                            with_gap_head=self.with_gap_head)
        for name, value in self.params.items():
            model.params[name].data = value.copy()
        return model

    @classmethod
    def from_model(cls, model: ExpertModel, src_vocab: Vocab, tgt_vocab: Vocab,
                   step: int = 0, loss: float = 0.0) -> "ExpertCheckpoint":
        return cls(
            config=model.config,
            params={k: v.data.copy() for k, v in model.params.items()},
            src_vocab=list(src_vocab.tokens),
            tgt_vocab=list(tgt_vocab.tokens),
            step=step,
            loss=loss,
            with_gap_head=model.with_gap_head,
        )

    def save(self, path: str | Path) -> None:
        kv = dict(self.config.as_kv())
        kv["step"] = str(self.step)
        kv["loss"] = repr(self.loss)
        kv["with_gap_head"] = str(int(self.with_gap_head))
        kv["src_vocab"] = " ".join(self.src_vocab)
        kv["tgt_vocab"] = " ".join(self.tgt_vocab)
        write_blob_file(path, CHECKPOINT_MAGIC, kv, self.params)

    @classmethod
    def load(cls, path: str | Path) -> "ExpertCheckpoint":
        kv, params = read_blob_file(path, CHECKPOINT_MAGIC)
        return cls(
            config=ExpertConfig.from_kv(kv),
            params=params,
            src_vocab=kv["src_vocab"].split(" "),
            tgt_vocab=kv["tgt_vocab"].split(" "),
            step=int(kv.get("step", "0")),
            loss=float(kv.get("loss", "0.0")),
            with_gap_head=bool(int(kv.get("with_gap_head", "0"))),
        )


def write_blob_file(path: str | Path, magic: bytes, kv: dict[str, str],
                    arrays: dict[str, np.ndarray]) -> None:
    """Versioned binary container: magic, key=value header block, then
    named float64 blobs (name, shape, raw little-endian data)."""
    header = "\n".join(f"{k}={v}" for k, v in kv.items()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_blob_file(path: str | Path, magic: bytes
                   ) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        got = fh.read(len(magic))
        if got != magic:
            raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        kv: dict[str, str] = {}
        for line in fh.read(hlen).decode("utf-8").splitlines():
            key, _, value = line.partition("=")
            kv[key] = value
        (count,) = struct.unpack("<I", fh.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            arrays[name] = data.astype(np.float64)
        return kv, arrays


# ---------------------------------------------------------------------------
# training

def _bucket_batches(pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                    batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Group pair indices by exact (source, target) lengths so batches need
    no padding, then shuffle batch order."""
    buckets: dict[tuple[int, int], list[int]] = {}
    for idx, (s, t) in enumerate(pairs):
        buckets.setdefault((len(s), len(t)), []).append(idx)
    batches = []
    for key in sorted(buckets):
        members = buckets[key]
        rng.shuffle(members)
        for i in range(0, len(members), batch_size):
            batches.append(members[i:i + batch_size])
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train_expert(pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
                 config: ExpertConfig,
                 src_vocab: Vocab,
                 tgt_vocab: Vocab,
                 seed: int = 0,
                 epochs: int = 10,
                 batch_size: int = 64,
                 lr: float = 1e-3,
                 clip_norm: float = 5.0,
                 checkpoint_path: str | Path | None = None,
                 checkpoint_every: int = 0,
                 log_every: int = 50) -> ExpertCheckpoint:
    """Minibatch Adam pretraining on encoded (source, target) id pairs.

    Deterministic for a fixed seed. Aborts with DivergenceError on a
    non-finite loss. When ``checkpoint_every`` is set, intermediate
    checkpoints land next to ``checkpoint_path``.
    """
    rng = np.random.default_rng(seed)
    model = ExpertModel(config, rng)
    noise_rng = np.random.default_rng(rng.integers(2 ** 63))
    opt = ad.Adam(model.parameters(), lr=lr)
    data = [(np.asarray(s, dtype=np.int64), np.asarray(t, dtype=np.int64))
            for s, t in pairs]
    step = 0
    epoch_loss = 0.0
    for epoch in range(epochs):
        total, seen = 0.0, 0
        for batch in _bucket_batches(data, batch_size, rng):
            s_ids = np.stack([data[i][0] for i in batch])
            t_ids = np.stack([data[i][1] for i in batch])
            with ad.tape_scope():
                loss, stats = model.loss_on_batch(s_ids, t_ids, noise_rng)
                if not np.isfinite(stats["loss"]):
                    raise DivergenceError(
                        f"non-finite loss at step {step} (epoch {epoch}): {stats}"
                    )
                ad.backward(loss)
            ad.clip_grad_norm(model.parameters(), clip_norm)
            opt.step()
            step += 1
            total += stats["loss"] * len(batch)
            seen += len(batch)
            if log_every and step % log_every == 0:
                log.info("pretrain step %d epoch %d loss %.4f", step, epoch, stats["loss"])
            if checkpoint_path and checkpoint_every and step % checkpoint_every == 0:
                ExpertCheckpoint.from_model(
                    model, src_vocab, tgt_vocab, step, stats["loss"]
                ).save(checkpoint_path)
        epoch_loss = total / max(seen, 1)
        log.info("pretrain epoch %d mean loss %.4f", epoch, epoch_loss)
    ckpt = ExpertCheckpoint.from_model(model, src_vocab, tgt_vocab, step, epoch_loss)
    if checkpoint_path:
        ckpt.save(checkpoint_path)
    return ckpt


def make_gap_training_example(t_ids: Sequence[int], p_del: float,
                              rng: np.random.Generator
                              ) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt a target by deleting tokens; return the surviving sequence
    and per-boundary targets (the first deleted token at that boundary, or
    BLANK). At least one token always survives."""
    t_ids = np.asarray(t_ids, dtype=np.int64)
    keep = rng.random(len(t_ids)) >= p_del
    if not keep.any():
        keep[rng.integers(len(t_ids))] = True
    survivors = t_ids[keep]
    gap = np.full(len(survivors) + 1, BLANK_ID, dtype=np.int64)
    boundary = 0
    for tok, kept in zip(t_ids, keep):
        if kept:
            boundary += 1
        elif gap[boundary] == BLANK_ID:
            gap[boundary] = tok
    return survivors, gap


def train_gap_expert(pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
                     config: ExpertConfig,
                     src_vocab: Vocab,
                     tgt_vocab: Vocab,
                     p_del: float = 0.1,
                     seed: int = 0,
                     epochs: int = 10,
                     batch_size: int = 64,
                     lr: float = 1e-3,
                     clip_norm: float = 5.0,
                     log_every: int = 50) -> ExpertCheckpoint:
    """Joint token + gap pretraining.

    Each epoch resamples deletion corruption: the model reads the source
    and the thinned target, reconstructs the surviving tokens and predicts
    each deleted token at its boundary (BLANK where nothing is missing).
    """
    if not 0.0 <= p_del <= 0.5:
        raise ValueError(f"p_del must lie in [0, 0.5], got {p_del}")
    rng = np.random.default_rng(seed)
    model = ExpertModel(config, rng, with_gap_head=True)
    noise_rng = np.random.default_rng(rng.integers(2 ** 63))
    corrupt_rng = np.random.default_rng(rng.integers(2 ** 63))
    opt = ad.Adam(model.parameters(), lr=lr)
    base = [(np.asarray(s, dtype=np.int64), np.asarray(t, dtype=np.int64))
            for s, t in pairs]
    step = 0
    epoch_loss = 0.0
    for epoch in range(epochs):
        data = []
        for s, t in base:
            thin, gap = make_gap_training_example(t, p_del, corrupt_rng)
            data.append((s, thin, gap))
        buckets: dict[tuple[int, int], list[int]] = {}
        for idx, (s, thin, _) in enumerate(data):
            buckets.setdefault((len(s), len(thin)), []).append(idx)
        batches = []
        for key in sorted(buckets):
            members = buckets[key]
            rng.shuffle(members)
            for i in range(0, len(members), batch_size):
                batches.append(members[i:i + batch_size])
        order = rng.permutation(len(batches))
        total, seen = 0.0, 0
        for bi in order:
            batch = batches[bi]
            s_ids = np.stack([data[i][0] for i in batch])
            t_ids = np.stack([data[i][1] for i in batch])
            gaps = np.stack([data[i][2] for i in batch])
            with ad.tape_scope():
                loss, stats = model.loss_on_batch(s_ids, t_ids, noise_rng,
                                                  gap_targets=gaps)
                if not np.isfinite(stats["loss"]):
                    raise DivergenceError(
                        f"non-finite loss at step {step} (epoch {epoch}): {stats}"
                    )
                ad.backward(loss)
            ad.clip_grad_norm(model.parameters(), clip_norm)
            opt.step()
            step += 1
            total += stats["loss"] * len(batch)
            seen += len(batch)
            if log_every and step % log_every == 0:
                log.info("gap pretrain step %d loss %.4f", step, stats["loss"])
        epoch_loss = total / max(seen, 1)
        log.info("gap pretrain epoch %d mean loss %.4f", epoch, epoch_loss)
    return ExpertCheckpoint.from_model(model, src_vocab, tgt_vocab, step, epoch_loss)
