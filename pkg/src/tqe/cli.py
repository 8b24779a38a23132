"""Command-line pipeline: synthesize data, label, pretrain, extract
features, train the QE heads, predict and evaluate.

Configuration comes from an optional key=value file plus command-line
flags; flags win. Every stage leaves its artifact on disk and is skipped
on rerun when the artifact already exists (use --force to redo). Exit
codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import (
    BpeMerges,
    EOS_ID,
    SynthConfig,
    Vocab,
    apply_bpe,
    combine_training_corpus,
    generate_synthetic_task,
    learn_bpe,
    pool_features,
    read_float_file,
    read_tag_file,
    read_token_file,
    write_float_file,
    write_tag_file,
    write_token_file,
)
from .expert_model import ExpertCheckpoint, ExpertConfig, train_expert
from .feature_extractor import extract_features, read_feature_file
from .metrics import MetricReport, f1_multi, sentence_report
from .qe_predictor import (
    DecisionThreshold,
    QeConfig,
    QeModel,
    ensemble_predict,
    tags_from_probs,
    train_qe,
    tune_threshold,
)
from .ter_labeler import label

log = logging.getLogger(__name__)


class ValidationError(ValueError):
    """Bad arguments or configuration; exits with code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse usage problems are validation errors
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration

@dataclass
class RunConfig:
    """Everything a pipeline run needs; mirrors the key=value file."""

    out_dir: str = "run"
    seed: int = 0
    threads: int = 1
    tokenization: str = "word"          # word | bpe
    bpe_merges: int = 200
    # synthetic task
    vocab_size: int = 64
    n_parallel: int = 2000
    n_train: int = 500
    n_dev: int = 200
    n_test: int = 200
    p_sub: float = 0.15
    p_del: float = 0.05
    p_ins: float = 0.05
    min_len: int = 4
    max_len: int = 12
    # expert
    d_model: int = 32
    n_layers: int = 2
    d_ff: int = 64
    n_heads: int = 4
    sigma: float = 0.1
    kl_weight: float = 1e-3
    expert_epochs: int = 12
    expert_lr: float = 1e-3
    batch_size: int = 64
    # qe heads
    lstm_hidden: int = 64
    qe_epochs: int = 30
    qe_lr: float = 1e-3
    lambda_sent: float = 1.0
    lambda_word: float = 1.0
    lambda_gap: float = 1.0
    ensemble_seeds: int = 1

    def expert_config(self, src_vocab_size: int, tgt_vocab_size: int) -> ExpertConfig:
        return ExpertConfig(
            src_vocab_size=src_vocab_size, tgt_vocab_size=tgt_vocab_size,
            d_model=self.d_model, n_layers=self.n_layers, d_ff=self.d_ff,
            n_heads=self.n_heads, sigma=self.sigma, kl_weight=self.kl_weight)

    def qe_config(self, seed: int) -> QeConfig:
        return QeConfig(
            lstm_hidden=self.lstm_hidden, epochs=self.qe_epochs, lr=self.qe_lr,
            lambda_sent=self.lambda_sent, lambda_word=self.lambda_word,
            lambda_gap=self.lambda_gap, batch_size=self.batch_size, seed=seed)


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"config file not found: {path}")
        for lineno, line in enumerate(p.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValidationError(f"{path}:{lineno}: expected key=value")
            _set_config_field(cfg, key.strip(), value.strip())
    for key, value in overrides.items():
        if value is not None:
            _set_config_field(cfg, key, str(value))
    return cfg


def _set_config_field(cfg: RunConfig, key: str, value: str) -> None:
    if not hasattr(cfg, key):
        raise ValidationError(f"unknown config key: {key}")
    current = getattr(cfg, key)
    try:
        if isinstance(current, int):
            setattr(cfg, key, int(value))
        elif isinstance(current, float):
            setattr(cfg, key, float(value))
        else:
            setattr(cfg, key, value)
    except ValueError as exc:
        raise ValidationError(f"bad value for {key}: {value}") from exc


# ---------------------------------------------------------------------------
# manifest

def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


class Manifest:
    """Records config, input hashes, stage timings and metric reports."""

    def __init__(self, config: RunConfig):
        self.data = {
            "version": __version__,
            "config": vars(config).copy(),
            "stages": {},
            "inputs": {},
            "metrics": {},
        }

    def record_input(self, stage: str, path: Path) -> None:
        self.data["inputs"].setdefault(stage, {})[str(path)] = file_hash(path)

    def record_stage(self, stage: str, seconds: float, skipped: bool = False) -> None:
        self.data["stages"][stage] = {"seconds": round(seconds, 3), "skipped": skipped}

    def record_metrics(self, name: str, report: MetricReport) -> None:
        self.data["metrics"][name] = {
            k: v for k, v in vars(report).items() if v is not None}

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared helpers

def _dataset_paths(out: Path, split: str) -> dict[str, Path]:
    return {kind: out / f"{split}.{kind}"
            for kind in ("src", "mt", "pe", "hter", "tags", "gap_tags")}


def encode_source_ids(vocab: Vocab, tokens) -> np.ndarray:
    return np.array(vocab.encode(tokens) + [EOS_ID], dtype=np.int64)


def _tokenize_mt(cfg: RunConfig, merges: BpeMerges | None, tokens: list[str]):
    """MT-side tokenization: returns (units, segmentation or None)."""
    if merges is None:
        return tokens, None
    return apply_bpe(tokens, merges)


def _load_vocabs_from_checkpoint(ckpt: ExpertCheckpoint) -> tuple[Vocab, Vocab]:
    src, tgt = Vocab(), Vocab()
    src.tokens = list(ckpt.src_vocab)
    src.index = {t: i for i, t in enumerate(src.tokens)}
    tgt.tokens = list(ckpt.tgt_vocab)
    tgt.index = {t: i for i, t in enumerate(tgt.tokens)}
    return src, tgt


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    run_synth(_config_from_args(args))
    return 0


def run_synth(cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_triplets = cfg.n_train + cfg.n_dev + cfg.n_test
    synth = SynthConfig(
        vocab_size=cfg.vocab_size, n_parallel=cfg.n_parallel,
        n_triplets=n_triplets, p_sub=cfg.p_sub, p_del=cfg.p_del,
        p_ins=cfg.p_ins, min_len=cfg.min_len, max_len=cfg.max_len,
        seed=cfg.seed)
    task = generate_synthetic_task(synth)
    write_token_file(out / "parallel.src", [s for s, _ in task.parallel])
    write_token_file(out / "parallel.pe", [t for _, t in task.parallel])
    splits = {
        "train": task.triplets[: cfg.n_train],
        "dev": task.triplets[cfg.n_train: cfg.n_train + cfg.n_dev],
        "test": task.triplets[cfg.n_train + cfg.n_dev:],
    }
    for split, triplets in splits.items():
        paths = _dataset_paths(out, split)
        write_token_file(paths["src"], [ex.s for ex in triplets])
        write_token_file(paths["mt"], [ex.m for ex in triplets])
        write_token_file(paths["pe"], [ex.t for ex in triplets])
        write_float_file(paths["hter"], [ex.h for ex in triplets])
        write_tag_file(paths["tags"], [ex.y for ex in triplets])
        write_tag_file(paths["gap_tags"], [ex.g for ex in triplets])
    log.info("synthetic task written to %s (%d parallel, %d triplets)",
             out, cfg.n_parallel, n_triplets)


def cmd_label(args) -> int:
    mt = read_token_file(args.mt)
    pe = read_token_file(args.pe)
    if len(mt) != len(pe):
        raise ValidationError(
            f"line counts differ: {args.mt} has {len(mt)}, {args.pe} has {len(pe)}")
    out = Path(args.out_prefix)
    out.parent.mkdir(parents=True, exist_ok=True)
    labels = [label(m, t) for m, t in zip(mt, pe)]
    write_float_file(Path(str(out) + ".hter"), [l.h for l in labels])
    write_tag_file(Path(str(out) + ".tags"), [l.y for l in labels])
    write_tag_file(Path(str(out) + ".gap_tags"), [l.g for l in labels])
    log.info("labeled %d sentence pairs -> %s.{hter,tags,gap_tags}", len(mt), out)
    return 0


def _build_pretrain_data(cfg: RunConfig, src_file: Path, tgt_file: Path,
                         qe_src: Path | None, qe_pe: Path | None):
    parallel = list(zip(read_token_file(src_file), read_token_file(tgt_file)))
    parallel = [(s, t) for s, t in parallel if len(s) and len(t)]
    qe_pairs = []
    if qe_src and qe_pe:
        qe_pairs = list(zip(read_token_file(qe_src), read_token_file(qe_pe)))
    rng = np.random.default_rng(cfg.seed)
    combined = combine_training_corpus(parallel, qe_pairs, rng)

    merges = None
    if cfg.tokenization == "bpe":
        merges = learn_bpe([s for s, _ in combined] + [t for _, t in combined],
                           cfg.bpe_merges)
        combined = [(apply_bpe(s, merges)[0], apply_bpe(t, merges)[0])
                    for s, t in combined]
    src_vocab = Vocab.build([s for s, _ in combined])
    tgt_vocab = Vocab.build([t for _, t in combined])
    encoded = [(encode_source_ids(src_vocab, s),
                np.array(tgt_vocab.encode(t), dtype=np.int64))
               for s, t in combined]
    encoded = [(s, t) for s, t in encoded if len(t)]
    return encoded, src_vocab, tgt_vocab, merges


def cmd_pretrain(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    encoded, src_vocab, tgt_vocab, merges = _build_pretrain_data(
        cfg, Path(args.corpus_src), Path(args.corpus_tgt),
        Path(args.qe_src) if args.qe_src else None,
        Path(args.qe_pe) if args.qe_pe else None)
    if merges is not None:
        merges.save(Path(str(out) + ".merges"))
    mcfg = cfg.expert_config(len(src_vocab), len(tgt_vocab))
    ckpt = train_expert(encoded, mcfg, src_vocab, tgt_vocab, seed=cfg.seed,
                        epochs=cfg.expert_epochs, batch_size=cfg.batch_size,
                        lr=cfg.expert_lr, checkpoint_path=out)
    ckpt.save(out)
    log.info("expert checkpoint written to %s (step %d, loss %.4f)",
             out, ckpt.step, ckpt.loss)
    return 0


def _encode_qe_inputs(cfg: RunConfig, ckpt: ExpertCheckpoint,
                      merges: BpeMerges | None, src_file: Path, mt_file: Path):
    """Token ids for (source, MT) pairs plus per-sentence segmentations."""
    src_vocab, tgt_vocab = _load_vocabs_from_checkpoint(ckpt)
    sources = read_token_file(src_file)
    mts = read_token_file(mt_file)
    if len(sources) != len(mts):
        raise ValidationError(
            f"line counts differ: {src_file} has {len(sources)}, {mt_file} has {len(mts)}")
    encoded, segs = [], []
    for s, m in zip(sources, mts):
        seg = None
        if merges is not None:
            s, _ = apply_bpe(s, merges)
            m, seg = apply_bpe(m, merges)
        encoded.append((encode_source_ids(src_vocab, s),
                        np.array(tgt_vocab.encode(m), dtype=np.int64)))
        segs.append(seg)
    return encoded, segs


def cmd_extract(args) -> int:
    cfg = _config_from_args(args)
    ckpt = ExpertCheckpoint.load(args.checkpoint)
    merges = _maybe_merges(cfg, args.checkpoint)
    encoded, _ = _encode_qe_inputs(cfg, ckpt, merges, Path(args.src), Path(args.mt))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    extract_features(ckpt, encoded, path=out, checkpoint_name=str(args.checkpoint))
    log.info("features for %d sentences written to %s", len(encoded), out)
    return 0


def _maybe_merges(cfg: RunConfig, checkpoint_path) -> BpeMerges | None:
    if cfg.tokenization != "bpe":
        return None
    merges_path = Path(str(checkpoint_path) + ".merges")
    if not merges_path.exists():
        raise ValidationError(f"bpe tokenization requested but {merges_path} is missing")
    return BpeMerges.load(merges_path)


def _pooled_features(cfg: RunConfig, ckpt: ExpertCheckpoint,
                     merges: BpeMerges | None, src_file: Path, mt_file: Path):
    """Feature matrices per sentence, pooled to word level in BPE mode."""
    encoded, segs = _encode_qe_inputs(cfg, ckpt, merges, src_file, mt_file)
    seqs = extract_features(ckpt, encoded)
    feats = []
    for fs, seg in zip(seqs, segs):
        rows = fs.rows
        if seg is not None:
            rows = pool_features(rows, seg)
        feats.append(rows)
    return feats


def cmd_train_qe(args) -> int:
    cfg = _config_from_args(args)
    ckpt = ExpertCheckpoint.load(args.checkpoint)
    merges = _maybe_merges(cfg, args.checkpoint)
    feats = _pooled_features(cfg, ckpt, merges, Path(args.src), Path(args.mt))
    hter = read_float_file(args.hter) if args.hter else None
    tags = read_tag_file(args.tags) if args.tags else None
    gaps = read_tag_file(args.gap_tags) if args.gap_tags else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    models = []
    for i in range(cfg.ensemble_seeds):
        qcfg = cfg.qe_config(seed=cfg.seed + i)
        model = train_qe(feats, hter, tags, gaps, qcfg)
        models.append(model)
    if args.dev_src and args.dev_mt:
        dev_feats = _pooled_features(cfg, ckpt, merges,
                                     Path(args.dev_src), Path(args.dev_mt))
        dev_preds = [ensemble_predict(models, f) for f in dev_feats]
        theta = DecisionThreshold()
        if args.dev_tags:
            theta.theta_word = tune_threshold(
                [p.word_bad_prob for p in dev_preds], read_tag_file(args.dev_tags))
        if args.dev_gap_tags:
            theta.theta_gap = tune_threshold(
                [p.gap_bad_prob for p in dev_preds], read_tag_file(args.dev_gap_tags))
        for model in models:
            model.thresholds = theta
    for i, model in enumerate(models):
        model.save(_member_path(out, i, len(models)))
    log.info("%d QE model(s) written to %s", len(models), out)
    return 0


def _member_path(out: Path, index: int, count: int) -> Path:
    if count == 1:
        return out
    return out.with_name(f"{out.stem}.{index}{out.suffix}")


def _load_qe_models(paths: list[str]) -> list[QeModel]:
    return [QeModel.load(p) for p in paths]


def cmd_predict(args) -> int:
    if getattr(args, "pe", None):
        raise ValidationError(
            "predict refuses post-edit/reference files; it must run from "
            "(source, MT) alone")
    cfg = _config_from_args(args)
    ckpt = ExpertCheckpoint.load(args.checkpoint)
    merges = _maybe_merges(cfg, args.checkpoint)
    models = _load_qe_models(args.qe_model)
    feats = _pooled_features(cfg, ckpt, merges, Path(args.src), Path(args.mt))
    theta = models[0].thresholds
    preds = [ensemble_predict(models, f) for f in feats]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_float_file(out / "pred.hter", [p.hter_hat for p in preds])
    write_tag_file(out / "pred.tags",
                   [tags_from_probs(p.word_bad_prob, theta.theta_word) for p in preds])
    write_tag_file(out / "pred.gap_tags",
                   [tags_from_probs(p.gap_bad_prob, theta.theta_gap) for p in preds])
    log.info("predictions for %d sentences written to %s", len(preds), out)
    return 0


def evaluate_files(pred_hter=None, gold_hter=None, pred_tags=None,
                   gold_tags=None, pred_gaps=None, gold_gaps=None) -> MetricReport:
    report = MetricReport()
    if pred_hter and gold_hter:
        pred = read_float_file(pred_hter)
        gold = read_float_file(gold_hter)
        if len(pred) != len(gold):
            raise ValidationError(
                f"hter line counts differ: {len(pred)} vs {len(gold)}")
        report = sentence_report(pred, gold)
    if pred_tags and gold_tags:
        pred = read_tag_file(pred_tags)
        gold = read_tag_file(gold_tags)
        flat_p = np.concatenate([np.asarray(t) for t in pred])
        flat_g = np.concatenate([np.asarray(t) for t in gold])
        if flat_p.shape != flat_g.shape:
            raise ValidationError("word tag counts differ between files")
        report.n_word_tokens = int(flat_p.size)
        report.word_f1_ok, report.word_f1_bad, report.word_f1_multi = f1_multi(
            flat_p, flat_g)
    if pred_gaps and gold_gaps:
        pred = read_tag_file(pred_gaps)
        gold = read_tag_file(gold_gaps)
        flat_p = np.concatenate([np.asarray(t) for t in pred])
        flat_g = np.concatenate([np.asarray(t) for t in gold])
        if flat_p.shape != flat_g.shape:
            raise ValidationError("gap tag counts differ between files")
        report.n_gap_tokens = int(flat_p.size)
        report.gap_f1_ok, report.gap_f1_bad, report.gap_f1_multi = f1_multi(
            flat_p, flat_g)
    return report


def cmd_eval(args) -> int:
    report = evaluate_files(args.pred_hter, args.gold_hter, args.pred_tags,
                            args.gold_tags, args.pred_gap_tags, args.gold_gap_tags)
    sys.stdout.write(report.as_text())
    sys.stdout.write(report.as_kv())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.as_kv())
    return 0


# ---------------------------------------------------------------------------
# full pipeline

def cmd_pipeline(args) -> int:
    cfg = _config_from_args(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(cfg)
    force = bool(getattr(args, "force", False))

    def stage(name: str, artifact: Path, fn) -> None:
        if artifact.exists() and not force:
            log.info("stage %s: artifact %s exists, skipping", name, artifact)
            manifest.record_stage(name, 0.0, skipped=True)
            return
        t0 = time.time()
        fn()
        manifest.record_stage(name, time.time() - t0)
        log.info("stage %s done in %.1fs", name, time.time() - t0)

    # 1: data (synthetic) and labels
    stage("synth", out / "test.gap_tags", lambda: run_synth(cfg))

    # 2: pretrain the expert on parallel + 10x QE (src, pe)
    expert_path = out / "expert.blex"
    stage("pretrain", expert_path, lambda: _pipeline_pretrain(cfg, out, expert_path))

    # 3: extract features for every split
    feat_paths = {split: out / f"features.{split}.qeft"
                  for split in ("train", "dev", "test")}
    ckpt_box: dict[str, ExpertCheckpoint] = {}

    def get_ckpt() -> ExpertCheckpoint:
        if "c" not in ckpt_box:
            ckpt_box["c"] = ExpertCheckpoint.load(expert_path)
        return ckpt_box["c"]

    for split in ("train", "dev", "test"):
        stage(f"extract-{split}", feat_paths[split],
              lambda split=split: _pipeline_extract(cfg, out, get_ckpt(), split,
                                                    feat_paths[split]))

    # 4: train QE heads (with dev threshold tuning)
    qe_path = out / "qe.qebl"
    stage("train-qe", qe_path,
          lambda: _pipeline_train_qe(cfg, out, get_ckpt(), feat_paths, qe_path))

    # 5: predict on the test split and evaluate
    pred_dir = out / "pred"
    stage("predict", pred_dir / "pred.hter",
          lambda: _pipeline_predict(cfg, out, get_ckpt(), qe_path, pred_dir,
                                    manifest))
    report = evaluate_files(
        pred_hter=pred_dir / "pred.hter", gold_hter=out / "test.hter",
        pred_tags=pred_dir / "pred.tags", gold_tags=out / "test.tags",
        pred_gaps=pred_dir / "pred.gap_tags", gold_gaps=out / "test.gap_tags")
    (out / "metrics.txt").write_text(report.as_text())
    (out / "metrics.kv").write_text(report.as_kv())
    manifest.record_metrics("test", report)
    manifest.save(out / "manifest.json")
    sys.stdout.write(report.as_text())
    log.info("pipeline complete; metrics in %s", out / "metrics.kv")
    return 0


def _pipeline_pretrain(cfg: RunConfig, out: Path, expert_path: Path) -> None:
    encoded, src_vocab, tgt_vocab, merges = _build_pretrain_data(
        cfg, out / "parallel.src", out / "parallel.pe",
        out / "train.src", out / "train.pe")
    if merges is not None:
        merges.save(Path(str(expert_path) + ".merges"))
    mcfg = cfg.expert_config(len(src_vocab), len(tgt_vocab))
    ckpt = train_expert(encoded, mcfg, src_vocab, tgt_vocab, seed=cfg.seed,
                        epochs=cfg.expert_epochs, batch_size=cfg.batch_size,
                        lr=cfg.expert_lr)
    ckpt.save(expert_path)


def _pipeline_extract(cfg: RunConfig, out: Path, ckpt: ExpertCheckpoint,
                      split: str, path: Path) -> None:
    merges = _maybe_merges(cfg, out / "expert.blex")
    encoded, _ = _encode_qe_inputs(cfg, ckpt, merges,
                                   out / f"{split}.src", out / f"{split}.mt")
    extract_features(ckpt, encoded, path=path, checkpoint_name="expert.blex")


def _pipeline_train_qe(cfg: RunConfig, out: Path, ckpt: ExpertCheckpoint,
                       feat_paths: dict, qe_path: Path) -> None:
    merges = _maybe_merges(cfg, out / "expert.blex")

    def load_split(split: str):
        if merges is None:
            return [fs.rows for fs in read_feature_file(feat_paths[split])]
        return _pooled_features(cfg, ckpt, merges,
                                out / f"{split}.src", out / f"{split}.mt")

    feats = load_split("train")
    hter = read_float_file(out / "train.hter")
    tags = read_tag_file(out / "train.tags")
    gaps = read_tag_file(out / "train.gap_tags")
    models = []
    for i in range(cfg.ensemble_seeds):
        models.append(train_qe(feats, hter, tags, gaps, cfg.qe_config(cfg.seed + i)))
    dev_feats = load_split("dev")
    dev_preds = [ensemble_predict(models, f) for f in dev_feats]
    theta = DecisionThreshold(
        theta_word=tune_threshold([p.word_bad_prob for p in dev_preds],
                                  read_tag_file(out / "dev.tags")),
        theta_gap=tune_threshold([p.gap_bad_prob for p in dev_preds],
                                 read_tag_file(out / "dev.gap_tags")))
    for i, model in enumerate(models):
        model.thresholds = theta
        model.save(_member_path(qe_path, i, len(models)))


def _pipeline_predict(cfg: RunConfig, out: Path, ckpt: ExpertCheckpoint,
                      qe_path: Path, pred_dir: Path, manifest: Manifest) -> None:
    merges = _maybe_merges(cfg, out / "expert.blex")
    member_paths = [_member_path(qe_path, i, cfg.ensemble_seeds)
                    for i in range(cfg.ensemble_seeds)]
    models = [QeModel.load(p) for p in member_paths]
    src_file, mt_file = out / "test.src", out / "test.mt"
    for path in (src_file, mt_file, *member_paths, out / "expert.blex"):
        manifest.record_input("predict", Path(path))
    feats = _pooled_features(cfg, ckpt, merges, src_file, mt_file)
    theta = models[0].thresholds
    preds = [ensemble_predict(models, f) for f in feats]
    pred_dir.mkdir(parents=True, exist_ok=True)
    write_float_file(pred_dir / "pred.hter", [p.hter_hat for p in preds])
    write_tag_file(pred_dir / "pred.tags",
                   [tags_from_probs(p.word_bad_prob, theta.theta_word) for p in preds])
    write_tag_file(pred_dir / "pred.gap_tags",
                   [tags_from_probs(p.gap_bad_prob, theta.theta_gap) for p in preds])


# ---------------------------------------------------------------------------
# argument wiring

def _config_from_args(args) -> RunConfig:
    if hasattr(args, "_config_obj"):
        return args._config_obj
    overrides = {}
    for key in vars(RunConfig()):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    if getattr(args, "out", None) and "out_dir" in overrides:
        overrides["out_dir"] = args.out
    return load_run_config(getattr(args, "config", None), overrides)


def _add_config_flags(parser: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        default = getattr(RunConfig(), key)
        flag = "--" + key.replace("_", "-")
        if isinstance(default, int):
            parser.add_argument(flag, type=int, default=None, dest=key)
        elif isinstance(default, float):
            parser.add_argument(flag, type=float, default=None, dest=key)
        else:
            parser.add_argument(flag, default=None, dest=key)


SYNTH_KEYS = ("vocab_size", "n_parallel", "n_train", "n_dev", "n_test",
              "p_sub", "p_del", "p_ins", "min_len", "max_len")
EXPERT_KEYS = ("tokenization", "bpe_merges", "d_model", "n_layers", "d_ff",
               "n_heads", "sigma", "kl_weight", "expert_epochs", "expert_lr",
               "batch_size")
QE_KEYS = ("lstm_hidden", "qe_epochs", "qe_lr", "lambda_sent", "lambda_word",
           "lambda_gap", "ensemble_seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tqe", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--seed", type=int, default=None, dest="seed")
        p.add_argument("--threads", type=int, default=None, dest="threads",
                       help="reserved; the desk-scale build computes single-threaded")
        p.add_argument("--out-dir", default=None, dest="out_dir")

    p = sub.add_parser("synth", help="generate the synthetic corpus and labels")
    common(p)
    _add_config_flags(p, SYNTH_KEYS)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("label", help="derive HTER and tags from mt/pe files")
    p.add_argument("--mt", required=True)
    p.add_argument("--pe", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(fn=cmd_label)

    p = sub.add_parser("pretrain", help="pretrain the conditional LM")
    common(p)
    _add_config_flags(p, EXPERT_KEYS)
    p.add_argument("--corpus-src", required=True)
    p.add_argument("--corpus-tgt", required=True)
    p.add_argument("--qe-src", help="QE-source file mixed in at 10 copies")
    p.add_argument("--qe-pe", help="QE post-edit file mixed in at 10 copies")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("extract", help="extract QE features from a checkpoint")
    common(p)
    _add_config_flags(p, ("tokenization",))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--mt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("train-qe", help="train the Bi-LSTM QE heads")
    common(p)
    _add_config_flags(p, QE_KEYS + ("tokenization",))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--mt", required=True)
    p.add_argument("--hter")
    p.add_argument("--tags")
    p.add_argument("--gap-tags")
    p.add_argument("--dev-src")
    p.add_argument("--dev-mt")
    p.add_argument("--dev-tags")
    p.add_argument("--dev-gap-tags")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_qe)

    p = sub.add_parser("predict", help="predict HTER and tags for src/mt")
    common(p)
    _add_config_flags(p, ("tokenization",))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--qe-model", required=True, nargs="+")
    p.add_argument("--src", required=True)
    p.add_argument("--mt", required=True)
    p.add_argument("--pe", help=argparse.SUPPRESS)  # trap: refused if given
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="score prediction files against gold")
    p.add_argument("--pred-hter")
    p.add_argument("--gold-hter")
    p.add_argument("--pred-tags")
    p.add_argument("--gold-tags")
    p.add_argument("--pred-gap-tags")
    p.add_argument("--gold-gap-tags")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    common(p)
    _add_config_flags(p, SYNTH_KEYS + EXPERT_KEYS + QE_KEYS)
    p.add_argument("--force", action="store_true",
                   help="re-run stages even when artifacts exist")
    p.set_defaults(fn=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        log.error("--threads must be >= 1")
        return 1
    try:
        return args.fn(args)
    except ValidationError as exc:
        log.error("%s", exc)
        return 1
    except Exception:  # runtime failure: full diagnostics, exit 2
        log.exception("stage failed")
        return 2


if __name__ == "__main__":
    sys.exit(main())
