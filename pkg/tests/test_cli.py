import json
from pathlib import Path

import numpy as np
import pytest

from tqe.cli import RunConfig, ValidationError, load_run_config, main
from tqe.corpus import read_float_file, read_tag_file, read_token_file


def run_cli(*argv) -> int:
    return main(list(argv))


SMALL = ["--vocab-size", "24", "--n-parallel", "120", "--n-train", "40",
         "--n-dev", "25", "--n-test", "25", "--min-len", "3", "--max-len", "7"]
FAST_EXPERT = ["--d-model", "16", "--n-layers", "1", "--d-ff", "32",
               "--n-heads", "2", "--expert-epochs", "2", "--batch-size", "32"]
FAST_QE = ["--lstm-hidden", "16", "--qe-epochs", "3"]


def test_config_file_and_flag_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment\nseed=9\nd_model=48\n")
    cfg = load_run_config(str(cfg_file), {"d_model": 16, "seed": None})
    assert cfg.seed == 9          # file value survives (no flag override)
    assert cfg.d_model == 16      # flag wins


def test_config_unknown_key_rejected(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("nonsense=1\n")
    with pytest.raises(ValidationError):
        load_run_config(str(cfg_file), {})


def test_config_missing_file_rejected():
    with pytest.raises(ValidationError):
        load_run_config("/does/not/exist.cfg", {})


def test_synth_writes_consistent_files(tmp_path):
    out = tmp_path / "data"
    assert run_cli("synth", "--out-dir", str(out), "--seed", "3", *SMALL) == 0
    src = read_token_file(out / "train.src")
    mt = read_token_file(out / "train.mt")
    pe = read_token_file(out / "train.pe")
    hter = read_float_file(out / "train.hter")
    tags = read_tag_file(out / "train.tags")
    gaps = read_tag_file(out / "train.gap_tags")
    assert len(src) == len(mt) == len(pe) == len(hter) == len(tags) == len(gaps) == 40
    for m, y, g in zip(mt, tags, gaps):
        assert len(y) == len(m) and len(g) == len(m) + 1
    assert len(read_token_file(out / "parallel.src")) == 120


def test_synth_zero_noise_hter_all_zero(tmp_path):
    out = tmp_path / "clean"
    assert run_cli("synth", "--out-dir", str(out), *SMALL,
                   "--p-sub", "0", "--p-del", "0", "--p-ins", "0") == 0
    assert all(h == 0.0 for h in read_float_file(out / "test.hter"))


def test_synth_fixed_seed_byte_identical(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    run_cli("synth", "--out-dir", str(out1), "--seed", "5", *SMALL)
    run_cli("synth", "--out-dir", str(out2), "--seed", "5", *SMALL)
    for name in ("train.src", "train.mt", "train.hter", "dev.tags", "test.gap_tags"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_label_command(tmp_path):
    mt = tmp_path / "x.mt"
    pe = tmp_path / "x.pe"
    mt.write_text("a x c\na c\n")
    pe.write_text("a b c\na b c\n")
    assert run_cli("label", "--mt", str(mt), "--pe", str(pe),
                   "--out-prefix", str(tmp_path / "x")) == 0
    assert read_float_file(tmp_path / "x.hter") == [pytest.approx(1 / 3)] * 2
    assert read_tag_file(tmp_path / "x.tags") == [[0, 1, 0], [0, 0]]
    assert read_tag_file(tmp_path / "x.gap_tags") == [[0, 0, 0, 0], [0, 1, 0]]


def test_label_mismatched_lines_is_validation_error(tmp_path):
    mt = tmp_path / "x.mt"
    pe = tmp_path / "x.pe"
    mt.write_text("a\n")
    pe.write_text("a\nb\n")
    assert run_cli("label", "--mt", str(mt), "--pe", str(pe),
                   "--out-prefix", str(tmp_path / "x")) == 1


def test_eval_command(tmp_path, capsys):
    (tmp_path / "p.hter").write_text("0.1\n0.4\n0.2\n0.3\n0.25\n")
    (tmp_path / "g.hter").write_text("0.12\n0.5\n0.18\n0.35\n0.3\n")
    (tmp_path / "p.tags").write_text("OK BAD\nOK OK\n")
    (tmp_path / "g.tags").write_text("OK BAD\nBAD OK\n")
    code = run_cli("eval", "--pred-hter", str(tmp_path / "p.hter"),
                   "--gold-hter", str(tmp_path / "g.hter"),
                   "--pred-tags", str(tmp_path / "p.tags"),
                   "--gold-tags", str(tmp_path / "g.tags"),
                   "--out", str(tmp_path / "m.kv"))
    assert code == 0
    text = capsys.readouterr().out
    assert "pearson" in text and "f1_multi" in text
    kv = (tmp_path / "m.kv").read_text()
    assert any(line.startswith("pearson=") for line in kv.splitlines())


def test_unknown_flag_exits_1(capsys):
    assert run_cli("synth", "--bogus-flag", "1") == 1


def test_missing_required_flag_exits_1():
    assert run_cli("label", "--mt", "only.mt") == 1


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One very small full pipeline run shared by the staged-command tests."""
    out = tmp_path_factory.mktemp("tiny")
    code = main(["pipeline", "--out-dir", str(out), "--seed", "11",
                 *SMALL, *FAST_EXPERT, *FAST_QE])
    assert code == 0
    return out


def test_pipeline_produces_all_artifacts(tiny_run):
    for name in ("expert.blex", "features.train.qeft", "features.dev.qeft",
                 "features.test.qeft", "qe.qebl", "pred/pred.hter",
                 "pred/pred.tags", "pred/pred.gap_tags", "metrics.txt",
                 "metrics.kv", "manifest.json"):
        assert (tiny_run / name).exists(), name


def test_pipeline_prediction_line_counts(tiny_run):
    n = len(read_token_file(tiny_run / "test.src"))
    assert len(read_float_file(tiny_run / "pred/pred.hter")) == n
    tags = read_tag_file(tiny_run / "pred/pred.tags")
    gold = read_tag_file(tiny_run / "test.tags")
    assert [len(t) for t in tags] == [len(t) for t in gold]


def test_pipeline_rerun_skips_stages(tiny_run):
    code = main(["pipeline", "--out-dir", str(tiny_run), "--seed", "11",
                 *SMALL, *FAST_EXPERT, *FAST_QE])
    assert code == 0
    manifest = json.loads((tiny_run / "manifest.json").read_text())
    assert manifest["stages"]["pretrain"]["skipped"] is True
    assert manifest["stages"]["train-qe"]["skipped"] is True


def test_pipeline_manifest_audit_shows_no_reference_reads(tiny_run):
    manifest = json.loads((tiny_run / "manifest.json").read_text())
    predict_inputs = manifest["inputs"]["predict"]
    for path in predict_inputs:
        assert not path.endswith(".pe")
        assert not path.endswith(".hter")
        assert not path.endswith(".tags")
        assert not path.endswith(".gap_tags")


def test_predict_refuses_reference_files(tiny_run, tmp_path):
    code = main(["predict", "--checkpoint", str(tiny_run / "expert.blex"),
                 "--qe-model", str(tiny_run / "qe.qebl"),
                 "--src", str(tiny_run / "test.src"),
                 "--mt", str(tiny_run / "test.mt"),
                 "--pe", str(tiny_run / "test.pe"),
                 "--out", str(tmp_path / "p")])
    assert code == 1


def test_predict_ignores_reference_presence(tiny_run, tmp_path):
    # same inputs, pe file physically removed: predictions must not change
    out1 = tmp_path / "with_pe"
    code = main(["predict", "--checkpoint", str(tiny_run / "expert.blex"),
                 "--qe-model", str(tiny_run / "qe.qebl"),
                 "--src", str(tiny_run / "test.src"),
                 "--mt", str(tiny_run / "test.mt"),
                 "--out", str(out1)])
    assert code == 0
    pe_bytes = (tiny_run / "test.pe").read_bytes()
    (tiny_run / "test.pe").unlink()
    try:
        out2 = tmp_path / "without_pe"
        code = main(["predict", "--checkpoint", str(tiny_run / "expert.blex"),
                     "--qe-model", str(tiny_run / "qe.qebl"),
                     "--src", str(tiny_run / "test.src"),
                     "--mt", str(tiny_run / "test.mt"),
                     "--out", str(out2)])
        assert code == 0
        assert (out1 / "pred.hter").read_bytes() == (out2 / "pred.hter").read_bytes()
        assert (out1 / "pred.tags").read_bytes() == (out2 / "pred.tags").read_bytes()
    finally:
        (tiny_run / "test.pe").write_bytes(pe_bytes)


def test_predict_deterministic_across_invocations(tiny_run, tmp_path):
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        code = main(["predict", "--checkpoint", str(tiny_run / "expert.blex"),
                     "--qe-model", str(tiny_run / "qe.qebl"),
                     "--src", str(tiny_run / "test.src"),
                     "--mt", str(tiny_run / "test.mt"),
                     "--out", str(out)])
        assert code == 0
        outs.append(out)
    assert (outs[0] / "pred.hter").read_bytes() == (outs[1] / "pred.hter").read_bytes()
    assert (outs[0] / "pred.gap_tags").read_bytes() == (outs[1] / "pred.gap_tags").read_bytes()


def test_staged_commands_compose_like_pipeline(tiny_run, tmp_path):
    # re-run extract + eval through the individual subcommands
    feats = tmp_path / "feats.qeft"
    code = main(["extract", "--checkpoint", str(tiny_run / "expert.blex"),
                 "--src", str(tiny_run / "test.src"),
                 "--mt", str(tiny_run / "test.mt"),
                 "--out", str(feats)])
    assert code == 0
    assert feats.read_bytes() == (tiny_run / "features.test.qeft").read_bytes()
    code = main(["eval",
                 "--pred-hter", str(tiny_run / "pred/pred.hter"),
                 "--gold-hter", str(tiny_run / "test.hter"),
                 "--out", str(tmp_path / "m.kv")])
    assert code == 0
    pipeline_kv = dict(
        line.split("=") for line in
        (tiny_run / "metrics.kv").read_text().splitlines())
    staged_kv = dict(
        line.split("=") for line in
        (tmp_path / "m.kv").read_text().splitlines())
    assert staged_kv["pearson"] == pipeline_kv["pearson"]


def test_bpe_pipeline_word_level_tags(tmp_path):
    out = tmp_path / "bpe"
    code = main(["pipeline", "--out-dir", str(out), "--seed", "13",
                 "--tokenization", "bpe", "--bpe-merges", "40",
                 *SMALL, *FAST_EXPERT, *FAST_QE])
    assert code == 0
    tags = read_tag_file(out / "pred" / "pred.tags")
    words = read_token_file(out / "test.mt")
    # word-level outputs: tag counts equal word counts, not subword counts
    assert [len(t) for t in tags] == [len(w) for w in words]
    gaps = read_tag_file(out / "pred" / "pred.gap_tags")
    assert [len(g) for g in gaps] == [len(w) + 1 for w in words]
