"""Command-line interface: config plumbing and the pipeline end to end."""

import json
from argparse import Namespace
from pathlib import Path

import pytest

from selfretro import cli
from selfretro import corpus as corpus_mod
from selfretro import supervision as sup_mod
from selfretro.cli import (
    RunConfig,
    apply_config_value,
    build_config,
    load_config_file,
    main,
    resolve_run_dir,
)


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------


def test_apply_config_value_coerces_strings():
    cfg = RunConfig()
    apply_config_value(cfg, "steps", "17")
    apply_config_value(cfg, "lr_max", "1e-4")
    apply_config_value(cfg, "mode", "txl")
    for raw, want in (("true", True), ("1", True), ("Yes", True), ("off", False), ("0", False)):
        apply_config_value(cfg, "query_augment", raw)
        assert cfg.query_augment is want
    assert (cfg.steps, cfg.lr_max, cfg.mode) == (17, 1e-4, "txl")
    # already-typed values (from a JSON config) pass straight through
    apply_config_value(cfg, "steps", 5)
    assert cfg.steps == 5


def test_apply_config_value_rejects_bad_input():
    cfg = RunConfig()
    with pytest.raises(ValueError, match="unknown config key: 'stepz'"):
        apply_config_value(cfg, "stepz", "5")
    with pytest.raises(ValueError, match="not a boolean"):
        apply_config_value(cfg, "query_augment", "maybe")


def test_load_config_file_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"mode": "retro", "steps": 9, "dropout": 0.0}))
    cfg = RunConfig()
    load_config_file(cfg, path)
    assert (cfg.mode, cfg.steps, cfg.dropout) == ("retro", 9, 0.0)

    # anything not shaped like a JSON object is read as key = value lines
    path.write_text(json.dumps([1, 2]))
    with pytest.raises(ValueError, match="expected 'key = value'"):
        load_config_file(RunConfig(), path)


def test_load_config_file_lines(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# a comment\n\nsteps = 12\nmode = txl  # trailing comment\n")
    cfg = RunConfig()
    load_config_file(cfg, path)
    assert (cfg.steps, cfg.mode) == (12, "txl")

    path.write_text("steps = 3\nnonsense line\n")
    with pytest.raises(ValueError, match=r"2: expected 'key = value'"):
        load_config_file(RunConfig(), path)


def test_build_config_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"steps": 5, "gating": "off"}))
    args = Namespace(config=str(path), set=["steps=7"], mode=None, steps=None, seed=None, flavor=None)
    assert build_config(args).steps == 7  # --set beats the file
    args.steps = 9
    cfg = build_config(args)
    assert cfg.steps == 9  # the dedicated flag beats both
    assert cfg.gating == "off"  # untouched keys survive from the file

    with pytest.raises(ValueError, match="--set expects"):
        build_config(Namespace(config=None, set=["steps"], mode=None, steps=None, seed=None, flavor=None))


def test_resolve_run_dir(monkeypatch):
    monkeypatch.setenv(cli.RUNS_ENV, "/srv/exp")
    assert resolve_run_dir("alpha") == Path("/srv/exp/alpha")
    assert resolve_run_dir("a/b") == Path("a/b")  # explicit paths untouched
    assert resolve_run_dir("/abs/x") == Path("/abs/x")
    monkeypatch.delenv(cli.RUNS_ENV)
    assert resolve_run_dir("alpha") == Path("runs/alpha")


def test_make_provider_specs():
    cfg = RunConfig()
    assert isinstance(cli._make_provider("uniform", cfg), sup_mod.UniformProvider)
    with pytest.raises(ValueError, match="unknown provider"):
        cli._make_provider("magic", cfg)
    with pytest.raises(ValueError, match="REQUESTS,RESPONSES"):
        cli._make_provider("responses:only_one_path", cfg)


# ---------------------------------------------------------------------------
# the pipeline, driven through main()
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pipe(tmp_path_factory):
    """Run the whole pipeline once on a tiny corpus; tests inspect the files."""
    root = tmp_path_factory.mktemp("pipe")
    data = root / "data"
    assert main([
        "make-synthetic", "--out", str(data), "--train-docs", "3", "--test-docs", "2",
        "--chunks-per-doc", "24", "--facts", "2", "--min-gap", "6", "--seed", "1",
    ]) == 0

    train_dir, test_dir = str(data / "train"), str(data / "test")
    manifest = root / "manifest.json"
    assert main(["ingest", "--corpus", train_dir, "--out", str(manifest)]) == 0

    txl_run = root / "runs" / "txl0"
    assert main([
        "train", "--corpus", train_dir, "--run-dir", str(txl_run),
        "--mode", "txl", "--steps", "4", "--set", "dropout=0.0",
    ]) == 0
    txl_ckpt = str(txl_run / "checkpoint.bin")

    rec_train = root / "records_train.jsonl"
    rec_test = root / "records_test.jsonl"
    for corpus, out in ((train_dir, rec_train), (test_dir, rec_test)):
        assert main([
            "build-supervision", "--corpus", corpus, "--out", str(out),
            "--provider", f"checkpoint:{txl_ckpt}", "--set", "n_cand=6",
        ]) == 0

    rpt_run = root / "runs" / "rpt0"
    assert main([
        "train", "--corpus", train_dir, "--run-dir", str(rpt_run),
        "--mode", "rpt", "--records", str(rec_train),
        "--steps", "4", "--set", "dropout=0.0",
    ]) == 0
    rpt_ckpt = str(rpt_run / "checkpoint.bin")

    report = root / "report.json"
    assert main([
        "eval", "--checkpoint", rpt_ckpt, "--corpus", test_dir,
        "--records", str(rec_test), "--oracle", "--out", str(report),
    ]) == 0

    adir = root / "analysis"
    assert main([
        "analyze", "--checkpoint", rpt_ckpt, "--baseline", txl_ckpt,
        "--corpus", test_dir, "--records", str(rec_test), "--out-dir", str(adir),
    ]) == 0

    return {
        "root": root, "data": data, "train_dir": train_dir, "test_dir": test_dir,
        "manifest": manifest, "txl_run": txl_run, "txl_ckpt": txl_ckpt,
        "rpt_run": rpt_run, "rpt_ckpt": rpt_ckpt,
        "rec_train": rec_train, "rec_test": rec_test,
        "report": report, "adir": adir,
    }


def test_pipeline_files_exist(pipe):
    meta, rows = corpus_mod.read_manifest(pipe["manifest"])
    assert len(rows) == 3 and meta["tokenizer"] == "bytes"
    for run in (pipe["txl_run"], pipe["rpt_run"]):
        for name in ("config.json", "metrics.jsonl", "checkpoint.bin"):
            assert (run / name).exists()
    for name in ("improvement.csv", "subgroup.csv", "overlap.csv", "max_target_at_k.csv", "analysis.json"):
        assert (pipe["adir"] / name).exists()


def test_metrics_stream_contents(pipe):
    rows = [json.loads(l) for l in (pipe["rpt_run"] / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1, 2, 3]
    for row in rows:
        assert set(row) == {"step", "lm_loss", "ret_loss", "p_ss", "alpha_ret", "tau", "lr"}
        assert row["lm_loss"] > 0
    # the learned-retrieval run actually trains its retriever
    assert any(r["ret_loss"] > 0 for r in rows)


def test_frozen_config_blocks_divergent_resume(pipe):
    with pytest.raises(SystemExit, match="steps"):
        main([
            "train", "--corpus", pipe["train_dir"], "--run-dir", str(pipe["txl_run"]),
            "--mode", "txl", "--steps", "9", "--set", "dropout=0.0",
        ])


def test_completed_run_is_a_noop(pipe):
    ckpt = Path(pipe["txl_ckpt"])
    before = ckpt.read_bytes()
    assert main([
        "train", "--corpus", pipe["train_dir"], "--run-dir", str(pipe["txl_run"]),
        "--mode", "txl", "--steps", "4", "--set", "dropout=0.0",
    ]) == 0
    assert ckpt.read_bytes() == before


def test_rpt_training_requires_records(pipe, tmp_path):
    with pytest.raises(SystemExit, match="requires --records"):
        main([
            "train", "--corpus", pipe["train_dir"], "--run-dir", str(tmp_path / "r"),
            "--mode", "rpt", "--steps", "1",
        ])


def test_eval_oracle_requires_records(pipe, tmp_path):
    with pytest.raises(SystemExit, match="requires --records"):
        main([
            "eval", "--checkpoint", pipe["rpt_ckpt"], "--corpus", pipe["test_dir"],
            "--oracle", "--out", str(tmp_path / "r.json"),
        ])


def test_eval_report_contents(pipe):
    data = json.loads(pipe["report"].read_text())
    assert data["mode"] == "rpt" and data["source"] == "self"
    assert data["ppl"] > 0 and data["oracle_ppl"] > 0
    assert data["retrieval"]["n_records"] > 0
    assert data["bm25_retrieval"]["n_records"] == data["retrieval"]["n_records"]
    assert "p@2" in data["retrieval"]["metrics"]


def test_eval_mode_override_drops_retrieval(pipe, tmp_path):
    out = tmp_path / "txl_view.json"
    assert main([
        "eval", "--checkpoint", pipe["rpt_ckpt"], "--corpus", pipe["test_dir"],
        "--mode", "txl", "--out", str(out),
    ]) == 0
    data = json.loads(out.read_text())
    assert data["mode"] == "txl" and data["source"] == "none"
    assert data["retrieval"] is None and data["bm25_retrieval"] is None


def test_analysis_summary_shape(pipe):
    data = json.loads((pipe["adir"] / "analysis.json").read_text())
    assert set(data) == {"improvement", "subgroups", "max_target_at_k", "n_records"}
    assert set(data["improvement"]) == {"mean", "median", "skew", "frac_improved"}
    assert data["n_records"] > 0
    assert "1" in data["max_target_at_k"]


def test_interrupted_run_matches_single_shot(pipe):
    root = pipe["root"]
    split_run, whole_run = root / "runs" / "split", root / "runs" / "whole"
    base = [
        "train", "--corpus", pipe["train_dir"], "--mode", "txl",
        "--steps", "4", "--set", "dropout=0.0",
    ]
    assert main(base + ["--run-dir", str(split_run), "--limit-steps", "2"]) == 0
    assert main(base + ["--run-dir", str(split_run)]) == 0  # resumes at step 2
    assert main(base + ["--run-dir", str(whole_run)]) == 0
    assert (split_run / "checkpoint.bin").read_bytes() == (whole_run / "checkpoint.bin").read_bytes()
    split_rows = (split_run / "metrics.jsonl").read_text().splitlines()
    whole_rows = (whole_run / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(r) for r in split_rows] == [json.loads(r) for r in whole_rows]


def test_external_scoring_protocol_matches_direct(pipe, tmp_path):
    req, resp = tmp_path / "req.jsonl", tmp_path / "resp.jsonl"
    rec_indirect = tmp_path / "records_indirect.jsonl"
    assert main([
        "build-supervision", "--corpus", pipe["train_dir"],
        "--emit-requests", str(req), "--set", "n_cand=6",
    ]) == 0
    assert req.exists() and req.read_text().strip()
    assert main([
        "score", "--provider", f"checkpoint:{pipe['txl_ckpt']}",
        "--requests", str(req), "--responses", str(resp),
    ]) == 0
    assert main([
        "build-supervision", "--corpus", pipe["train_dir"], "--out", str(rec_indirect),
        "--provider", f"responses:{req},{resp}", "--set", "n_cand=6",
    ]) == 0
    _, direct = sup_mod.read_records(pipe["rec_train"])
    _, indirect = sup_mod.read_records(rec_indirect)
    assert direct == indirect


def test_lex_flavor_needs_no_provider(pipe, tmp_path):
    out = tmp_path / "records_lex.jsonl"
    assert main([
        "build-supervision", "--corpus", pipe["train_dir"], "--out", str(out),
        "--flavor", "lex", "--set", "n_cand=6",
    ]) == 0
    meta, records = sup_mod.read_records(out)
    assert meta["flavor"] == "lex" and meta["provider"] == "none"
    assert records
    for rec in records:
        assert rec.positives == rec.candidates[: len(rec.positives)]
        assert len(rec.positives) == len(rec.candidates) // 2
