from __future__ import annotations

import json
from pathlib import Path

import pytest

from corpus import build_kb, expected_rule_accuracy, sample_queries

from vocinsert.cli import main
from vocinsert.kb import save_insertion_set, save_kb
from vocinsert.pipeline import read_predictions
from vocinsert.vectors import save_embeddings


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    """A corpus with eval/train/val batches serialized for CLI runs."""
    root = tmp_path_factory.mktemp("cli_env")
    corpus = build_kb(seed=41, n_concepts=150, n_atoms=450)
    eval_q, eval_routes = sample_queries(corpus, seed=42, n_queries=100, prefix="Q")
    train_q, _ = sample_queries(corpus, seed=43, n_queries=240, prefix="T")
    val_q, _ = sample_queries(corpus, seed=44, n_queries=60, prefix="V")

    paths = {
        "kb": root / "kb.tsv",
        "eval": root / "eval.tsv",
        "train": root / "train.tsv",
        "val": root / "val.tsv",
        "emb": root / "emb.bin",
        "root": root,
    }
    save_kb(corpus.kb, paths["kb"])
    save_insertion_set(eval_q, paths["eval"])
    save_insertion_set(train_q, paths["train"])
    save_insertion_set(val_q, paths["val"])
    ids, matrix = corpus.embedding_items()
    save_embeddings(paths["emb"], ids, matrix)
    paths["corpus"] = corpus
    paths["eval_routes"] = eval_routes
    paths["eval_queries"] = eval_q
    return paths


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


def test_ingest_stats(env, capsys):
    assert run_cli("ingest", "--kb", env["kb"], "--insertion", env["eval"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["kb_atoms"] == 450
    assert stats["insertion_size"] == 100
    assert sum(stats["semantic_groups"].values()) == 100


def test_split_writes_subsets(env, tmp_path, capsys):
    code = run_cli(
        "split",
        "--insertion", env["eval"],
        "--ratios", "train=0.5,dev=0.25,test=0.25",
        "--seed", 3,
        "--out-dir", tmp_path,
    )
    assert code == 0
    sizes = {}
    for line in capsys.readouterr().out.strip().splitlines():
        name, count, path = line.split("\t")
        sizes[name] = int(count)
        assert Path(path).exists()
    assert sum(sizes.values()) == 100


def test_closure_dump(env, tmp_path, capsys):
    out = tmp_path / "closure.tsv"
    assert run_cli("closure", "--kb", env["kb"], "--insertion", env["eval"], "--out", out) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["atoms"] == 550
    assert out.read_text().count("\n") == 550


def test_index_report(env, capsys):
    code = run_cli(
        "index", "--kb", env["kb"], "--insertion", env["eval"], "--embeddings", env["emb"]
    )
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["kb_missing"] == []
    assert report["query_missing"] == []
    assert report["dim"] == 64


def test_rba_run_and_accuracy(env, tmp_path, capsys):
    out_dir = tmp_path / "run_rba"
    code = run_cli(
        "predict",
        "--kb", env["kb"],
        "--insertion", env["eval"],
        "--method", "rba",
        "--out-dir", out_dir,
    )
    assert code == 0
    preds = read_predictions(out_dir / "predictions.tsv")
    assert len(preds) == 100
    metrics = json.loads((out_dir / "metrics.json").read_text())
    # the generator pins rule-based accuracy exactly
    assert metrics["accuracy"] == pytest.approx(
        expected_rule_accuracy(env["eval_routes"])
    )


def test_tune_threshold_and_biencoder(env, tmp_path, capsys):
    theta_path = tmp_path / "theta.json"
    code = run_cli(
        "tune-threshold",
        "--kb", env["kb"],
        "--train", env["train"],
        "--embeddings", env["emb"],
        "--out", theta_path,
    )
    assert code == 0
    theta = json.loads(theta_path.read_text())
    assert -1.0 <= theta["theta"] <= 1.0

    out_dir = tmp_path / "run_bi"
    code = run_cli(
        "predict",
        "--kb", env["kb"],
        "--insertion", env["eval"],
        "--method", "biencoder",
        "--embeddings", env["emb"],
        "--theta-file", theta_path,
        "--out-dir", out_dir,
    )
    assert code == 0
    assert len(read_predictions(out_dir / "predictions.tsv")) == 100


def test_rba_rank_run(env, tmp_path):
    out_dir = tmp_path / "run_rank"
    code = run_cli(
        "predict",
        "--kb", env["kb"],
        "--insertion", env["eval"],
        "--method", "rba+rank",
        "--embeddings", env["emb"],
        "--out-dir", out_dir,
    )
    assert code == 0
    metrics = json.loads((out_dir / "metrics.json").read_text())
    # same NEW decisions as plain rules, so same new-concept recall
    assert metrics["counts"]["tp_nc"] + metrics["counts"]["fn_nc"] > 0


@pytest.fixture(scope="module")
def trained_weights(env, tmp_path_factory):
    out = tmp_path_factory.mktemp("weights") / "weights.json"
    code = run_cli(
        "train-scorer",
        "--kb", env["kb"],
        "--train", env["train"],
        "--val", env["val"],
        "--embeddings", env["emb"],
        "--epochs", 40,
        "--lr", 0.5,
        "--batch-size", 4,
        "--out", out,
    )
    assert code == 0
    return out


def test_rerank_run_beats_rba(env, trained_weights, tmp_path):
    out_dir = tmp_path / "run_rr"
    code = run_cli(
        "predict",
        "--kb", env["kb"],
        "--insertion", env["eval"],
        "--method", "rerank",
        "--embeddings", env["emb"],
        "--weights", trained_weights,
        "--out-dir", out_dir,
        "--dump-candidates", tmp_path / "cands.jsonl",
    )
    assert code == 0
    metrics = json.loads((out_dir / "metrics.json").read_text())
    assert metrics["accuracy"] > expected_rule_accuracy(env["eval_routes"])
    assert (tmp_path / "cands.jsonl").exists()


def test_manifest_rerun_byte_identical(env, trained_weights, tmp_path):
    for method, extra in (
        ("rba", []),
        ("biencoder", ["--embeddings", env["emb"], "--theta", "0.62"]),
        ("rba+rank", ["--embeddings", env["emb"]]),
        ("rerank", ["--embeddings", env["emb"], "--weights", trained_weights]),
    ):
        first = tmp_path / f"{method.replace('+', '_')}_a"
        assert run_cli(
            "predict", "--kb", env["kb"], "--insertion", env["eval"],
            "--method", method, "--out-dir", first, *extra,
        ) == 0
        second = tmp_path / f"{method.replace('+', '_')}_b"
        manifest = json.loads((first / "manifest.json").read_text())
        manifest["config"]["output_dir"] = str(second)
        patched = first / "manifest_rerun.json"
        patched.write_text(json.dumps(manifest))
        assert run_cli("predict", "--manifest", patched) == 0
        assert (first / "predictions.tsv").read_bytes() == (
            second / "predictions.tsv"
        ).read_bytes()


def test_evaluate_and_report(env, tmp_path, capsys):
    run_dir = tmp_path / "run"
    run_cli(
        "predict", "--kb", env["kb"], "--insertion", env["eval"],
        "--method", "rba", "--out-dir", run_dir,
    )
    capsys.readouterr()
    code = run_cli(
        "evaluate",
        "--predictions", run_dir / "predictions.tsv",
        "--insertion", env["eval"],
        "--out-dir", tmp_path / "eval_out",
    )
    assert code == 0
    text = capsys.readouterr().out
    assert "accuracy" in text
    assert (tmp_path / "eval_out" / "calibration.json").exists()

    code = run_cli("report", "--metrics", tmp_path / "eval_out" / "metrics.json")
    assert code == 0
    assert "accuracy" in capsys.readouterr().out


def test_compare_runs(env, trained_weights, tmp_path, capsys):
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    run_cli(
        "predict", "--kb", env["kb"], "--insertion", env["eval"],
        "--method", "rba", "--out-dir", a_dir,
    )
    run_cli(
        "predict", "--kb", env["kb"], "--insertion", env["eval"],
        "--method", "rerank", "--embeddings", env["emb"],
        "--weights", trained_weights, "--out-dir", b_dir,
    )
    capsys.readouterr()
    code = run_cli(
        "compare",
        "--a", a_dir / "predictions.tsv",
        "--b", b_dir / "predictions.tsv",
        "--insertion", env["eval"],
    )
    assert code == 0
    counts = json.loads(capsys.readouterr().out)
    total = counts["total_corrections"]
    assert total == (
        counts["concept_linking"]
        + counts["re_ranking"]
        + counts["new_concept_identification"]
    )
    # the re-ranker's wins over plain rules are concept-linking corrections
    assert counts["concept_linking"] > 0


def test_bench_projection(env, trained_weights, capsys):
    code = run_cli(
        "bench",
        "--kb", env["kb"],
        "--insertion", env["eval"],
        "--methods", "rba,rerank",
        "--sample", 10,
        "--embeddings", env["emb"],
        "--weights", trained_weights,
    )
    assert code == 0
    results = json.loads(capsys.readouterr().out)
    for method in ("rba", "rerank"):
        assert results[method]["sample_size"] == 10
        assert results[method]["projected_minutes"] == pytest.approx(
            results[method]["ms_per_atom"] * 5.0
        )


def test_config_file_with_flag_override(env, tmp_path):
    config = tmp_path / "run.cfg"
    config.write_text(
        f"kb_path={env['kb']}\n"
        f"insertion_path={env['eval']}\n"
        "method=rba\n"
        "# a comment\n"
        "seed=7\n"
        f"output_dir={tmp_path / 'cfg_out'}\n",
        encoding="utf-8",
    )
    assert run_cli("predict", "--config", config) == 0
    assert (tmp_path / "cfg_out" / "predictions.tsv").exists()
    manifest = json.loads((tmp_path / "cfg_out" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 7

    override_dir = tmp_path / "cfg_out2"
    assert run_cli("predict", "--config", config, "--seed", 9, "--out-dir", override_dir) == 0
    manifest = json.loads((override_dir / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 9


def test_exit_codes(env, tmp_path, capsys):
    # rerank without weights or scorer endpoint: config error
    code = run_cli(
        "predict", "--kb", env["kb"], "--insertion", env["eval"],
        "--method", "rerank", "--embeddings", env["emb"],
        "--out-dir", tmp_path / "x",
    )
    assert code == 2
    # missing input file: data error
    code = run_cli(
        "predict", "--kb", tmp_path / "nope.tsv", "--insertion", env["eval"],
        "--method", "rba", "--out-dir", tmp_path / "y",
    )
    assert code == 3
    # no partial outputs were left behind
    assert not (tmp_path / "y" / "predictions.tsv").exists()
    capsys.readouterr()


def test_failed_run_leaves_no_partial_outputs(env, tmp_path, capsys):
    out_dir = tmp_path / "broken"
    code = run_cli(
        "predict", "--kb", env["kb"], "--insertion", env["eval"],
        "--method", "rerank", "--embeddings", env["emb"],
        "--scorer", "replay:" + str(tmp_path / "missing.jsonl"),
        "--out-dir", out_dir,
    )
    assert code != 0
    assert not list(out_dir.glob("*.tsv"))
    capsys.readouterr()
