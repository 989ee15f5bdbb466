"""Bridge acceptance: fuzzed protocol conformance, export round-trip through
the engine loader, and record/replay equivalence end-to-end."""

from __future__ import annotations

import json
import math
import random
import shlex
import subprocess
import sys

import numpy as np
import pytest

from vocbridge.config import BridgeConfig
from vocbridge.encoders import HashNgramEncoder
from vocbridge.export import export_many
from vocbridge.server import PairScorer

from vocinsert.cli import main as engine_main
from vocinsert.vectors import load_embeddings


def _report(name: str) -> None:
    print(f"[acceptance] {name}: PASS")


def _random_text(rng: random.Random) -> str:
    pools = (
        "abcdefghijklmnopqrstuvwxyz 0123456789",
        "abc \t-_/(),'",
        "éüßαβ中文 ok",
    )
    pool = rng.choice(pools)
    return "".join(rng.choice(pool) for _ in range(rng.randint(0, 60)))


def test_s01_fuzzed_requests_arity_and_finiteness():
    """1,000 fuzzed well-formed requests: matching arity, finite logits."""
    scorer = PairScorer(BridgeConfig(checkpoint="hash:dim=32"))
    rng = random.Random(13)
    for i in range(1000):
        candidates = [_random_text(rng) for _ in range(rng.randint(1, 8))]
        if rng.random() < 0.5:
            candidates[-1] = "NULL"
        request = {"id": f"q{i}", "query": _random_text(rng), "candidates": candidates}
        response = scorer.handle_line(json.dumps(request, ensure_ascii=False))
        assert response.get("error") is None, response
        assert response["id"] == f"q{i}"
        assert len(response["logits"]) == len(candidates)
        assert all(math.isfinite(v) for v in response["logits"])
    _report("fuzzed protocol conformance (1,000 requests)")


def test_s02_fuzzed_requests_over_stdio_transport():
    """A slice of the fuzz through the real subprocess transport, responses
    ordered by request."""
    proc = subprocess.Popen(
        [sys.executable, "-m", "vocbridge", "serve", "--transport", "stdio",
         "--checkpoint", "hash:dim=16"],
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        text=True,
        encoding="utf-8",
    )
    rng = random.Random(29)
    try:
        for i in range(100):
            candidates = [_random_text(rng) for _ in range(rng.randint(1, 5))] + ["NULL"]
            request = {"id": f"s{i}", "query": _random_text(rng), "candidates": candidates}
            proc.stdin.write(json.dumps(request, ensure_ascii=False) + "\n")
            proc.stdin.flush()
            response = json.loads(proc.stdout.readline())
            assert response["id"] == f"s{i}"
            assert len(response["logits"]) == len(candidates)
            assert all(math.isfinite(v) for v in response["logits"])
    finally:
        proc.stdin.close()
        proc.wait(timeout=10)
    _report("stdio transport conformance (100 requests)")


def test_s03_export_round_trips_through_engine_loader(corpus_dir, tmp_path):
    """Exported vectors load through the engine with its unit-norm check."""
    out = tmp_path / "emb.bin"
    encoder = HashNgramEncoder(dim=40)
    summary = export_many(
        [(corpus_dir["kb"], "kb"), (corpus_dir["insertion"], "insertion")],
        out,
        encoder,
    )
    assert summary["count"] == 20
    store = load_embeddings(out)  # enforces unit norms after normalization
    assert len(store) == 20
    assert store.dim == 40
    assert "A01" in store and "Q08" in store
    norms = np.linalg.norm(store.matrix, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    again = tmp_path / "emb2.bin"
    export_many(
        [(corpus_dir["kb"], "kb"), (corpus_dir["insertion"], "insertion")],
        again,
        encoder,
    )
    assert out.read_bytes() == again.read_bytes()
    _report("export round-trip through engine loader")


def test_s04_record_replay_equivalence_end_to_end(corpus_dir, tmp_path):
    """Engine over the live bridge equals engine over the recorded file."""
    emb = tmp_path / "emb.bin"
    export_many(
        [(corpus_dir["kb"], "kb"), (corpus_dir["insertion"], "insertion")],
        emb,
        HashNgramEncoder(dim=64),
    )

    record = tmp_path / "recorded.jsonl"
    serve_cmd = " ".join(
        shlex.quote(part)
        for part in (
            sys.executable, "-m", "vocbridge", "serve",
            "--transport", "stdio", "--checkpoint", "hash:dim=64",
            "--record", str(record),
        )
    )
    live_dir = tmp_path / "live"
    code = engine_main(
        [
            "predict",
            "--kb", str(corpus_dir["kb"]),
            "--insertion", str(corpus_dir["insertion"]),
            "--method", "rerank",
            "--embeddings", str(emb),
            "--scorer", serve_cmd,
            "--k", "5",
            "--out-dir", str(live_dir),
        ]
    )
    assert code == 0
    assert record.exists()

    replay_dir = tmp_path / "replay"
    code = engine_main(
        [
            "predict",
            "--kb", str(corpus_dir["kb"]),
            "--insertion", str(corpus_dir["insertion"]),
            "--method", "rerank",
            "--embeddings", str(emb),
            "--scorer", f"replay:{record}",
            "--k", "5",
            "--out-dir", str(replay_dir),
        ]
    )
    assert code == 0
    assert (live_dir / "predictions.tsv").read_bytes() == (
        replay_dir / "predictions.tsv"
    ).read_bytes()

    # the bridge catches the easy links on this tiny corpus
    metrics = json.loads((live_dir / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["accuracy"] >= 0.5
    _report("record/replay equivalence end-to-end")
