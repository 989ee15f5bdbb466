from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from corpus import build_kb, sample_queries  # noqa: E402

from vocinsert.vectors import save_embeddings  # noqa: E402


@pytest.fixture(scope="session")
def small_corpus():
    """Shared 600-atom corpus with one 120-query batch."""
    corpus = build_kb(seed=11, n_concepts=200, n_atoms=600)
    queries, routes = sample_queries(corpus, seed=12, n_queries=120, prefix="Q")
    return corpus, queries, routes


@pytest.fixture()
def corpus_files(tmp_path, small_corpus):
    """The shared corpus serialized to TSV/binary files."""
    from vocinsert.kb import save_insertion_set, save_kb

    corpus, queries, routes = small_corpus
    kb_path = tmp_path / "kb.tsv"
    ins_path = tmp_path / "insert.tsv"
    emb_path = tmp_path / "emb.bin"
    save_kb(corpus.kb, kb_path)
    save_insertion_set(queries, ins_path)
    ids, matrix = corpus.embedding_items()
    save_embeddings(emb_path, ids, matrix)
    return {
        "kb": kb_path,
        "insertion": ins_path,
        "embeddings": emb_path,
        "corpus": corpus,
        "queries": queries,
        "routes": routes,
        "dir": tmp_path,
    }
