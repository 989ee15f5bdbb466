from __future__ import annotations

import pytest

KB_ROWS = [
    # atom_id, concept_id, string, source, scid, group, lang, active, suppr
    ("A01", "C1", "myocardial infarction", "SRC0", "S1", "Disorders"),
    ("A02", "C1", "heart attack", "SRC0", "S1", "Disorders"),
    ("A03", "C1", "Infarction, Myocardial", "SRC1", "T1", "Disorders"),
    ("A04", "C2", "aortic stenosis", "SRC0", "S2", "Disorders"),
    ("A05", "C2", "stenosis of aorta", "SRC1", "T2", "Disorders"),
    ("A06", "C3", "renal failure", "SRC0", "S3", "Disorders"),
    ("A07", "C3", "kidney failure", "SRC1", "T3", "Disorders"),
    ("A08", "C4", "aspirin 81 MG Oral Tablet", "SRC2", "U4", "Chemicals"),
    ("A09", "C4", "aspirin 81mg tab", "SRC2", "U4", "Chemicals"),
    ("A10", "C5", "left ovary", "SRC0", "S5", "Anatomy"),
    ("A11", "C5", "ovary, left", "SRC0", "S5", "Anatomy"),
    ("A12", "C6", "blood glucose measurement", "SRC0", "S6", "Procedures"),
]

QUERY_ROWS = [
    # atom_id, string, source, scid, group, gold
    ("Q01", "HEART ATTACK", "SRC3", "", "Disorders", "C1"),          # rule 2
    ("Q02", "myocardial infarction NOS", "SRC0", "S1", "Disorders", "C1"),  # rule 1
    ("Q03", "aspirin 81 MG tablet", "SRC3", "", "Chemicals", "C4"),  # lexical only
    ("Q04", "stenosis aortic", "SRC3", "", "Disorders", "C2"),       # rule 2
    ("Q05", "kidney failure, acute", "SRC3", "", "Disorders", "NEW"),
    ("Q06", "zebrafish embryo", "SRC3", "", "Living Beings", "NEW"),
    ("Q07", "right ovary", "SRC3", "", "Anatomy", "NEW"),
    ("Q08", "glucose measurement, blood", "SRC3", "", "Procedures", "C6"),  # rule 2
]


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("bridge_corpus")
    kb_path = root / "kb.tsv"
    with open(kb_path, "w", encoding="utf-8", newline="") as fh:
        for atom_id, cid, string, src, scid, group in KB_ROWS:
            fh.write(f"{atom_id}\t{cid}\t{string}\t{src}\t{scid}\t{group}\tENG\t1\t0\n")
    ins_path = root / "insert.tsv"
    with open(ins_path, "w", encoding="utf-8", newline="") as fh:
        for atom_id, string, src, scid, group, gold in QUERY_ROWS:
            fh.write(f"{atom_id}\t{string}\t{src}\t{scid}\t{group}\tENG\t1\t0\t{gold}\n")
    return {"root": root, "kb": kb_path, "insertion": ins_path}
