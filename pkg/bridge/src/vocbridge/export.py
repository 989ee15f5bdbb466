"""Bulk embedding export in the engine's UVIEMB1 binary format.

Reads the engine's atom TSV formats (knowledge base: 9 columns with the
string in column 3; insertion set: 8 or 9 columns with the string in
column 2), encodes every atom string, and writes one record per atom.
Output is a pure function of (input file, checkpoint, config), so repeated
exports are byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"UVIEMB1\x00"

_FORMATS = {
    "kb": {"columns": (9,), "string_index": 2},
    "insertion": {"columns": (8, 9), "string_index": 1},
}


class ExportError(ValueError):
    pass


def read_atom_strings(path: str | Path, file_format: str = "kb") -> list[tuple[str, str]]:
    """(atom_id, string) pairs in file order; duplicate ids are an error."""
    if file_format not in _FORMATS:
        raise ExportError(f"unknown format {file_format!r}; expected kb or insertion")
    spec = _FORMATS[file_format]
    pairs: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) not in spec["columns"]:
                expected = " or ".join(str(c) for c in spec["columns"])
                raise ExportError(
                    f"{path}: line {lineno}: expected {expected} columns, "
                    f"got {len(fields)}"
                )
            atom_id, string = fields[0], fields[spec["string_index"]]
            if atom_id in seen:
                raise ExportError(f"{path}: line {lineno}: duplicate atom_id {atom_id!r}")
            if not string:
                raise ExportError(f"{path}: line {lineno}: empty string for {atom_id!r}")
            seen.add(atom_id)
            pairs.append((atom_id, string))
    return pairs


def write_embedding_file(path: str | Path, ids: list[str], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ExportError("embedding matrix shape does not match id list")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", len(ids), matrix.shape[1]))
        for atom_id, row in zip(ids, matrix):
            encoded = atom_id.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ExportError(f"atom id too long: {atom_id[:40]!r}...")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(row.astype("<f4").tobytes())


def export_embeddings(
    atom_tsv: str | Path,
    out_path: str | Path,
    encoder,
    file_format: str = "kb",
    batch_size: int = 256,
) -> dict:
    """Encode every atom in the TSV and write the binary file.

    Returns a small summary (count, dim).  Vectors are written as produced
    by the encoder; the engine unit-normalizes at load, so the only hard
    requirement is that no vector is zero (the encoders guarantee it).
    """
    return export_many([(atom_tsv, file_format)], out_path, encoder, batch_size)


def export_many(
    inputs: list[tuple[str | Path, str]],
    out_path: str | Path,
    encoder,
    batch_size: int = 256,
) -> dict:
    """Encode several atom TSVs into one embedding file.

    The engine loads a single store covering KB plus query atoms, so a
    typical export names the KB file and each insertion batch.  Atom ids
    must stay unique across all inputs.
    """
    pairs: list[tuple[str, str]] = []
    seen: set[str] = set()
    for path, file_format in inputs:
        for atom_id, string in read_atom_strings(path, file_format):
            if atom_id in seen:
                raise ExportError(f"duplicate atom_id {atom_id!r} across inputs")
            seen.add(atom_id)
            pairs.append((atom_id, string))
    ids = [atom_id for atom_id, _ in pairs]
    strings = [string for _, string in pairs]
    rows = []
    for start in range(0, len(strings), batch_size):
        rows.append(encoder.encode(strings[start : start + batch_size]))
    if rows:
        matrix = np.concatenate(rows)
    else:
        matrix = np.zeros((0, encoder.dim), dtype=np.float32)
    write_embedding_file(out_path, ids, matrix)
    return {"count": len(ids), "dim": int(matrix.shape[1]) if len(ids) else encoder.dim}
