"""Data model and TSV ingestion for the knowledge base and insertion sets.

A knowledge base is a flat file of atoms (source-specific term strings)
grouped into concepts by their ``concept_id`` column.  An insertion set is a
batch of new atoms to be linked against the knowledge base; each may carry a
gold label (an existing concept id or the literal ``NEW``).

File formats (tab-separated, UTF-8, no header row; tabs and newlines are
forbidden inside fields):

* KB TSV, 9 columns::

    atom_id  concept_id  string  source  source_concept_id  semantic_group
    language  active(0/1)  suppressible(0/1)

  ``source_concept_id`` may be empty.

* Insertion TSV: the same columns minus ``concept_id``, plus a trailing
  ``gold`` column (a concept id or the literal ``NEW``).  The gold column may
  be absent, or present but empty, in prediction-only mode.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError

logger = logging.getLogger(__name__)

#: Distinguished gold / prediction value for atoms that belong to no
#: existing concept.
NEW = "NEW"

KB_COLUMNS = (
    "atom_id",
    "concept_id",
    "string",
    "source",
    "source_concept_id",
    "semantic_group",
    "language",
    "active",
    "suppressible",
)

INSERTION_COLUMNS = tuple(c for c in KB_COLUMNS if c != "concept_id") + ("gold",)


@dataclass(frozen=True)
class Atom:
    """One source-specific term string inside the knowledge base."""

    atom_id: str
    concept_id: str
    string: str
    source: str
    source_concept_id: str  # empty when the source asserts no grouping
    semantic_group: str
    language: str
    active: bool
    suppressible: bool


@dataclass(frozen=True)
class QueryAtom:
    """A new atom awaiting insertion; ``gold`` is its label when known."""

    atom_id: str
    string: str
    source: str
    source_concept_id: str
    semantic_group: str
    language: str
    active: bool
    suppressible: bool
    gold: str | None = None  # concept_id, NEW, or None in prediction-only mode

    @property
    def is_new(self) -> bool:
        return self.gold == NEW


@dataclass(frozen=True)
class Concept:
    """An equivalence class of atoms sharing one concept id."""

    concept_id: str
    atom_ids: frozenset[str]


@dataclass
class Prediction:
    """Predicted concept (or NEW) for one query atom.

    ``rank_trace`` lists candidate concept ids with their scores in the
    order the predictor ranked them; the predicted concept appears in the
    trace unless the prediction is NEW.
    """

    query_atom_id: str
    predicted: str
    confidence: float
    rank_trace: list[tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(
                f"confidence {self.confidence!r} outside [0, 1] "
                f"for query {self.query_atom_id!r}"
            )


@dataclass(frozen=True)
class KbFilter:
    """Row eligibility flags applied while loading a knowledge base.

    Defaults keep only English atoms from active vocabularies that are
    non-suppressible.  Use :meth:`none` to load everything (synthetic
    corpora usually skip filtering).
    """

    languages: frozenset[str] | None = frozenset({"ENG"})
    require_active: bool = True
    require_non_suppressible: bool = True

    @classmethod
    def none(cls) -> "KbFilter":
        return cls(languages=None, require_active=False, require_non_suppressible=False)

    def eligible(self, language: str, active: bool, suppressible: bool) -> bool:
        if self.languages is not None and language not in self.languages:
            return False
        if self.require_active and not active:
            return False
        if self.require_non_suppressible and suppressible:
            return False
        return True


class KnowledgeBase:
    """Immutable collection of atoms grouped into concepts.

    Safe for concurrent reads once constructed; there are no mutators.
    """

    def __init__(self, atoms: Iterable[Atom]):
        self._atoms: dict[str, Atom] = {}
        concept_members: dict[str, set[str]] = {}
        for atom in atoms:
            if atom.atom_id in self._atoms:
                raise DataError(f"duplicate atom_id {atom.atom_id!r}")
            if not atom.string:
                raise DataError(f"atom {atom.atom_id!r} has an empty string")
            self._atoms[atom.atom_id] = atom
            concept_members.setdefault(atom.concept_id, set()).add(atom.atom_id)
        self._concepts: dict[str, Concept] = {
            cid: Concept(cid, frozenset(members))
            for cid, members in concept_members.items()
        }
        # Load-time bookkeeping, filled in by load_kb.
        self.filtered_atom_count = 0
        self.dropped_concept_count = 0

    def __len__(self) -> int:
        return len(self._atoms)

    def __contains__(self, atom_id: str) -> bool:
        return atom_id in self._atoms

    def atoms(self) -> Iterator[Atom]:
        return iter(self._atoms.values())

    def atom_ids(self) -> Iterator[str]:
        return iter(self._atoms.keys())

    def atom(self, atom_id: str) -> Atom:
        try:
            return self._atoms[atom_id]
        except KeyError:
            raise DataError(f"unknown atom_id {atom_id!r}") from None

    def concept_ids(self) -> Iterator[str]:
        return iter(self._concepts.keys())

    def concept(self, concept_id: str) -> Concept:
        try:
            return self._concepts[concept_id]
        except KeyError:
            raise DataError(f"unknown concept_id {concept_id!r}") from None

    def has_concept(self, concept_id: str) -> bool:
        return concept_id in self._concepts

    def concept_of(self, atom_id: str) -> str:
        return self.atom(atom_id).concept_id

    @property
    def num_atoms(self) -> int:
        return len(self._atoms)

    @property
    def num_concepts(self) -> int:
        return len(self._concepts)


class InsertionSet:
    """Ordered batch of query atoms."""

    def __init__(self, queries: Iterable[QueryAtom]):
        self._queries = list(queries)
        seen: set[str] = set()
        for q in self._queries:
            if q.atom_id in seen:
                raise DataError(f"duplicate query atom_id {q.atom_id!r}")
            seen.add(q.atom_id)

    def __len__(self) -> int:
        return len(self._queries)

    def __iter__(self) -> Iterator[QueryAtom]:
        return iter(self._queries)

    def __getitem__(self, i):
        return self._queries[i]

    def atom_ids(self) -> list[str]:
        return [q.atom_id for q in self._queries]

    @property
    def has_gold(self) -> bool:
        return all(q.gold is not None for q in self._queries)

    def new_concept_count(self) -> int:
        return sum(1 for q in self._queries if q.is_new)


def _parse_flag(value: str, column: str, lineno: int) -> bool:
    if value == "0":
        return False
    if value == "1":
        return True
    raise DataError(f"line {lineno}: column {column!r} must be 0 or 1, got {value!r}")


def _read_rows(path: str | Path, n_columns: tuple[int, ...]):
    """Yield (lineno, fields) for every non-empty line, enforcing arity."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) not in n_columns:
                expected = " or ".join(str(n) for n in n_columns)
                raise DataError(
                    f"{path}: line {lineno}: expected {expected} columns, "
                    f"got {len(fields)}"
                )
            yield lineno, fields


def load_kb(path: str | Path, kb_filter: KbFilter | None = None) -> KnowledgeBase:
    """Load a knowledge base TSV, keeping only rows that pass the filter.

    Concepts are materialized from the ``concept_id`` column of surviving
    rows.  Duplicate atom ids and malformed rows are hard errors; concepts
    whose atoms are all filtered out are dropped with a warning count
    (exposed as ``KnowledgeBase.dropped_concept_count``).
    """
    kb_filter = kb_filter if kb_filter is not None else KbFilter()
    atoms: list[Atom] = []
    seen_ids: set[str] = set()
    all_concepts: set[str] = set()
    filtered = 0
    for lineno, f in _read_rows(path, (9,)):
        atom_id = f[0]
        if atom_id in seen_ids:
            raise DataError(f"{path}: line {lineno}: duplicate atom_id {atom_id!r}")
        seen_ids.add(atom_id)
        if not f[2]:
            raise DataError(f"{path}: line {lineno}: empty string for atom {atom_id!r}")
        active = _parse_flag(f[7], "active", lineno)
        suppressible = _parse_flag(f[8], "suppressible", lineno)
        all_concepts.add(f[1])
        if not kb_filter.eligible(f[6], active, suppressible):
            filtered += 1
            continue
        atoms.append(
            Atom(
                atom_id=atom_id,
                concept_id=f[1],
                string=f[2],
                source=f[3],
                source_concept_id=f[4],
                semantic_group=f[5],
                language=f[6],
                active=active,
                suppressible=suppressible,
            )
        )
    kb = KnowledgeBase(atoms)
    kb.filtered_atom_count = filtered
    kb.dropped_concept_count = len(all_concepts) - kb.num_concepts
    if kb.dropped_concept_count:
        logger.warning(
            "%d concept(s) dropped: no eligible atoms remain", kb.dropped_concept_count
        )
    return kb


def save_kb(kb: KnowledgeBase, path: str | Path) -> None:
    """Serialize a knowledge base back to the 9-column TSV format."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for a in kb.atoms():
            fh.write(
                "\t".join(
                    (
                        a.atom_id,
                        a.concept_id,
                        a.string,
                        a.source,
                        a.source_concept_id,
                        a.semantic_group,
                        a.language,
                        "1" if a.active else "0",
                        "1" if a.suppressible else "0",
                    )
                )
                + "\n"
            )


def load_insertion_set(
    path: str | Path, kb: KnowledgeBase | None = None
) -> InsertionSet:
    """Load an insertion TSV, optionally validating gold labels against a KB.

    Gold concept ids absent from the KB are a hard error listing the
    offending rows.  An empty file yields an empty set.
    """
    queries: list[QueryAtom] = []
    bad_gold: list[str] = []
    for lineno, f in _read_rows(path, (8, 9)):
        gold: str | None = None
        if len(f) == 9 and f[8] != "":
            gold = f[8]
        q = QueryAtom(
            atom_id=f[0],
            string=f[1],
            source=f[2],
            source_concept_id=f[3],
            semantic_group=f[4],
            language=f[5],
            active=_parse_flag(f[6], "active", lineno),
            suppressible=_parse_flag(f[7], "suppressible", lineno),
            gold=gold,
        )
        if not q.string:
            raise DataError(f"{path}: line {lineno}: empty string for atom {q.atom_id!r}")
        if kb is not None:
            if q.atom_id in kb:
                raise DataError(
                    f"{path}: line {lineno}: query atom_id {q.atom_id!r} "
                    "already exists in the knowledge base"
                )
            if gold is not None and gold != NEW and not kb.has_concept(gold):
                bad_gold.append(f"line {lineno}: atom {q.atom_id!r} gold {gold!r}")
        queries.append(q)
    if bad_gold:
        raise DataError(
            "gold concept ids not found in the knowledge base:\n  "
            + "\n  ".join(bad_gold)
        )
    return InsertionSet(queries)


def save_insertion_set(insertion: InsertionSet, path: str | Path) -> None:
    """Serialize an insertion set back to the 9-column TSV format."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for q in insertion:
            fh.write(
                "\t".join(
                    (
                        q.atom_id,
                        q.string,
                        q.source,
                        q.source_concept_id,
                        q.semantic_group,
                        q.language,
                        "1" if q.active else "0",
                        "1" if q.suppressible else "0",
                        q.gold if q.gold is not None else "",
                    )
                )
                + "\n"
            )


def kb_stats(kb: KnowledgeBase, insertion: InsertionSet | None = None) -> dict:
    """Summary counters: KB sizes, insertion size, NEW count, group histogram."""
    stats: dict = {
        "kb_atoms": kb.num_atoms,
        "kb_concepts": kb.num_concepts,
    }
    if insertion is not None:
        histogram: dict[str, int] = {}
        for q in insertion:
            histogram[q.semantic_group] = histogram.get(q.semantic_group, 0) + 1
        stats["insertion_size"] = len(insertion)
        stats["new_concepts"] = insertion.new_concept_count()
        stats["semantic_groups"] = dict(sorted(histogram.items()))
    return stats
