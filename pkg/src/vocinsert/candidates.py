"""Fixed-size candidate lists: rule-derived concepts first, embedding
neighbors as fill.

Every candidate concept is represented by its single atom most similar to
the query (ties by atom_id), so downstream scorers see one string per
concept.  Rule-derived concepts are ranked by that similarity and always
precede the fill block; the final ranking decision belongs to the
re-ranker, the list is just its input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .kb import NEW, KnowledgeBase, Prediction, QueryAtom
from .vectors import ApproxIndex, EmbeddingStore, knn

DEFAULT_LIST_SIZE = 50


@dataclass(frozen=True)
class Candidate:
    concept_id: str
    representative_atom_id: str
    representative_string: str
    score: float  # cosine similarity of the representative atom to the query
    rba_preferred: bool  # concept was also proposed by the synonymy rules


@dataclass
class CandidateList:
    query_atom_id: str
    entries: list[Candidate] = field(default_factory=list)
    k: int = DEFAULT_LIST_SIZE

    @property
    def has_preferred(self) -> bool:
        return any(c.rba_preferred for c in self.entries)

    def concept_ids(self) -> list[str]:
        return [c.concept_id for c in self.entries]


def _preferred_entries(
    q_vec: np.ndarray,
    rule_set: set[str],
    store: EmbeddingStore,
    kb: KnowledgeBase,
) -> list[Candidate]:
    """Score each rule-derived concept by its best atom; sort by score."""
    entries = []
    missing: list[str] = []
    for concept_id in sorted(rule_set):
        best_atom, best_score = None, -np.inf
        for atom_id in sorted(kb.concept(concept_id).atom_ids):
            if atom_id not in store:
                missing.append(atom_id)
                continue
            score = float(store.vector(atom_id) @ q_vec)
            if score > best_score:
                best_atom, best_score = atom_id, score
        if best_atom is None:
            continue
        entries.append(
            Candidate(
                concept_id=concept_id,
                representative_atom_id=best_atom,
                representative_string=kb.atom(best_atom).string,
                score=best_score,
                rba_preferred=True,
            )
        )
    if missing:
        preview = ", ".join(sorted(missing)[:5])
        raise DataError(f"{len(missing)} atom(s) lack embeddings (e.g. {preview})")
    entries.sort(key=lambda c: (-c.score, c.representative_atom_id))
    return entries


def generate(
    q: QueryAtom,
    rule_set: set[str],
    store: EmbeddingStore,
    kb: KnowledgeBase,
    k: int = DEFAULT_LIST_SIZE,
    kb_store: EmbeddingStore | None = None,
    index: ApproxIndex | None = None,
) -> CandidateList:
    """Assemble the candidate list for one query.

    Rule-derived concepts come first, similarity-ranked (truncated to the
    top k when the rules propose more).  The remainder is filled from the
    nearest-neighbor atom stream, skipping concepts already present, until
    the list holds k concepts or the store is exhausted.  The stream is
    over-fetched (4k atoms, doubling) because several atoms can map to one
    concept.
    """
    if k < 1:
        raise ConfigError(f"candidate list size must be >= 1, got {k}")
    q_vec = store.vector(q.atom_id)
    kb_store = kb_store if kb_store is not None else store.subset(kb.atom_ids())

    entries = _preferred_entries(q_vec, rule_set, store, kb)[:k]
    seen = {c.concept_id for c in entries}

    fetch = min(4 * k, len(kb_store))
    while len(entries) < k and len(kb_store) > 0:
        ranking = knn(kb_store, q_vec, fetch, index=index)
        for atom_id, score in ranking:
            concept_id = kb.concept_of(atom_id)
            if concept_id in seen:
                continue
            seen.add(concept_id)
            # First stream hit for a concept is its best atom: the stream is
            # globally ordered by (score desc, atom_id), same as the
            # representative rule.
            entries.append(
                Candidate(
                    concept_id=concept_id,
                    representative_atom_id=atom_id,
                    representative_string=kb.atom(atom_id).string,
                    score=score,
                    rba_preferred=False,
                )
            )
            if len(entries) == k:
                break
        if len(entries) == k or fetch >= len(kb_store):
            break
        fetch = min(fetch * 2, len(kb_store))
        # restart the walk with the wider fetch; seen-set keeps it consistent
        entries = [c for c in entries if c.rba_preferred]
        seen = {c.concept_id for c in entries}
        entries = entries[:k]

    return CandidateList(query_atom_id=q.atom_id, entries=entries, k=k)


def augmented_rule_predict(
    q: QueryAtom,
    rule_set: set[str],
    store: EmbeddingStore,
    kb: KnowledgeBase,
) -> Prediction:
    """Rule candidates re-ranked by embedding similarity.

    An empty rule set still means NEW (same decision as the plain rule
    prediction); otherwise the top-scored rule concept wins, which equals
    the first entry of the generated candidate list.
    """
    if not rule_set:
        return Prediction(q.atom_id, NEW, 1.0, [])
    q_vec = store.vector(q.atom_id)
    entries = _preferred_entries(q_vec, rule_set, store, kb)
    if not entries:
        return Prediction(q.atom_id, NEW, 1.0, [])
    best = entries[0]
    confidence = min(1.0, max(0.0, (best.score + 1.0) / 2.0))
    trace = [(c.concept_id, c.score) for c in entries]
    return Prediction(q.atom_id, best.concept_id, confidence, trace)


def dump_candidates(lists, path: str | Path) -> None:
    """Audit dump: one JSON object per query with its candidate entries."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for clist in lists:
            obj = {
                "query_atom_id": clist.query_atom_id,
                "k": clist.k,
                "entries": [
                    {
                        "concept_id": c.concept_id,
                        "representative_atom_id": c.representative_atom_id,
                        "representative_string": c.representative_string,
                        "score": c.score,
                        "rba_preferred": c.rba_preferred,
                    }
                    for c in clist.entries
                ],
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_candidate_dump(path: str | Path) -> list[CandidateList]:
    lists = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            lists.append(
                CandidateList(
                    query_atom_id=obj["query_atom_id"],
                    k=obj.get("k", DEFAULT_LIST_SIZE),
                    entries=[
                        Candidate(
                            concept_id=e["concept_id"],
                            representative_atom_id=e["representative_atom_id"],
                            representative_string=e["representative_string"],
                            score=float(e["score"]),
                            rba_preferred=bool(e["rba_preferred"]),
                        )
                        for e in obj["entries"]
                    ],
                )
            )
    return lists
