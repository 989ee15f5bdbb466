"""Rule-based synonymy closure and the predictions derived from it.

Two atoms are deemed synonymous when

* rule 1: their source vocabulary groups them under the same non-empty
  source concept id (equal ``(source, source_concept_id)``), or
* rule 2: their strings share a normalized form and their semantic groups
  are compatible,

and the closure is the transitive closure of those two pair relations over
all knowledge-base atoms plus the whole query batch.  Query atoms are
unioned in together; only KB members of a class ever become candidates, so
query-to-query links never invent concepts.
"""

from __future__ import annotations

import random
from collections.abc import Iterable
from pathlib import Path

from .errors import DataError
from .kb import NEW, InsertionSet, KnowledgeBase, Prediction, QueryAtom
from .normalize import CompatibilityMatrix, NormConfig, normalize

RULE_SOURCE_SYNONYMY = "rule1"
RULE_NORMALIZED_MATCH = "rule2"


class UnionFind:
    """Disjoint sets over hashable keys; path compression + union by rank.

    ``find`` is iterative so million-atom chains cannot hit the recursion
    limit.
    """

    def __init__(self, items: Iterable[str] = ()):
        self._parent: dict[str, str] = {}
        self._rank: dict[str, int] = {}
        for item in items:
            self.add(item)

    def add(self, item: str) -> None:
        if item not in self._parent:
            self._parent[item] = item
            self._rank[item] = 0

    def find(self, item: str) -> str:
        parent = self._parent
        root = item
        while parent[root] != root:
            root = parent[root]
        while parent[item] != root:
            parent[item], item = root, parent[item]
        return root

    def union(self, a: str, b: str) -> bool:
        """Merge the classes of a and b; returns False if already joined."""
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self._rank[ra] < self._rank[rb]:
            ra, rb = rb, ra
        self._parent[rb] = ra
        if self._rank[ra] == self._rank[rb]:
            self._rank[ra] += 1
        return True

    def __contains__(self, item: str) -> bool:
        return item in self._parent

    def __len__(self) -> int:
        return len(self._parent)


class SynonymyClosure:
    """Frozen partition of (KB atom ids + query atom ids).

    ``merges`` records one ``(atom_a, atom_b, rule)`` triple per union that
    actually joined two classes, for audit.  After construction the closure
    is immutable and safe to read concurrently.
    """

    def __init__(self, uf: UnionFind, merges: list[tuple[str, str, str]]):
        self._members: dict[str, tuple[str, ...]] = {}
        self._class_of: dict[str, str] = {}
        by_root: dict[str, list[str]] = {}
        for item in uf._parent:
            by_root.setdefault(uf.find(item), []).append(item)
        for members in by_root.values():
            members.sort()
            class_id = members[0]  # smallest member id names the class
            self._members[class_id] = tuple(members)
            for m in members:
                self._class_of[m] = class_id
        self.merges = merges

    def class_id(self, atom_id: str) -> str:
        try:
            return self._class_of[atom_id]
        except KeyError:
            raise DataError(f"atom {atom_id!r} not covered by the closure") from None

    def members(self, atom_id: str) -> tuple[str, ...]:
        return self._members[self.class_id(atom_id)]

    def classes(self) -> Iterable[tuple[str, ...]]:
        return self._members.values()

    def __len__(self) -> int:
        return len(self._class_of)

    @property
    def num_classes(self) -> int:
        return len(self._members)

    def dump_tsv(self, path: str | Path) -> None:
        """Audit dump: one ``atom_id<TAB>class_id`` row per atom."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            for atom_id in sorted(self._class_of):
                fh.write(f"{atom_id}\t{self._class_of[atom_id]}\n")


def build_closure(
    kb: KnowledgeBase,
    queries: InsertionSet | Iterable[QueryAtom] = (),
    norm_cfg: NormConfig = NormConfig(),
    compat: CompatibilityMatrix | None = None,
) -> SynonymyClosure:
    """Build the synonymy closure over KB atoms plus the query batch.

    Rule-2 edges are found by bucketing on the normalized string, so the
    build is linear in the corpus instead of quadratic; within a bucket,
    atoms of one semantic group are chained and compatible groups are
    bridged through one representative each, which yields exactly the
    connected components of the full pair graph.
    """
    compat = compat if compat is not None else CompatibilityMatrix.identity()
    queries = list(queries)
    uf = UnionFind(kb.atom_ids())
    for q in queries:
        if q.atom_id in uf:
            raise DataError(
                f"query atom_id {q.atom_id!r} collides with a knowledge-base atom"
            )
        uf.add(q.atom_id)
    merges: list[tuple[str, str, str]] = []

    def link(a: str, b: str, rule: str) -> None:
        if uf.union(a, b):
            merges.append((a, b, rule))

    def records():
        for atom in kb.atoms():
            yield atom.atom_id, atom.string, atom.source, atom.source_concept_id, atom.semantic_group
        for q in queries:
            yield q.atom_id, q.string, q.source, q.source_concept_id, q.semantic_group

    # Rule 1: equal (source, source_concept_id), non-empty.
    source_groups: dict[tuple[str, str], str] = {}
    for atom_id, _, source, scid, _ in records():
        if not scid:
            continue
        key = (source, scid)
        first = source_groups.setdefault(key, atom_id)
        if first != atom_id:
            link(first, atom_id, RULE_SOURCE_SYNONYMY)

    # Rule 2: equal normalized string and compatible semantic groups.
    norm_cache: dict[str, str] = {}
    buckets: dict[str, dict[str, str]] = {}  # norm -> group -> first atom id
    for atom_id, string, _, _, group in records():
        norm = norm_cache.get(string)
        if norm is None:
            norm = normalize(string, norm_cfg)
            norm_cache[string] = norm
        group_reps = buckets.setdefault(norm, {})
        first = group_reps.setdefault(group, atom_id)
        if first != atom_id:
            link(first, atom_id, RULE_NORMALIZED_MATCH)
    for group_reps in buckets.values():
        if len(group_reps) < 2:
            continue
        groups = sorted(group_reps)
        for i, g1 in enumerate(groups):
            for g2 in groups[i + 1 :]:
                if compat.compatible(g1, g2):
                    link(group_reps[g1], group_reps[g2], RULE_NORMALIZED_MATCH)

    return SynonymyClosure(uf, merges)


def rule_candidates(
    q: QueryAtom, closure: SynonymyClosure, kb: KnowledgeBase
) -> set[str]:
    """Distinct concept ids of the KB atoms in the query's closure class."""
    return {
        kb.concept_of(member)
        for member in closure.members(q.atom_id)
        if member in kb
    }


def rule_predict(
    q: QueryAtom, closure: SynonymyClosure, kb: KnowledgeBase, seed: int = 0
) -> Prediction:
    """Predict from the closure alone.

    No candidate concept means NEW; a unique candidate is returned directly;
    ties are broken by a uniform choice seeded per (run seed, atom id) so
    batch order never changes the outcome.
    """
    candidates = sorted(rule_candidates(q, closure, kb))
    if not candidates:
        return Prediction(q.atom_id, NEW, 1.0, [])
    if len(candidates) == 1:
        chosen = candidates[0]
    else:
        rng = random.Random(f"{seed}:{q.atom_id}")
        chosen = rng.choice(candidates)
    confidence = 1.0 / len(candidates)
    trace = [(chosen, confidence)]
    trace.extend((c, confidence) for c in candidates if c != chosen)
    return Prediction(q.atom_id, chosen, confidence, trace)
