"""Embedding store, cosine k-nearest-neighbor search, and the bi-encoder
threshold baseline.

Vectors are unit-normalized once at load, so cosine similarity is a plain
dot product everywhere downstream.  Exact search is the default and the
reference for correctness; an optional inverted-file index trades exactness
for speed behind the same call, auto-calibrated to a recall target at build
time.

Embedding file format (little-endian binary): magic ``UVIEMB1\\0``,
u32 count, u32 dim, then per record a u16 id length, the UTF-8 id bytes,
and dim float32 values.
"""

from __future__ import annotations

import bisect
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .kb import NEW, InsertionSet, KnowledgeBase, Prediction, QueryAtom

MAGIC = b"UVIEMB1\x00"
UNIT_NORM_TOL = 1e-5


class EmbeddingStore:
    """Immutable map atom_id -> unit vector, with the matrix exposed for
    vectorized scoring."""

    def __init__(self, ids: list[str], matrix: np.ndarray):
        if matrix.ndim != 2 or len(ids) != matrix.shape[0]:
            raise DataError("embedding matrix shape does not match id list")
        self.ids = list(ids)
        self.matrix = np.ascontiguousarray(matrix, dtype=np.float64)
        self._index = {atom_id: i for i, atom_id in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise DataError("duplicate atom ids in embedding store")
        norms = np.linalg.norm(self.matrix, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
        if bad.size:
            raise DataError(f"vector for atom {self.ids[bad[0]]!r} is not unit-norm")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, atom_id: str) -> bool:
        return atom_id in self._index

    def vector(self, atom_id: str) -> np.ndarray:
        try:
            return self.matrix[self._index[atom_id]]
        except KeyError:
            raise DataError(f"no embedding for atom {atom_id!r}") from None

    def missing(self, atom_ids) -> list[str]:
        return sorted(a for a in atom_ids if a not in self._index)

    def subset(self, atom_ids) -> "EmbeddingStore":
        """View-like store over the given atoms (rows are copied)."""
        atom_ids = list(atom_ids)
        absent = self.missing(atom_ids)
        if absent:
            preview = ", ".join(absent[:5])
            raise DataError(
                f"{len(absent)} atom(s) lack embeddings (e.g. {preview})"
            )
        rows = np.array([self._index[a] for a in atom_ids], dtype=np.intp)
        return EmbeddingStore(atom_ids, self.matrix[rows])


def load_embeddings(path: str | Path) -> EmbeddingStore:
    """Read the binary embedding file; vectors are unit-normalized here.

    Dimension mismatches, truncated records, non-finite values, and zero
    vectors are hard errors.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not an embedding file (bad magic)")
    count, dim = struct.unpack_from("<II", data, len(MAGIC))
    if dim == 0:
        raise DataError(f"{path}: embedding dimension must be positive")
    offset = len(MAGIC) + 8
    ids: list[str] = []
    vectors = np.empty((count, dim), dtype=np.float64)
    for i in range(count):
        if offset + 2 > len(data):
            raise DataError(f"{path}: truncated at record {i}")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        end = offset + id_len + 4 * dim
        if end > len(data):
            raise DataError(f"{path}: truncated at record {i}")
        atom_id = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
        offset += 4 * dim
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{path}: non-finite vector for atom {atom_id!r}")
        norm = float(np.linalg.norm(vec.astype(np.float64)))
        if norm == 0.0:
            raise DataError(f"{path}: zero vector for atom {atom_id!r}")
        ids.append(atom_id)
        vectors[i] = vec.astype(np.float64) / norm
    if offset != len(data):
        raise DataError(f"{path}: {len(data) - offset} trailing bytes after records")
    return EmbeddingStore(ids, vectors)


def save_embeddings(path: str | Path, ids, matrix) -> None:
    """Write vectors in the binary embedding format (float32 payload)."""
    matrix = np.asarray(matrix)
    ids = list(ids)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise DataError("embedding matrix shape does not match id list")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", len(ids), matrix.shape[1]))
        for atom_id, row in zip(ids, matrix):
            encoded = atom_id.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise DataError(f"atom id too long to serialize: {atom_id[:40]!r}...")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(np.asarray(row, dtype="<f4").tobytes())


def missing_report(
    store: EmbeddingStore,
    kb: KnowledgeBase,
    queries: InsertionSet | None = None,
) -> dict:
    """Which KB/query atoms have no vector; empty lists mean fully covered."""
    report = {"kb_missing": store.missing(kb.atom_ids())}
    if queries is not None:
        report["query_missing"] = store.missing(q.atom_id for q in queries)
    return report


def _normalize_query(query_vec) -> np.ndarray:
    q = np.asarray(query_vec, dtype=np.float64)
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        raise DataError("query vector is zero")
    return q / norm


def _rank_rows(store: EmbeddingStore, rows: np.ndarray, scores: np.ndarray, k: int):
    """Top-k among the given rows, descending score, ties by atom_id."""
    if rows.size == 0:
        return []
    k = min(k, rows.size)
    if k < rows.size:
        kth = np.partition(scores, rows.size - k)[rows.size - k]
        keep = scores >= kth  # keeps boundary ties for exact ordering
        rows, scores = rows[keep], scores[keep]
    order = sorted(range(rows.size), key=lambda i: (-scores[i], store.ids[rows[i]]))
    return [(store.ids[rows[i]], float(scores[i])) for i in order[:k]]


def knn(
    store: EmbeddingStore,
    query_vec,
    k: int,
    index: "ApproxIndex | None" = None,
) -> list[tuple[str, float]]:
    """k nearest atoms by cosine, descending; ties break by atom_id.

    Exact full scan by default; pass a built :class:`ApproxIndex` for
    approximate search at its calibrated recall.  ``k`` larger than the
    store returns the full ranking.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    q = _normalize_query(query_vec)
    if q.shape[0] != store.dim:
        raise DataError(f"query dim {q.shape[0]} != store dim {store.dim}")
    if index is None:
        rows = np.arange(len(store), dtype=np.intp)
        scores = store.matrix @ q
    else:
        rows = index.probe(q, k)
        scores = store.matrix[rows] @ q
    return _rank_rows(store, rows, scores, k)


class ApproxIndex:
    """Inverted-file index: k-means cells, probe the closest few.

    ``build`` calibrates how many cells to probe against an exact scan on
    sampled queries until the requested recall@10 is met (with margin), so
    the accuracy/speed trade-off is explicit and data-dependent.
    """

    def __init__(self, store: EmbeddingStore, centroids, cells, nprobe: int):
        self.store = store
        self.centroids = centroids
        self.cells = cells
        self.nprobe = nprobe

    @classmethod
    def build(
        cls,
        store: EmbeddingStore,
        recall_target: float = 0.95,
        nlist: int | None = None,
        seed: int = 0,
        calibration_queries: int = 64,
    ) -> "ApproxIndex":
        from scipy.cluster.vq import kmeans2

        n = len(store)
        if n == 0:
            raise DataError("cannot index an empty store")
        if not 0.0 < recall_target <= 1.0:
            raise ConfigError(f"recall_target must be in (0, 1], got {recall_target}")
        if nlist is None:
            nlist = max(1, min(int(np.sqrt(n)), n))
        centroids, labels = kmeans2(
            store.matrix, nlist, minit="++", seed=seed, iter=25
        )
        cells = [np.flatnonzero(labels == c).astype(np.intp) for c in range(nlist)]

        rng = np.random.default_rng(seed + 1)
        probes = rng.standard_normal((calibration_queries, store.dim))
        probes /= np.linalg.norm(probes, axis=1, keepdims=True)
        exact_top = [
            {atom_id for atom_id, _ in knn(store, qv, min(10, n))} for qv in probes
        ]
        # Smallest nprobe reaching target recall plus margin, then one extra
        # cell as headroom for queries the calibration sample missed.
        goal = min(1.0, recall_target + 0.03)
        nprobe = nlist
        for cand in range(1, nlist + 1):
            idx = cls(store, centroids, cells, cand)
            hits = total = 0
            for qv, truth in zip(probes, exact_top):
                rows = idx.probe(qv, 10)
                scores = store.matrix[rows] @ qv
                found = {a for a, _ in _rank_rows(store, rows, scores, min(10, n))}
                hits += len(found & truth)
                total += len(truth)
            if total and hits / total >= goal:
                nprobe = cand
                break
        return cls(store, centroids, cells, min(nprobe + 1, nlist))

    def probe(self, query_vec: np.ndarray, k: int) -> np.ndarray:
        """Row indices from the closest cells, widened until >= k rows."""
        cell_scores = self.centroids @ query_vec
        order = np.argsort(-cell_scores)
        rows: list[np.ndarray] = []
        gathered = 0
        take = self.nprobe
        while True:
            rows = [self.cells[c] for c in order[:take] if self.cells[c].size]
            gathered = sum(r.size for r in rows)
            if gathered >= k or take >= len(self.cells):
                break
            take += 1
        if not rows:
            return np.empty(0, dtype=np.intp)
        return np.concatenate(rows)


@dataclass(frozen=True)
class SimilarityThreshold:
    """Cosine cut-off below which a query is deemed a new concept."""

    theta: float
    objective: str = "accuracy"

    def __post_init__(self):
        if not -1.0 <= self.theta <= 1.0 + 1e-12:
            raise ConfigError(f"theta must lie in [-1, 1], got {self.theta}")

    def to_json(self) -> dict:
        return {"theta": self.theta, "objective": self.objective}

    @classmethod
    def from_json(cls, obj: dict) -> "SimilarityThreshold":
        return cls(theta=float(obj["theta"]), objective=obj.get("objective", "accuracy"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SimilarityThreshold":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _top1(
    store: EmbeddingStore, query_vec, index: "ApproxIndex | None" = None
) -> tuple[str, float]:
    (best,) = knn(store, query_vec, 1, index=index)
    return best


def tune_threshold(
    store: EmbeddingStore,
    train_queries: InsertionSet,
    kb: KnowledgeBase,
    kb_store: EmbeddingStore | None = None,
    objective: str = "accuracy",
) -> SimilarityThreshold:
    """Pick the cut-off maximizing the objective on labelled training queries.

    The scan runs over the sorted set of observed top-1 similarities plus
    one value just above the maximum (so "everything is new" is reachable);
    ties go to the smallest theta.  ``objective`` is ``accuracy`` (default)
    or ``nc_f1``.
    """
    if len(train_queries) == 0:
        raise DataError("cannot tune a threshold on an empty training set")
    if not train_queries.has_gold:
        raise DataError("threshold tuning requires gold labels on every query")
    if objective not in ("accuracy", "nc_f1"):
        raise ConfigError(f"unknown tuning objective {objective!r}")
    kb_store = kb_store if kb_store is not None else store.subset(kb.atom_ids())

    scores: list[float] = []
    gold_new: list[bool] = []
    linked_ok: list[bool] = []
    for q in train_queries:
        atom_id, score = _top1(kb_store, store.vector(q.atom_id))
        scores.append(score)
        gold_new.append(q.gold == NEW)
        linked_ok.append(q.gold == kb.concept_of(atom_id))

    order = np.argsort(scores, kind="stable")
    s_sorted = [scores[i] for i in order]
    new_sorted = np.array([gold_new[i] for i in order])
    ok_sorted = np.array([linked_ok[i] for i in order])
    # new_below[i]: gold-NEW queries with score < s_sorted[i] cut at position i
    new_cum = np.concatenate(([0], np.cumsum(new_sorted)))
    ok_cum = np.concatenate(([0], np.cumsum(ok_sorted)))
    total = len(s_sorted)
    n_new = int(new_cum[-1])

    candidates = sorted(set(s_sorted))
    top = s_sorted[-1]
    above = float(np.nextafter(top, np.inf))
    if above <= 1.0:
        candidates.append(above)

    best_theta, best_value = None, -1.0
    for theta in candidates:
        cut = bisect.bisect_left(s_sorted, theta)  # scores < theta predict NEW
        tp = int(new_cum[cut])
        fn = n_new - tp
        fp = cut - tp
        correct_ec = int(ok_cum[total] - ok_cum[cut])
        if objective == "accuracy":
            value = (tp + correct_ec) / total
        else:
            denom_p, denom_r = tp + fp, tp + fn
            precision = tp / denom_p if denom_p else 0.0
            recall = tp / denom_r if denom_r else 0.0
            value = (
                2 * precision * recall / (precision + recall)
                if precision + recall
                else 0.0
            )
        if value > best_value:
            best_theta, best_value = theta, value
    return SimilarityThreshold(theta=min(best_theta, 1.0), objective=objective)


def biencoder_predict(
    q: QueryAtom,
    store: EmbeddingStore,
    kb: KnowledgeBase,
    theta: SimilarityThreshold | float,
    kb_store: EmbeddingStore | None = None,
    index: ApproxIndex | None = None,
) -> Prediction:
    """Nearest-atom prediction with a new-concept cut-off.

    The top-1 KB atom decides: similarity below theta means NEW, otherwise
    the atom's concept.  Confidence is the similarity mapped onto [0, 1].
    """
    cut = theta.theta if isinstance(theta, SimilarityThreshold) else float(theta)
    kb_store = kb_store if kb_store is not None else store.subset(kb.atom_ids())
    atom_id, score = _top1(kb_store, store.vector(q.atom_id), index=index)
    concept = kb.concept_of(atom_id)
    confidence = min(1.0, max(0.0, (score + 1.0) / 2.0))
    predicted = NEW if score < cut else concept
    return Prediction(q.atom_id, predicted, confidence, [(concept, score)])
