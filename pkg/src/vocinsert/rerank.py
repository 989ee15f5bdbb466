"""Null-injected candidate re-ranking over a pluggable pair scorer.

A scored list holds one logit per candidate concept plus one for the
injected NULL entry, softmaxed into probabilities; the argmax decides
between an existing concept and NEW.  Scorers come in two kinds: an
external pair scorer reached over the wire protocol (see ``scorers``),
which sees marker-suffixed text only, and the built-in trainable scorer,
which ranks by a linear model over lexical/rule features and is trained
with a listwise cross-entropy loss.

Marker strings are part of the wire contract and must stay byte-exact:
``" (Preferred)"`` is appended to rule-derived candidates,
``" (No Preferred Candidate)"`` to queries whose rules found nothing, and
the NULL entry is transmitted as the literal ``"NULL"``.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .candidates import Candidate, CandidateList
from .errors import DataError, ScorerProtocolError
from .kb import NEW, Prediction, QueryAtom
from .normalize import NormConfig, normalize

logger = logging.getLogger(__name__)

PREFERRED_MARKER = " (Preferred)"
NO_PREFERRED_MARKER = " (No Preferred Candidate)"
NULL_TOKEN = "NULL"

#: Sides are capped at this many characters before markers are appended, so
#: the markers themselves always survive transmission intact.
MAX_SIDE_CHARS = 256

FEATURE_NAMES = (
    "exact_norm_match",
    "token_jaccard",
    "trigram_cosine",
    "embedding_score",
    "rule_preferred",
    "null_no_preferred",
    "is_null",
)


def format_pair(
    q: QueryAtom,
    candidate: Candidate | None,
    has_rba_synonyms: bool,
) -> tuple[str, str]:
    """Texts for one (query, candidate) pair; ``candidate=None`` is NULL.

    The query side carries the no-preferred marker when the rules proposed
    nothing; rule-derived candidates carry the preferred marker.  Base
    strings are truncated to ``MAX_SIDE_CHARS`` first so markers are never
    cut.
    """
    query_text = q.string[:MAX_SIDE_CHARS]
    if not has_rba_synonyms:
        query_text += NO_PREFERRED_MARKER
    if candidate is None:
        return query_text, NULL_TOKEN
    candidate_text = candidate.representative_string[:MAX_SIDE_CHARS]
    if candidate.rba_preferred:
        candidate_text += PREFERRED_MARKER
    return query_text, candidate_text


@dataclass
class ScoredList:
    """Logits and softmax probabilities for a candidate list plus NULL.

    The NULL entry is last; ``concept_ids`` aligns with the first
    ``len(concept_ids)`` logits.
    """

    query_atom_id: str
    concept_ids: list[str]
    logits: list[float]
    probabilities: list[float]


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _trigrams(s: str) -> dict[str, int]:
    if len(s) < 3:
        return {s: 1} if s else {}
    counts: dict[str, int] = {}
    for i in range(len(s) - 2):
        g = s[i : i + 3]
        counts[g] = counts.get(g, 0) + 1
    return counts


def _trigram_cosine(a: str, b: str) -> float:
    ga, gb = _trigrams(a), _trigrams(b)
    if not ga or not gb:
        return 1.0 if a == b else 0.0
    dot = sum(c * gb.get(g, 0) for g, c in ga.items())
    if dot == 0:
        return 0.0
    na = math.sqrt(sum(c * c for c in ga.values()))
    nb = math.sqrt(sum(c * c for c in gb.values()))
    return dot / (na * nb)


def _token_jaccard(a: str, b: str) -> float:
    ta, tb = set(a.split()), set(b.split())
    if not ta and not tb:
        return 1.0
    union = ta | tb
    return len(ta & tb) / len(union)


def candidate_features(
    q: QueryAtom,
    clist: CandidateList,
    norm_cfg: NormConfig = NormConfig(),
) -> np.ndarray:
    """Feature matrix of shape (len(entries) + 1, len(FEATURE_NAMES)).

    The last row is the NULL entry.  The no-preferred query flag rides on
    the NULL row only: carried by every row it would cancel out of the
    softmax, carried by NULL it shifts the new-concept logit exactly when
    the rules came up empty.
    """
    has_preferred = clist.has_preferred
    q_norm = normalize(q.string, norm_cfg)
    rows = np.zeros((len(clist.entries) + 1, len(FEATURE_NAMES)), dtype=np.float64)
    for i, cand in enumerate(clist.entries):
        c_norm = normalize(cand.representative_string, norm_cfg)
        rows[i, 0] = 1.0 if q_norm == c_norm else 0.0
        rows[i, 1] = _token_jaccard(q_norm, c_norm)
        rows[i, 2] = _trigram_cosine(q_norm, c_norm)
        rows[i, 3] = cand.score
        rows[i, 4] = 1.0 if cand.rba_preferred else 0.0
    rows[-1, 5] = 0.0 if has_preferred else 1.0
    rows[-1, 6] = 1.0
    return rows


@dataclass
class FeatureScorerWeights:
    """Linear weights over the fixed feature set; the NULL bias is the
    ``is_null`` feature weight.  JSON round-trips are bit-exact."""

    values: list[float]
    feature_names: tuple[str, ...] = FEATURE_NAMES
    version: int = 1

    def __post_init__(self):
        if len(self.values) != len(self.feature_names):
            raise DataError(
                f"expected {len(self.feature_names)} weights, got {len(self.values)}"
            )
        if not all(math.isfinite(v) for v in self.values):
            raise DataError("feature weights must be finite")

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "features": list(self.feature_names),
            "weights": list(self.values),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureScorerWeights":
        if obj.get("version") != 1:
            raise DataError(f"unsupported weights version {obj.get('version')!r}")
        return cls(
            values=[float(v) for v in obj["weights"]],
            feature_names=tuple(obj["features"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "FeatureScorerWeights":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


class FeatureScorer:
    """Built-in deterministic scorer: logits are a linear map of features."""

    def __init__(self, weights: FeatureScorerWeights, norm_cfg: NormConfig = NormConfig()):
        self.weights = weights
        self.norm_cfg = norm_cfg
        self._w = np.asarray(weights.values, dtype=np.float64)

    def score_candidates(self, q: QueryAtom, clist: CandidateList) -> list[float]:
        features = candidate_features(q, clist, self.norm_cfg)
        return list(features @ self._w)


def score_list(q: QueryAtom, clist: CandidateList, scorer) -> ScoredList:
    """Score a candidate list (plus the injected NULL) with any scorer.

    The scorer must expose ``score_candidates(q, clist) -> list of floats``
    of arity ``len(entries) + 1`` with the NULL logit last.  Non-finite
    logits are a hard error; transport failures surface as
    :class:`ScorerProtocolError` tagged with the query id.
    """
    logits = scorer.score_candidates(q, clist)
    expected = len(clist.entries) + 1
    if len(logits) != expected:
        raise ScorerProtocolError(
            f"scorer returned {len(logits)} logits, expected {expected}",
            query_id=q.atom_id,
        )
    if not all(math.isfinite(v) for v in logits):
        raise DataError(f"non-finite logit for query {q.atom_id!r}")
    probs = softmax(logits)
    return ScoredList(
        query_atom_id=q.atom_id,
        concept_ids=clist.concept_ids(),
        logits=[float(v) for v in logits],
        probabilities=[float(p) for p in probs],
    )


def rerank_predict(q: QueryAtom, scored: ScoredList) -> Prediction:
    """Argmax over the scored entries; NULL on top means NEW.

    Ties: NULL loses to any concept, and tied concepts resolve to the one
    earliest in candidate order.  Confidence is the maximum probability.
    """
    probs = scored.probabilities
    n = len(scored.concept_ids)
    best_concept = None
    if n:
        best_idx = max(range(n), key=lambda i: (probs[i], -i))
        best_concept = (scored.concept_ids[best_idx], probs[best_idx])
    null_prob = probs[-1]
    trace = sorted(
        zip(scored.concept_ids, probs[:n]), key=lambda t: -t[1]
    )
    if best_concept is None or null_prob > best_concept[1]:
        return Prediction(q.atom_id, NEW, null_prob, trace)
    return Prediction(q.atom_id, best_concept[0], best_concept[1], trace)


def listwise_loss_and_grad(
    weights: np.ndarray, features: np.ndarray, gold_index: int
) -> tuple[float, np.ndarray]:
    """Cross-entropy of the gold entry under softmax(features @ weights).

    Returns (loss, gradient w.r.t. weights); the gradient is
    ``features.T @ (p - onehot(gold))``.
    """
    probs = softmax(features @ weights)
    p_gold = max(probs[gold_index], 1e-300)
    loss = -math.log(p_gold)
    delta = probs.copy()
    delta[gold_index] -= 1.0
    return loss, features.T @ delta


def gold_index(clist: CandidateList, gold: str, query_atom_id: str) -> int:
    """Index of the gold entry; the NULL slot when gold is NEW."""
    if gold == NEW:
        return len(clist.entries)
    for i, cand in enumerate(clist.entries):
        if cand.concept_id == gold:
            return i
    raise DataError(
        f"gold concept {gold!r} missing from the candidate list of query "
        f"{query_atom_id!r}"
    )


@dataclass
class TrainingExample:
    query: QueryAtom
    clist: CandidateList
    gold: str


def _list_accuracy(
    examples: list[TrainingExample], scorer: FeatureScorer
) -> float:
    if not examples:
        return 0.0
    hits = 0
    for ex in examples:
        scored = score_list(ex.query, ex.clist, scorer)
        pred = rerank_predict(ex.query, scored)
        hits += pred.predicted == ex.gold
    return hits / len(examples)


def train_feature_scorer(
    examples: list[TrainingExample],
    epochs: int = 3,
    lr: float = 0.5,
    batch_size: int = 1,
    warmup_ratio: float = 0.1,
    seed: int = 0,
    val_examples: list[TrainingExample] | None = None,
    norm_cfg: NormConfig = NormConfig(),
) -> FeatureScorerWeights:
    """Fit the linear scorer by SGD on the listwise cross-entropy.

    Batches are shuffled with a fixed seed; the learning rate warms up
    linearly over ``warmup_ratio`` of the steps then decays linearly to
    zero.  With validation examples given, training keeps the weights from
    the best-accuracy epoch (earliest on ties).
    """
    if not examples:
        raise DataError("no training examples")
    prepared = []
    for ex in examples:
        features = candidate_features(ex.query, ex.clist, norm_cfg)
        prepared.append((features, gold_index(ex.clist, ex.gold, ex.query.atom_id)))

    w = np.zeros(len(FEATURE_NAMES), dtype=np.float64)
    rng = random.Random(seed)
    total_steps = max(1, epochs * math.ceil(len(prepared) / max(1, batch_size)))
    warmup_steps = int(warmup_ratio * total_steps)
    step = 0
    best: tuple[float, int, np.ndarray] | None = None

    for epoch in range(epochs):
        order = list(range(len(prepared)))
        rng.shuffle(order)
        for start in range(0, len(order), max(1, batch_size)):
            batch = order[start : start + max(1, batch_size)]
            grad = np.zeros_like(w)
            for i in batch:
                features, gold_idx = prepared[i]
                _, g = listwise_loss_and_grad(w, features, gold_idx)
                grad += g
            grad /= len(batch)
            if warmup_steps and step < warmup_steps:
                step_lr = lr * (step + 1) / warmup_steps
            else:
                remaining = max(1, total_steps - warmup_steps)
                step_lr = lr * max(0.0, (total_steps - step) / remaining)
            w -= step_lr * grad
            step += 1
        if val_examples is not None:
            scorer = FeatureScorer(
                FeatureScorerWeights(values=list(w)), norm_cfg=norm_cfg
            )
            acc = _list_accuracy(val_examples, scorer)
            logger.info("epoch %d: validation accuracy %.4f", epoch + 1, acc)
            if best is None or acc > best[0]:
                best = (acc, epoch, w.copy())

    if best is not None:
        w = best[2]
    return FeatureScorerWeights(values=[float(v) for v in w])
