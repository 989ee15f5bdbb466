from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference_gradient

from vocinsert.candidates import Candidate, CandidateList
from vocinsert.errors import DataError, ScorerProtocolError
from vocinsert.kb import NEW, QueryAtom
from vocinsert.normalize import NormConfig
from vocinsert.rerank import (
    FEATURE_NAMES,
    MAX_SIDE_CHARS,
    FeatureScorer,
    FeatureScorerWeights,
    ScoredList,
    TrainingExample,
    candidate_features,
    format_pair,
    gold_index,
    listwise_loss_and_grad,
    rerank_predict,
    score_list,
    softmax,
    train_feature_scorer,
)

GOLDEN = json.loads(
    (Path(__file__).parent / "data" / "marker_golden.json").read_text(encoding="utf-8")
)


def make_query(string="aspirin 81mg", atom_id="Q1"):
    return QueryAtom(atom_id, string, "SRC0", "", "Chemicals", "ENG", True, False)


def make_candidate(string, preferred=False, concept="C1", score=0.5, atom_id="A1"):
    return Candidate(concept, atom_id, string, score, preferred)


def test_markers_bit_exact_against_golden():
    from vocinsert import rerank

    assert rerank.PREFERRED_MARKER == GOLDEN["preferred_marker"]
    assert rerank.NO_PREFERRED_MARKER == GOLDEN["no_preferred_marker"]
    assert rerank.NULL_TOKEN == GOLDEN["null_token"]
    for case in GOLDEN["cases"]:
        q = make_query(case["query_string"])
        cand = None
        if case["candidate"] is not None:
            cand = make_candidate(
                case["candidate"]["string"],
                preferred=case["candidate"]["rba_preferred"],
            )
        query_text, cand_text = format_pair(q, cand, case["has_rba_synonyms"])
        assert query_text == case["expected_query"]
        assert cand_text == case["expected_candidate"]


def test_side_cap_preserves_markers():
    q = make_query("x" * 1000)
    query_text, cand_text = format_pair(
        q, make_candidate("y" * 1000, preferred=True), False
    )
    assert query_text == "x" * MAX_SIDE_CHARS + " (No Preferred Candidate)"
    assert cand_text == "y" * MAX_SIDE_CHARS + " (Preferred)"


class StaticScorer:
    def __init__(self, logits):
        self.logits = logits

    def score_candidates(self, q, clist):
        return list(self.logits)


def test_score_list_softmax_values():
    q = make_query()
    clist = CandidateList("Q1", [make_candidate("foo")], k=5)
    scored = score_list(q, clist, StaticScorer([2.0, 0.0]))
    assert scored.probabilities[0] == pytest.approx(0.8808, abs=1e-4)
    assert scored.probabilities[1] == pytest.approx(0.1192, abs=1e-4)
    assert sum(scored.probabilities) == pytest.approx(1.0, abs=1e-9)


def test_score_list_uniform_for_equal_logits():
    q = make_query()
    entries = [make_candidate(f"c{i}", concept=f"C{i}") for i in range(4)]
    scored = score_list(q, CandidateList("Q1", entries), StaticScorer([1.5] * 5))
    assert scored.probabilities == pytest.approx([0.2] * 5)


def test_score_list_arity_and_finiteness():
    q = make_query()
    clist = CandidateList("Q1", [make_candidate("foo")])
    with pytest.raises(ScorerProtocolError):
        score_list(q, clist, StaticScorer([1.0]))
    with pytest.raises(DataError):
        score_list(q, clist, StaticScorer([float("nan"), 0.0]))


def test_rerank_predict_argmax_and_new():
    q = make_query()
    scored = ScoredList("Q1", ["C1"], [1.0, 0.0], [0.7, 0.3])
    pred = rerank_predict(q, scored)
    assert pred.predicted == "C1"
    assert pred.confidence == pytest.approx(0.7)

    scored = ScoredList("Q1", ["C1"], [0.0, 2.0], [0.2, 0.8])
    pred = rerank_predict(q, scored)
    assert pred.predicted == NEW
    assert pred.confidence == pytest.approx(0.8)


def test_rerank_predict_tie_rules():
    q = make_query()
    # NULL ties with a concept: the concept wins
    scored = ScoredList("Q1", ["C1"], [1.0, 1.0], [0.5, 0.5])
    assert rerank_predict(q, scored).predicted == "C1"
    # two concepts tie: candidate order wins
    scored = ScoredList("Q1", ["C2", "C1"], [1.0, 1.0, 0.0], [0.4, 0.4, 0.2])
    assert rerank_predict(q, scored).predicted == "C2"
    # empty candidate list: only NULL exists
    scored = ScoredList("Q1", [], [0.0], [1.0])
    assert rerank_predict(q, scored).predicted == NEW


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-30, 30), min_size=1, max_size=8),
    st.floats(0.1, 50),
)
def test_shift_invariance(logits, shift):
    q = make_query()
    concepts = [f"C{i}" for i in range(len(logits))]
    base = ScoredList("Q1", concepts, logits + [0.0], list(softmax(logits + [0.0])))
    shifted_logits = [v + shift for v in logits] + [shift]
    shifted = ScoredList("Q1", concepts, shifted_logits, list(softmax(shifted_logits)))
    assert rerank_predict(q, base).predicted == rerank_predict(q, shifted).predicted
    np.testing.assert_allclose(base.probabilities, shifted.probabilities, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 10))
    features = rng.normal(size=(n, len(FEATURE_NAMES)))
    weights = rng.normal(size=len(FEATURE_NAMES))
    gold = int(rng.integers(0, n))
    _, analytic = listwise_loss_and_grad(weights, features, gold)
    numeric = finite_difference_gradient(
        lambda w: listwise_loss_and_grad(w, features, gold)[0], weights
    )
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-6)


def test_saturated_gold_has_vanishing_gradient():
    features = np.zeros((3, len(FEATURE_NAMES)))
    features[0, 6] = 1.0  # only the gold row activates the is_null feature
    weights = np.zeros(len(FEATURE_NAMES))
    weights[6] = 500.0  # huge margin for the gold entry
    loss, grad = listwise_loss_and_grad(weights, features, 0)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.linalg.norm(grad) == pytest.approx(0.0, abs=1e-12)


def test_identical_candidates_stay_tied_through_training():
    q = make_query("alpha beta")
    twins = [
        make_candidate("alpha beta", concept="C1", score=0.9, atom_id="A1"),
        make_candidate("alpha beta", concept="C2", score=0.9, atom_id="A2"),
    ]
    clist = CandidateList("Q1", twins)
    example = TrainingExample(query=q, clist=clist, gold="C1")
    weights = train_feature_scorer([example], epochs=5, lr=0.3, seed=1)
    scorer = FeatureScorer(weights)
    scored = score_list(q, clist, scorer)
    assert scored.probabilities[0] == pytest.approx(scored.probabilities[1], abs=1e-12)


def test_gold_index_and_missing_gold():
    clist = CandidateList("Q1", [make_candidate("foo", concept="C9")])
    assert gold_index(clist, "C9", "Q1") == 0
    assert gold_index(clist, NEW, "Q1") == 1
    with pytest.raises(DataError, match="Q1"):
        gold_index(clist, "C404", "Q1")


def test_features_shape_and_null_flags():
    q = make_query("heart attack")
    entries = [
        make_candidate("Heart Attack", preferred=True, score=0.95),
        make_candidate("migraine", preferred=False, concept="C2", score=0.2),
    ]
    feats = candidate_features(q, CandidateList("Q1", entries))
    assert feats.shape == (3, len(FEATURE_NAMES))
    assert feats[0, 0] == 1.0  # exact normalized match
    assert feats[0, 4] == 1.0  # preferred flag
    assert feats[1, 0] == 0.0
    assert feats[2, 6] == 1.0  # NULL row
    assert feats[2, 5] == 0.0  # query has preferred candidates
    feats_nopref = candidate_features(
        q, CandidateList("Q1", [make_candidate("migraine", concept="C2")])
    )
    assert feats_nopref[-1, 5] == 1.0


def test_exact_match_beats_null_after_training():
    """Trained on lists where gold is the unique exact-normalized match, the
    scorer ranks that candidate above NULL."""
    rng_strings = [
        ("renal failure", "failure renal", "hepatic cyst"),
        ("aortic stenosis", "AORTIC STENOSIS", "mitral valve"),
        ("lung nodule", "Lung Nodule", "bone lesion"),
        ("skin rash", "rash, skin", "eye pain"),
    ]
    examples = []
    for i, (qs, gold_s, other) in enumerate(rng_strings):
        q = make_query(qs, atom_id=f"Q{i}")
        entries = [
            make_candidate(gold_s, concept="GOLD", score=0.9, atom_id="A1"),
            make_candidate(other, concept="OTHER", score=0.4, atom_id="A2"),
        ]
        examples.append(
            TrainingExample(query=q, clist=CandidateList(q.atom_id, entries), gold="GOLD")
        )
        # one NEW example so NULL gets gradient too
        qn = make_query(f"unrelated thing {i}", atom_id=f"QN{i}")
        entries_n = [make_candidate(other, concept="OTHER", score=0.3, atom_id="A3")]
        examples.append(
            TrainingExample(query=qn, clist=CandidateList(qn.atom_id, entries_n), gold=NEW)
        )
    weights = train_feature_scorer(examples, epochs=60, lr=0.5, seed=0)
    scorer = FeatureScorer(weights)
    for ex in examples:
        scored = score_list(ex.query, ex.clist, scorer)
        pred = rerank_predict(ex.query, scored)
        assert pred.predicted == ex.gold
    # exact-match candidate strictly outscores NULL
    ex = examples[0]
    scored = score_list(ex.query, ex.clist, scorer)
    assert scored.logits[0] > scored.logits[-1]


def test_weights_round_trip_bit_exact(tmp_path):
    values = [0.1, -2.5, 3.141592653589793, 1e-12, 7.0, -0.0, 42.0]
    weights = FeatureScorerWeights(values=values)
    path = tmp_path / "weights.json"
    weights.save(path)
    reloaded = FeatureScorerWeights.load(path)
    assert reloaded.values == values
    assert reloaded.feature_names == FEATURE_NAMES
    with pytest.raises(DataError):
        FeatureScorerWeights(values=[1.0])
    with pytest.raises(DataError):
        FeatureScorerWeights(values=[float("inf")] + [0.0] * 6)


def test_train_rejects_missing_gold():
    q = make_query()
    clist = CandidateList("Q1", [make_candidate("foo", concept="C1")])
    with pytest.raises(DataError, match="Q1"):
        train_feature_scorer([TrainingExample(q, clist, "C404")], epochs=1)
