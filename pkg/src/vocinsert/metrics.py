"""Evaluation: confusion counters, metrics, stratified splits, calibration
bins, correction-type comparison, and latency benchmarking.

New-concept precision/recall treat NEW as the positive class; existing
concept accuracy is restricted to queries whose gold is a real concept.
Ratios with a zero denominator are reported as None (rendered "n/a"), never
silently as zero.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

from .errors import DataError
from .kb import NEW, InsertionSet, Prediction, QueryAtom


@dataclass
class ConfusionCounts:
    """Counters underlying every metric; NEW is the positive class."""

    tp_nc: int = 0
    fp_nc: int = 0
    fn_nc: int = 0
    n_ec: int = 0
    correct_ec: int = 0
    total: int = 0

    def __post_init__(self):
        if self.correct_ec > self.n_ec:
            raise DataError("correct_ec cannot exceed n_ec")
        if self.tp_nc + self.fn_nc + self.n_ec != self.total:
            raise DataError("counts do not add up to the insertion size")


@dataclass
class MetricsReport:
    counts: ConfusionCounts
    accuracy: float
    nc_precision: float | None
    nc_recall: float | None
    nc_f1: float | None
    ec_accuracy: float | None
    per_semantic_group: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        c = self.counts
        return {
            "counts": {
                "tp_nc": c.tp_nc,
                "fp_nc": c.fp_nc,
                "fn_nc": c.fn_nc,
                "n_ec": c.n_ec,
                "correct_ec": c.correct_ec,
                "total": c.total,
            },
            "accuracy": self.accuracy,
            "nc_precision": self.nc_precision,
            "nc_recall": self.nc_recall,
            "nc_f1": self.nc_f1,
            "ec_accuracy": self.ec_accuracy,
            "per_semantic_group": dict(sorted(self.per_semantic_group.items())),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        return cls(
            counts=ConfusionCounts(**obj["counts"]),
            accuracy=obj["accuracy"],
            nc_precision=obj["nc_precision"],
            nc_recall=obj["nc_recall"],
            nc_f1=obj["nc_f1"],
            ec_accuracy=obj["ec_accuracy"],
            per_semantic_group=dict(obj.get("per_semantic_group", {})),
        )

    def to_text(self) -> str:
        def fmt(v: float | None) -> str:
            return "   n/a" if v is None else f"{100 * v:6.2f}"

        lines = [
            "metric               value",
            f"accuracy            {fmt(self.accuracy)}",
            f"new-concept P       {fmt(self.nc_precision)}",
            f"new-concept R       {fmt(self.nc_recall)}",
            f"new-concept F1      {fmt(self.nc_f1)}",
            f"existing-concept A  {fmt(self.ec_accuracy)}",
        ]
        if self.per_semantic_group:
            lines.append("")
            lines.append("semantic group accuracy")
            width = max(len(g) for g in self.per_semantic_group)
            for group in sorted(self.per_semantic_group):
                lines.append(
                    f"  {group:<{width}}  {fmt(self.per_semantic_group[group])}"
                )
        return "\n".join(lines) + "\n"


def _pair_predictions(
    predictions: list[Prediction], queries: InsertionSet
) -> list[tuple[Prediction, QueryAtom]]:
    by_id = {p.query_atom_id: p for p in predictions}
    if len(by_id) != len(predictions):
        raise DataError("duplicate predictions for one query atom")
    missing = [q.atom_id for q in queries if q.atom_id not in by_id]
    extra = set(by_id) - {q.atom_id for q in queries}
    if missing or extra:
        raise DataError(
            f"prediction/query mismatch: {len(missing)} missing, {len(extra)} extra"
        )
    return [(by_id[q.atom_id], q) for q in queries]


def confusion_counts(
    predictions: list[Prediction], queries: InsertionSet
) -> ConfusionCounts:
    tp = fp = fn = n_ec = correct_ec = 0
    for pred, q in _pair_predictions(predictions, queries):
        if q.gold is None:
            raise DataError(f"query {q.atom_id!r} has no gold label")
        if q.gold == NEW:
            if pred.predicted == NEW:
                tp += 1
            else:
                fn += 1
        else:
            n_ec += 1
            if pred.predicted == NEW:
                fp += 1
            elif pred.predicted == q.gold:
                correct_ec += 1
    return ConfusionCounts(
        tp_nc=tp,
        fp_nc=fp,
        fn_nc=fn,
        n_ec=n_ec,
        correct_ec=correct_ec,
        total=len(queries),
    )


def compute_metrics(
    predictions: list[Prediction], queries: InsertionSet
) -> MetricsReport:
    """Exact metric formulas over one prediction per gold query."""
    counts = confusion_counts(predictions, queries)

    def ratio(num: int, den: int) -> float | None:
        return num / den if den else None

    precision = ratio(counts.tp_nc, counts.tp_nc + counts.fp_nc)
    recall = ratio(counts.tp_nc, counts.tp_nc + counts.fn_nc)
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0.0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)

    group_total: dict[str, int] = {}
    group_hit: dict[str, int] = {}
    for pred, q in _pair_predictions(predictions, queries):
        group_total[q.semantic_group] = group_total.get(q.semantic_group, 0) + 1
        if pred.predicted == q.gold:
            group_hit[q.semantic_group] = group_hit.get(q.semantic_group, 0) + 1
    per_group = {
        g: group_hit.get(g, 0) / n for g, n in group_total.items()
    }

    return MetricsReport(
        counts=counts,
        accuracy=(counts.tp_nc + counts.correct_ec) / counts.total
        if counts.total
        else 0.0,
        nc_precision=precision,
        nc_recall=recall,
        nc_f1=f1,
        ec_accuracy=ratio(counts.correct_ec, counts.n_ec),
        per_semantic_group=per_group,
    )


def stratified_split(
    queries: InsertionSet, ratios: dict[str, float], seed: int = 0
) -> dict[str, InsertionSet]:
    """Split the batch into labelled subsets, stratified by semantic group.

    Within every group the subset sizes follow the ratios with
    largest-remainder rounding (remainders tie toward earlier splits), so
    each is within one of exact proportion.  The shuffle is seeded;
    subsets preserve the original batch order.
    """
    if not ratios:
        raise DataError("no split ratios given")
    if any(r <= 0 for r in ratios.values()):
        raise DataError("split ratios must be positive")
    if abs(sum(ratios.values()) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {sum(ratios.values())}")

    names = list(ratios)
    rng = random.Random(seed)
    groups: dict[str, list[QueryAtom]] = {}
    for q in queries:
        groups.setdefault(q.semantic_group, []).append(q)

    assignment: dict[str, str] = {}  # atom_id -> split name
    for group in sorted(groups):
        members = groups[group][:]
        rng.shuffle(members)
        n = len(members)
        exact = [ratios[name] * n for name in names]
        sizes = [int(e) for e in exact]
        short = n - sum(sizes)
        remainder_order = sorted(
            range(len(names)), key=lambda i: (-(exact[i] - sizes[i]), i)
        )
        for i in remainder_order[:short]:
            sizes[i] += 1
        pos = 0
        for name, size in zip(names, sizes):
            for q in members[pos : pos + size]:
                assignment[q.atom_id] = name
            pos += size

    return {
        name: InsertionSet(q for q in queries if assignment[q.atom_id] == name)
        for name in names
    }


def calibration_bins(
    predictions: list[Prediction],
    queries: InsertionSet,
    bin_width: float = 0.1,
) -> list[dict]:
    """Confidence-bin table: [0,0.1), ..., [0.9,1.0], last bin closed.

    Each row reports the bin bounds, prediction count, and accuracy within
    the bin (None when empty).  Counts always sum to the batch size.
    """
    if not 0.0 < bin_width <= 1.0:
        raise DataError(f"bin width must be in (0, 1], got {bin_width}")
    n_bins = max(1, round(1.0 / bin_width))
    counts = [0] * n_bins
    hits = [0] * n_bins
    for pred, q in _pair_predictions(predictions, queries):
        idx = min(int(pred.confidence / bin_width), n_bins - 1)
        counts[idx] += 1
        hits[idx] += pred.predicted == q.gold
    return [
        {
            "lo": i * bin_width,
            "hi": min((i + 1) * bin_width, 1.0),
            "count": counts[i],
            "accuracy": hits[i] / counts[i] if counts[i] else None,
        }
        for i in range(n_bins)
    ]


CORRECTION_TYPES = ("concept_linking", "re_ranking", "new_concept_identification")


def correction_analysis(
    preds_a: list[Prediction],
    preds_b: list[Prediction],
    queries: InsertionSet,
) -> dict[str, int]:
    """Categorize the queries method B fixes relative to method A.

    Over queries where A is wrong and B is right: ``concept_linking`` means
    A said NEW but the atom belongs to an existing concept; ``re_ranking``
    means A picked the wrong concept; ``new_concept_identification`` means
    A linked an atom that is actually new.  The three categories partition
    the corrected set.
    """
    paired_a = dict(
        (p.query_atom_id, p) for p, _ in _pair_predictions(preds_a, queries)
    )
    counts = dict.fromkeys(CORRECTION_TYPES, 0)
    corrected = 0
    for pred_b, q in _pair_predictions(preds_b, queries):
        pred_a = paired_a[q.atom_id]
        a_wrong = pred_a.predicted != q.gold
        b_right = pred_b.predicted == q.gold
        if not (a_wrong and b_right):
            continue
        corrected += 1
        if q.gold == NEW:
            counts["new_concept_identification"] += 1
        elif pred_a.predicted == NEW:
            counts["concept_linking"] += 1
        else:
            counts["re_ranking"] += 1
    counts["total_corrections"] = corrected
    return counts


def latency_bench(
    predict_fn,
    sample: InsertionSet,
    warmup: int = 3,
    projection_atoms: int = 300_000,
) -> dict:
    """Wall-clock mean per atom, plus the projected minutes for a full run.

    ``predict_fn`` takes one query atom.  A few warmup calls run first so
    lazy caches do not land in the measurement.
    """
    if len(sample) == 0:
        raise DataError("latency benchmark needs a non-empty sample")
    for q in list(sample)[: min(warmup, len(sample))]:
        predict_fn(q)
    start = time.perf_counter()
    for q in sample:
        predict_fn(q)
    elapsed = time.perf_counter() - start
    ms_per_atom = elapsed * 1000.0 / len(sample)
    return {
        "sample_size": len(sample),
        "ms_per_atom": ms_per_atom,
        "projected_minutes": ms_per_atom * projection_atoms / 60_000.0,
    }
