"""Run orchestration: configs, manifests, per-method prediction, outputs.

A run consumes a knowledge base, an insertion set, and method-specific
inputs, and leaves behind a prediction file, optional evaluation reports,
and a manifest.  The manifest records the verbatim config, a config hash,
and input digests; rerunning from an identical manifest reproduces the
prediction file byte for byte (given a fixed external scorer).
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

from . import __version__
from .candidates import augmented_rule_predict, dump_candidates, generate
from .errors import ConfigError, DataError, EngineError, ScorerProtocolError
from .kb import (
    InsertionSet,
    KbFilter,
    KnowledgeBase,
    Prediction,
    load_insertion_set,
    load_kb,
)
from .metrics import calibration_bins, compute_metrics
from .normalize import CompatibilityMatrix, NormConfig
from .rerank import (
    FeatureScorer,
    FeatureScorerWeights,
    rerank_predict,
    score_list,
)
from .rules import build_closure, rule_candidates, rule_predict
from .scorers import ScorerPool, open_scorer
from .vectors import (
    ApproxIndex,
    EmbeddingStore,
    SimilarityThreshold,
    biencoder_predict,
    load_embeddings,
)

logger = logging.getLogger(__name__)

METHODS = ("rba", "biencoder", "rba+rank", "rerank")

PREDICTIONS_FILE = "predictions.tsv"
MANIFEST_FILE = "manifest.json"


@dataclass
class RunConfig:
    """Everything a run needs; serialized verbatim into the manifest."""

    kb_path: str = ""
    insertion_path: str = ""
    method: str = "rba"
    output_dir: str = ""
    embeddings_path: str | None = None
    matrix_path: str | None = None
    weights_path: str | None = None
    scorer_endpoint: str | None = None
    theta: float | None = None
    theta_path: str | None = None
    k: int = 50
    seed: int = 0
    workers: int = 1
    scorer_retries: int = 1
    approx: bool = False
    recall_target: float = 0.95
    unicode_fold: bool = True
    strip_possessives: bool = True
    punctuation_to_space: bool = True
    sort_tokens: bool = True
    stopwords: tuple[str, ...] = ()
    languages: tuple[str, ...] = ("ENG",)
    require_active: bool = True
    require_non_suppressible: bool = True
    filter_rows: bool = True
    dump_candidates_path: str | None = None
    dump_closure_path: str | None = None

    def norm_config(self) -> NormConfig:
        return NormConfig(
            unicode_fold=self.unicode_fold,
            strip_possessives=self.strip_possessives,
            punctuation_to_space=self.punctuation_to_space,
            sort_tokens=self.sort_tokens,
            stopwords=frozenset(self.stopwords),
        )

    def kb_filter(self) -> KbFilter:
        if not self.filter_rows:
            return KbFilter.none()
        return KbFilter(
            languages=frozenset(self.languages) if self.languages else None,
            require_active=self.require_active,
            require_non_suppressible=self.require_non_suppressible,
        )

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(
                f"unknown method {self.method!r}; expected one of {METHODS}"
            )
        if not self.kb_path:
            raise ConfigError("kb_path is required")
        if not self.insertion_path:
            raise ConfigError("insertion_path is required")
        if not self.output_dir:
            raise ConfigError("output_dir is required")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        needs_embeddings = self.method in ("biencoder", "rba+rank", "rerank")
        if needs_embeddings and not self.embeddings_path:
            raise ConfigError(f"method {self.method!r} requires embeddings_path")
        if self.method == "biencoder" and self.theta is None and not self.theta_path:
            raise ConfigError("method 'biencoder' requires theta or theta_path")
        if self.method == "rerank" and not self.weights_path and not self.scorer_endpoint:
            raise ConfigError(
                "method 'rerank' requires weights_path or scorer_endpoint"
            )

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["stopwords"] = list(self.stopwords)
        obj["languages"] = list(self.languages)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        kwargs = dict(obj)
        kwargs["stopwords"] = tuple(kwargs.get("stopwords", ()))
        kwargs["languages"] = tuple(kwargs.get("languages", ("ENG",)))
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(kwargs) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)


def parse_config_file(path: str | Path) -> dict:
    """key=value lines; '#' starts a comment; values are JSON-ish scalars."""
    result: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected key=value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            try:
                result[key] = json.loads(value)
            except json.JSONDecodeError:
                result[key] = value
    return result


def _sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config.to_json(), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_predictions(predictions: list[Prediction], path: str | Path) -> None:
    """TSV ``atom_id  predicted  confidence`` with the literal NEW."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for p in predictions:
            fh.write(f"{p.query_atom_id}\t{p.predicted}\t{p.confidence:.6f}\n")


def read_predictions(path: str | Path) -> list[Prediction]:
    predictions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataError(f"{path}: line {lineno}: expected 3 columns")
            try:
                confidence = float(fields[2])
            except ValueError:
                raise DataError(
                    f"{path}: line {lineno}: bad confidence {fields[2]!r}"
                ) from None
            predictions.append(Prediction(fields[0], fields[1], confidence))
    return predictions


class _Stage:
    """Labels errors with the pipeline stage they came from."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        logger.info("stage: %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, EngineError):
            message = f"[{self.name}] {exc}"
            if isinstance(exc, ScorerProtocolError):
                raise ScorerProtocolError(message, query_id=exc.query_id) from exc
            raise type(exc)(message) from exc
        return False


def _load_compat(config: RunConfig) -> CompatibilityMatrix:
    if config.matrix_path:
        return CompatibilityMatrix.from_tsv(config.matrix_path)
    return CompatibilityMatrix.identity()


def _make_scorer(config: RunConfig):
    if config.weights_path:
        weights = FeatureScorerWeights.load(config.weights_path)
        return FeatureScorer(weights, norm_cfg=config.norm_config())
    return ScorerPool(
        lambda: open_scorer(config.scorer_endpoint), size=max(1, config.workers)
    )


def _score_with_retry(q, clist, scorer, retries: int):
    attempts = retries + 1
    for attempt in range(attempts):
        try:
            return score_list(q, clist, scorer)
        except ScorerProtocolError:
            if attempt == attempts - 1:
                raise
            logger.warning("retrying scorer request for query %s", q.atom_id)


def predict_all(
    config: RunConfig,
    kb: KnowledgeBase,
    queries: InsertionSet,
    store: EmbeddingStore | None,
) -> list[Prediction]:
    """Run the configured method over the whole batch, in batch order."""
    norm_cfg = config.norm_config()
    compat = _load_compat(config)

    closure = None
    if config.method in ("rba", "rba+rank", "rerank"):
        with _Stage("closure"):
            closure = build_closure(kb, queries, norm_cfg, compat)
            if config.dump_closure_path:
                closure.dump_tsv(config.dump_closure_path)

    kb_store = None
    index = None
    if config.method in ("biencoder", "rba+rank", "rerank"):
        with _Stage("embeddings"):
            assert store is not None
            kb_store = store.subset(kb.atom_ids())
            absent = store.missing(q.atom_id for q in queries)
            if absent:
                preview = ", ".join(absent[:5])
                raise DataError(
                    f"{len(absent)} query atom(s) lack embeddings (e.g. {preview})"
                )
            if config.approx:
                index = ApproxIndex.build(
                    kb_store,
                    recall_target=config.recall_target,
                    seed=config.seed,
                )

    if config.method == "rba":
        with _Stage("predict/rba"):
            return [rule_predict(q, closure, kb, seed=config.seed) for q in queries]

    if config.method == "biencoder":
        with _Stage("predict/biencoder"):
            if config.theta is not None:
                theta = SimilarityThreshold(theta=config.theta)
            else:
                theta = SimilarityThreshold.load(config.theta_path)
            return [
                biencoder_predict(q, store, kb, theta, kb_store=kb_store, index=index)
                for q in queries
            ]

    if config.method == "rba+rank":
        with _Stage("predict/rba+rank"):
            return [
                augmented_rule_predict(
                    q, rule_candidates(q, closure, kb), store, kb
                )
                for q in queries
            ]

    # rerank
    with _Stage("predict/rerank"):
        scorer = _make_scorer(config)
        try:

            def one(q):
                rule_set = rule_candidates(q, closure, kb)
                clist = generate(
                    q, rule_set, store, kb, k=config.k, kb_store=kb_store, index=index
                )
                scored = _score_with_retry(q, clist, scorer, config.scorer_retries)
                return clist, rerank_predict(q, scored)

            if config.workers > 1:
                with ThreadPoolExecutor(max_workers=config.workers) as pool:
                    results = list(pool.map(one, queries))
            else:
                results = [one(q) for q in queries]
        finally:
            if hasattr(scorer, "close"):
                scorer.close()
        if config.dump_candidates_path:
            dump_candidates(
                (clist for clist, _ in results), config.dump_candidates_path
            )
        return [pred for _, pred in results]


def run(config: RunConfig) -> dict:
    """Execute a full prediction run; returns paths of the written outputs.

    Partial outputs are removed when any stage fails.
    """
    with _Stage("config"):
        config.validate()
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    try:
        with _Stage("load"):
            kb = load_kb(config.kb_path, config.kb_filter())
            queries = load_insertion_set(config.insertion_path, kb)
            store = (
                load_embeddings(config.embeddings_path)
                if config.embeddings_path
                else None
            )

        predictions = predict_all(config, kb, queries, store)
        if len(predictions) != len(queries):
            raise DataError(
                f"{len(predictions)} predictions for {len(queries)} queries"
            )

        with _Stage("write"):
            pred_path = out_dir / PREDICTIONS_FILE
            write_predictions(predictions, pred_path)
            written.append(pred_path)

            outputs = {"predictions": str(pred_path)}
            if queries.has_gold and len(queries) > 0:
                report = compute_metrics(predictions, queries)
                metrics_json = out_dir / "metrics.json"
                metrics_json.write_text(
                    json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8"
                )
                written.append(metrics_json)
                metrics_txt = out_dir / "metrics.txt"
                metrics_txt.write_text(report.to_text(), encoding="utf-8")
                written.append(metrics_txt)
                calib = calibration_bins(predictions, queries)
                calib_path = out_dir / "calibration.json"
                calib_path.write_text(
                    json.dumps(calib, indent=2) + "\n", encoding="utf-8"
                )
                written.append(calib_path)
                outputs.update(
                    metrics=str(metrics_json),
                    metrics_text=str(metrics_txt),
                    calibration=str(calib_path),
                )

            manifest = build_manifest(config)
            manifest_path = out_dir / MANIFEST_FILE
            manifest_path.write_text(
                json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                encoding="utf-8",
            )
            written.append(manifest_path)
            outputs["manifest"] = str(manifest_path)
        return outputs
    except BaseException:
        for path in written:
            try:
                path.unlink()
            except OSError:
                pass
        raise


def build_manifest(config: RunConfig) -> dict:
    inputs = {}
    for name, path in (
        ("kb", config.kb_path),
        ("insertion", config.insertion_path),
        ("embeddings", config.embeddings_path),
        ("matrix", config.matrix_path),
        ("weights", config.weights_path),
        ("theta", config.theta_path),
    ):
        if path:
            inputs[name] = {"path": str(path), "sha256": _sha256(path)}
    return {
        "engine": {"name": "vocinsert", "version": __version__},
        "config": config.to_json(),
        "config_hash": config_hash(config),
        "inputs": inputs,
        "formats": {
            "predictions": "tsv-v1",
            "embeddings": "UVIEMB1",
            "weights": "feature-scorer-v1",
        },
    }


def run_from_manifest(manifest_path: str | Path) -> dict:
    """Re-execute a recorded run; same manifest, byte-identical predictions."""
    obj = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    config = RunConfig.from_json(obj["config"])
    return run(config)
