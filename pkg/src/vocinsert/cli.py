"""Command-line interface: one subcommand per pipeline stage.

Stages write inspectable artifacts (closure dump, candidate dump, theta,
weights, predictions, reports) so a full run can be replayed or audited
piecewise.  Exit codes: 0 success, 2 config error, 3 data error, 4 scorer
protocol error.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from pathlib import Path

from . import __version__, pipeline
from .candidates import augmented_rule_predict, dump_candidates, generate
from .errors import ConfigError, DataError, EngineError, ScorerProtocolError
from .kb import InsertionSet, kb_stats, load_insertion_set, load_kb, save_insertion_set
from .metrics import (
    MetricsReport,
    calibration_bins,
    compute_metrics,
    correction_analysis,
    latency_bench,
    stratified_split,
)
from .pipeline import RunConfig, parse_config_file, read_predictions
from .rerank import (
    TrainingExample,
    rerank_predict,
    score_list,
    train_feature_scorer,
)
from .rules import build_closure, rule_candidates, rule_predict
from .vectors import (
    biencoder_predict,
    load_embeddings,
    missing_report,
    tune_threshold,
)

logger = logging.getLogger(__name__)

_BOOL = argparse.BooleanOptionalAction


def _add_filter_args(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--filter-rows",
        action=_BOOL,
        default=None,
        help="apply the eligibility filter while loading the KB (default on)",
    )
    p.add_argument(
        "--languages",
        default=None,
        help="comma-separated language codes kept by the filter (default ENG)",
    )
    p.add_argument("--require-active", action=_BOOL, default=None)
    p.add_argument("--require-non-suppressible", action=_BOOL, default=None)


def _add_norm_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--unicode-fold", action=_BOOL, default=None)
    p.add_argument("--strip-possessives", action=_BOOL, default=None)
    p.add_argument("--punctuation-to-space", action=_BOOL, default=None)
    p.add_argument("--sort-tokens", action=_BOOL, default=None)
    p.add_argument(
        "--stopwords", default=None, help="comma-separated tokens dropped by normalize"
    )
    p.add_argument("--matrix", default=None, help="semantic compatibility matrix TSV")


_CLI_TO_CONFIG = {
    "kb": "kb_path",
    "insertion": "insertion_path",
    "embeddings": "embeddings_path",
    "matrix": "matrix_path",
    "weights": "weights_path",
    "scorer": "scorer_endpoint",
    "theta_file": "theta_path",
    "out_dir": "output_dir",
    "dump_candidates": "dump_candidates_path",
    "dump_closure": "dump_closure_path",
}


def _merged_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file < explicit flags."""
    known = set(RunConfig.__dataclass_fields__)
    merged: dict = {}
    if getattr(args, "config", None):
        from_file = parse_config_file(args.config)
        unknown = set(from_file) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(from_file)
    for key, value in vars(args).items():
        if value is None:
            continue
        name = _CLI_TO_CONFIG.get(key, key)
        if name not in known:
            continue  # subcommand-specific argument, not part of the run config
        if name in ("stopwords", "languages") and isinstance(value, str):
            value = tuple(t for t in value.split(",") if t) if value != "all" else ()
        merged[name] = value
    for name in ("languages", "stopwords"):
        if name in merged and not isinstance(merged[name], tuple):
            raw = merged[name]
            merged[name] = tuple(raw) if isinstance(raw, (list, tuple)) else (str(raw),)
    return RunConfig(**merged)


def _load_corpus(args, config: RunConfig | None = None, with_queries: bool = True):
    cfg = config if config is not None else _merged_config(args)
    kb = load_kb(cfg.kb_path, cfg.kb_filter())
    queries = None
    if with_queries and cfg.insertion_path:
        queries = load_insertion_set(cfg.insertion_path, kb)
    return cfg, kb, queries


def _cmd_ingest(args) -> int:
    cfg, kb, queries = _load_corpus(args)
    stats = kb_stats(kb, queries)
    stats["filtered_atoms"] = kb.filtered_atom_count
    stats["dropped_concepts"] = kb.dropped_concept_count
    text = json.dumps(stats, indent=2) + "\n"
    if args.stats_out:
        Path(args.stats_out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def _cmd_split(args) -> int:
    ratios: dict[str, float] = {}
    for part in args.ratios.split(","):
        name, _, value = part.partition("=")
        if not name or not value:
            raise ConfigError(f"bad ratio spec {part!r}; use name=fraction")
        ratios[name.strip()] = float(value)
    queries = load_insertion_set(args.insertion)
    splits = stratified_split(queries, ratios, seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, subset in splits.items():
        path = out_dir / f"{name}.tsv"
        save_insertion_set(subset, path)
        sys.stdout.write(f"{name}\t{len(subset)}\t{path}\n")
    return 0


def _cmd_closure(args) -> int:
    cfg, kb, queries = _load_corpus(args)
    closure = build_closure(
        kb, queries or (), cfg.norm_config(), pipeline._load_compat(cfg)
    )
    closure.dump_tsv(args.out)
    sys.stdout.write(
        json.dumps(
            {
                "atoms": len(closure),
                "classes": closure.num_classes,
                "merges": len(closure.merges),
                "dump": str(args.out),
            }
        )
        + "\n"
    )
    return 0


def _cmd_index(args) -> int:
    cfg, kb, queries = _load_corpus(args)
    store = load_embeddings(cfg.embeddings_path)
    report = missing_report(store, kb, queries)
    report["count"] = len(store)
    report["dim"] = store.dim
    text = json.dumps(report, indent=2) + "\n"
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0 if not report["kb_missing"] and not report.get("query_missing") else 3


def _cmd_tune_threshold(args) -> int:
    cfg, kb, _ = _load_corpus(args, with_queries=False)
    train = load_insertion_set(args.train, kb)
    store = load_embeddings(cfg.embeddings_path)
    threshold = tune_threshold(store, train, kb, objective=args.objective)
    threshold.save(args.out)
    sys.stdout.write(json.dumps(threshold.to_json()) + "\n")
    return 0


def _cmd_predict(args) -> int:
    if args.manifest:
        outputs = pipeline.run_from_manifest(args.manifest)
    else:
        outputs = pipeline.run(_merged_config(args))
    sys.stdout.write(json.dumps(outputs, indent=2) + "\n")
    return 0


def _build_training_examples(cfg, kb, queries, store, kb_store):
    norm_cfg = cfg.norm_config()
    compat = pipeline._load_compat(cfg)
    closure = build_closure(kb, queries, norm_cfg, compat)
    examples = []
    for q in queries:
        if q.gold is None:
            raise DataError(f"training query {q.atom_id!r} has no gold label")
        rule_set = rule_candidates(q, closure, kb)
        clist = generate(q, rule_set, store, kb, k=cfg.k, kb_store=kb_store)
        examples.append(TrainingExample(query=q, clist=clist, gold=q.gold))
    return examples


def _cmd_train_scorer(args) -> int:
    cfg, kb, _ = _load_corpus(args, with_queries=False)
    store = load_embeddings(cfg.embeddings_path)
    kb_store = store.subset(kb.atom_ids())
    train = load_insertion_set(args.train, kb)
    examples = _build_training_examples(cfg, kb, train, store, kb_store)
    val_examples = None
    if args.val:
        val = load_insertion_set(args.val, kb)
        val_examples = _build_training_examples(cfg, kb, val, store, kb_store)
    if args.dump_candidates:
        dump_candidates((ex.clist for ex in examples), args.dump_candidates)
    weights = train_feature_scorer(
        examples,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        warmup_ratio=args.warmup_ratio,
        seed=cfg.seed,
        val_examples=val_examples,
        norm_cfg=cfg.norm_config(),
    )
    weights.save(args.out)
    sys.stdout.write(json.dumps({"weights": str(args.out)}) + "\n")
    return 0


def _cmd_evaluate(args) -> int:
    queries = load_insertion_set(args.insertion)
    predictions = read_predictions(args.predictions)
    report = compute_metrics(predictions, queries)
    calib = calibration_bins(predictions, queries)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.json").write_text(
            json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8"
        )
        (out_dir / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
        (out_dir / "calibration.json").write_text(
            json.dumps(calib, indent=2) + "\n", encoding="utf-8"
        )
    sys.stdout.write(report.to_text())
    return 0


def _cmd_compare(args) -> int:
    queries = load_insertion_set(args.insertion)
    preds_a = read_predictions(args.a)
    preds_b = read_predictions(args.b)
    counts = correction_analysis(preds_a, preds_b, queries)
    sys.stdout.write(json.dumps(counts, indent=2) + "\n")
    return 0


def _cmd_bench(args) -> int:
    cfg, kb, queries = _load_corpus(args)
    if queries is None or len(queries) == 0:
        raise DataError("bench needs a non-empty insertion set")
    rng = random.Random(cfg.seed)
    sample_queries = list(queries)
    if args.sample and args.sample < len(sample_queries):
        sample_queries = rng.sample(sample_queries, args.sample)
    sample = InsertionSet(sample_queries)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    store = load_embeddings(cfg.embeddings_path) if cfg.embeddings_path else None
    kb_store = store.subset(kb.atom_ids()) if store is not None else None
    norm_cfg = cfg.norm_config()
    compat = pipeline._load_compat(cfg)
    closure = None
    if any(m in ("rba", "rba+rank", "rerank") for m in methods):
        closure = build_closure(kb, queries, norm_cfg, compat)

    results = {}
    for method in methods:
        if method == "rba":
            fn = lambda q: rule_predict(q, closure, kb, seed=cfg.seed)
        elif method == "biencoder":
            theta = cfg.theta if cfg.theta is not None else 0.5
            fn = lambda q: biencoder_predict(q, store, kb, theta, kb_store=kb_store)
        elif method == "rba+rank":
            fn = lambda q: augmented_rule_predict(
                q, rule_candidates(q, closure, kb), store, kb
            )
        elif method == "rerank":
            scorer = pipeline._make_scorer(cfg)

            def fn(q, _scorer=scorer):
                rule_set = rule_candidates(q, closure, kb)
                clist = generate(q, rule_set, store, kb, k=cfg.k, kb_store=kb_store)
                return rerank_predict(q, score_list(q, clist, _scorer))

        else:
            raise ConfigError(f"unknown method {method!r}")
        results[method] = latency_bench(fn, sample)
    sys.stdout.write(json.dumps(results, indent=2) + "\n")
    return 0


def _cmd_report(args) -> int:
    report = MetricsReport.from_json(
        json.loads(Path(args.metrics).read_text(encoding="utf-8"))
    )
    sys.stdout.write(report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vocinsert",
        description="Vocabulary insertion engine: link new atoms to concepts "
        "or flag them as new.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate inputs and print corpus stats")
    p.add_argument("--kb", required=True)
    p.add_argument("--insertion")
    p.add_argument("--stats-out")
    _add_filter_args(p)
    p.set_defaults(fn=_cmd_ingest)

    p = sub.add_parser("split", help="stratified split of an insertion set")
    p.add_argument("--insertion", required=True)
    p.add_argument("--ratios", required=True, help="e.g. train=0.5,dev=0.25,test=0.25")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_split)

    p = sub.add_parser("closure", help="build and dump the synonymy closure")
    p.add_argument("--kb", required=True)
    p.add_argument("--insertion")
    p.add_argument("--out", required=True)
    _add_filter_args(p)
    _add_norm_args(p)
    p.set_defaults(fn=_cmd_closure)

    p = sub.add_parser("index", help="validate embeddings against the corpus")
    p.add_argument("--kb", required=True)
    p.add_argument("--insertion")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--report")
    _add_filter_args(p)
    p.set_defaults(fn=_cmd_index)

    p = sub.add_parser("tune-threshold", help="fit the bi-encoder cut-off")
    p.add_argument("--kb", required=True)
    p.add_argument("--train", required=True, help="labelled insertion TSV")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--objective", choices=("accuracy", "nc_f1"), default="accuracy")
    p.add_argument("--out", required=True)
    _add_filter_args(p)
    p.set_defaults(fn=_cmd_tune_threshold)

    p = sub.add_parser("predict", help="run a method over an insertion set")
    p.add_argument("--config", help="key=value config file; flags win")
    p.add_argument("--manifest", help="re-run a recorded manifest verbatim")
    p.add_argument("--kb")
    p.add_argument("--insertion")
    p.add_argument("--method", choices=pipeline.METHODS)
    p.add_argument("--embeddings")
    p.add_argument("--weights")
    p.add_argument("--scorer", help="scorer endpoint: command, host:port, replay:FILE")
    p.add_argument("--theta", type=float)
    p.add_argument("--theta-file")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--scorer-retries", type=int)
    p.add_argument("--approx", action=_BOOL, default=None)
    p.add_argument("--recall-target", type=float)
    p.add_argument("--out-dir")
    p.add_argument("--dump-candidates")
    p.add_argument("--dump-closure")
    _add_filter_args(p)
    _add_norm_args(p)
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("train-scorer", help="train the built-in feature scorer")
    p.add_argument("--kb", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--warmup-ratio", type=float, default=0.1)
    p.add_argument("--dump-candidates")
    p.add_argument("--out", required=True)
    _add_filter_args(p)
    _add_norm_args(p)
    p.set_defaults(fn=_cmd_train_scorer)

    p = sub.add_parser("evaluate", help="score a prediction file against gold")
    p.add_argument("--predictions", required=True)
    p.add_argument("--insertion", required=True, help="labelled insertion TSV")
    p.add_argument("--out-dir")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("compare", help="correction analysis between two runs")
    p.add_argument("--a", required=True, help="baseline prediction TSV")
    p.add_argument("--b", required=True, help="improved prediction TSV")
    p.add_argument("--insertion", required=True)
    p.set_defaults(fn=_cmd_compare)

    p = sub.add_parser("bench", help="latency per method on a query sample")
    p.add_argument("--kb", required=True)
    p.add_argument("--insertion", required=True)
    p.add_argument("--methods", default="rba")
    p.add_argument("--sample", type=int, default=100)
    p.add_argument("--embeddings")
    p.add_argument("--weights")
    p.add_argument("--scorer")
    p.add_argument("--theta", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    _add_filter_args(p)
    _add_norm_args(p)
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("report", help="render a metrics JSON as aligned text")
    p.add_argument("--metrics", required=True)
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except ScorerProtocolError as exc:
        print(f"scorer error: {exc}", file=sys.stderr)
        return 4
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
