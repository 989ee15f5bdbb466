"""vocbridge command line: ``export`` embeddings, ``serve`` the scorer."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .config import BridgeConfig, BridgeConfigError
from .encoders import build_encoder
from .export import ExportError, export_many
from .server import PairScorer, serve_socket, serve_stdio


def _add_encoder_args(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--checkpoint",
        default="hash:dim=64",
        help="encoder id: 'hash:dim=64,seed=0' or a Hugging Face checkpoint",
    )
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-length", type=int, default=320)
    p.add_argument("--device", default="cpu")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vocbridge")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="encode atom TSVs into one UVIEMB1 file")
    p.add_argument(
        "--atoms", required=True, action="append",
        help="atom TSV path; repeatable (KB plus insertion batches)",
    )
    p.add_argument(
        "--format", choices=("kb", "insertion"), action="append",
        help="format per --atoms, in order; the last value repeats (default kb)",
    )
    p.add_argument("--out", required=True)
    _add_encoder_args(p)
    p.set_defaults(fn=_cmd_export)

    p = sub.add_parser("serve", help="run the pair-scorer endpoint")
    p.add_argument("--transport", choices=("stdio", "socket"), default="stdio")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8377)
    p.add_argument("--logit-scale", type=float, default=10.0)
    p.add_argument("--record", help="append (request, logits) pairs to this JSONL file")
    _add_encoder_args(p)
    p.set_defaults(fn=_cmd_serve)

    return parser


def _config_from(args: argparse.Namespace) -> BridgeConfig:
    return BridgeConfig(
        checkpoint=args.checkpoint,
        batch_size=args.batch_size,
        max_length=args.max_length,
        device=args.device,
        transport=getattr(args, "transport", "stdio"),
        host=getattr(args, "host", "127.0.0.1"),
        port=getattr(args, "port", 8377),
        logit_scale=getattr(args, "logit_scale", 10.0),
        record_path=getattr(args, "record", None),
    )


def _cmd_export(args) -> int:
    config = _config_from(args)
    config.validate()
    encoder = build_encoder(config)
    formats = args.format or ["kb"]
    inputs = [
        (path, formats[i] if i < len(formats) else formats[-1])
        for i, path in enumerate(args.atoms)
    ]
    summary = export_many(inputs, args.out, encoder, batch_size=config.batch_size)
    print(json.dumps({"out": args.out, **summary}))
    return 0


def _cmd_serve(args) -> int:
    scorer = PairScorer(_config_from(args))
    try:
        if scorer.config.transport == "stdio":
            return serve_stdio(scorer)
        return serve_socket(scorer, scorer.config.host, scorer.config.port)
    except KeyboardInterrupt:
        return 0
    finally:
        scorer.close()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.fn(args)
    except (BridgeConfigError, ExportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
