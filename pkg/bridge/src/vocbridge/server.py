"""Pair-scorer server speaking the engine's JSON-lines protocol.

Request::

    {"id": ..., "query": "<text>", "candidates": ["<text>", ...]}

Response: ``{"id": ..., "logits": [...]}`` with one logit per candidate, in
order.  Logits are scaled cosine similarities between the encoded query and
each encoded candidate; the ``"NULL"`` entry is scored like any other text.
A malformed request produces ``{"id": <if known>, "error": "..."}`` and the
connection stays alive.

One request is in flight per connection; concurrency comes from multiple
connections (the socket server is threaded).  With ``record_path`` set,
every (request, logits) pair is appended to a JSONL file that the engine
can replay without the bridge.
"""

from __future__ import annotations

import json
import logging
import socketserver
import sys
import threading

import numpy as np

from .config import BridgeConfig
from .encoders import build_encoder

logger = logging.getLogger(__name__)


class PairScorer:
    """Scores (query, candidates) requests with a shared encoder."""

    def __init__(self, config: BridgeConfig):
        config.validate()
        self.config = config
        self.encoder = build_encoder(config)
        self._record_lock = threading.Lock()
        self._record_fh = (
            open(config.record_path, "w", encoding="utf-8", newline="")
            if config.record_path
            else None
        )

    def score(self, query: str, candidates: list[str]) -> list[float]:
        if not candidates:
            return []
        vectors = self.encoder.encode([query] + candidates).astype(np.float64)
        norms = np.linalg.norm(vectors, axis=1)
        norms[norms == 0.0] = 1.0
        vectors /= norms[:, None]
        cosines = vectors[1:] @ vectors[0]
        logits = self.config.logit_scale * cosines
        return [float(v) for v in logits]

    def handle_line(self, line: str) -> dict:
        """One request line -> one response object (never raises)."""
        request_id = None
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request must be a JSON object")
            request_id = request.get("id")
            query = request["query"]
            candidates = request["candidates"]
            if not isinstance(query, str):
                raise ValueError("'query' must be a string")
            if not isinstance(candidates, list) or not all(
                isinstance(c, str) for c in candidates
            ):
                raise ValueError("'candidates' must be a list of strings")
            logits = self.score(query, candidates)
            if not all(np.isfinite(logits)):
                raise ValueError("encoder produced a non-finite logit")
            response = {"id": request_id, "logits": logits}
            self._record(request_id, query, candidates, logits)
            return response
        except Exception as exc:
            logger.warning("bad request: %s", exc)
            return {"id": request_id, "error": str(exc)}

    def _record(self, request_id, query, candidates, logits) -> None:
        if self._record_fh is None:
            return
        record = {
            "id": request_id,
            "query": query,
            "candidates": candidates,
            "logits": logits,
        }
        with self._record_lock:
            self._record_fh.write(json.dumps(record, ensure_ascii=False) + "\n")
            self._record_fh.flush()

    def close(self) -> None:
        if self._record_fh is not None:
            self._record_fh.close()


def serve_stdio(scorer: PairScorer, stdin=None, stdout=None) -> int:
    """Blocking stdio loop; returns when stdin closes."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for raw in stdin:
        line = raw.strip()
        if not line:
            continue
        response = scorer.handle_line(line)
        stdout.write(json.dumps(response, ensure_ascii=False) + "\n")
        stdout.flush()
    return 0


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        scorer: PairScorer = self.server.scorer  # type: ignore[attr-defined]
        for raw in self.rfile:
            line = raw.decode("utf-8").strip()
            if not line:
                continue
            response = scorer.handle_line(line)
            payload = (json.dumps(response, ensure_ascii=False) + "\n").encode("utf-8")
            self.wfile.write(payload)
            self.wfile.flush()


class ScorerServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, scorer: PairScorer):
        super().__init__(address, _Handler)
        self.scorer = scorer


def serve_socket(scorer: PairScorer, host: str, port: int) -> int:
    """Blocking socket server; one thread per connection."""
    with ScorerServer((host, port), scorer) as server:
        bound = server.server_address
        logger.info("scorer listening on %s:%d", bound[0], bound[1])
        print(f"listening {bound[0]}:{bound[1]}", file=sys.stderr, flush=True)
        server.serve_forever()
    return 0
