"""Clients for the external pair-scorer wire protocol, plus record/replay.

Protocol: JSON lines over a byte stream (a subprocess's standard streams or
a local TCP socket).  One request per line::

    {"id": <query_atom_id>, "query": <query_text>, "candidates": [<text>, ...]}

Candidate texts already carry their markers and the last entry is the
literal ``"NULL"``.  The response must echo the id with one logit per
candidate::

    {"id": ..., "logits": [...]}

A response carrying an ``"error"`` field, wrong arity, or a mismatched id
raises :class:`ScorerProtocolError`; the connection owner decides whether
to retry.  Each connection serves one in-flight request at a time; use a
:class:`ScorerPool` for concurrency.
"""

from __future__ import annotations

import json
import queue
import socket
import subprocess
from pathlib import Path

from .candidates import CandidateList
from .errors import ConfigError, DataError, ScorerProtocolError
from .kb import QueryAtom
from .rerank import NULL_TOKEN, format_pair


class StdioTransport:
    """Scorer subprocess spoken to over stdin/stdout."""

    def __init__(self, argv: list[str]):
        if not argv:
            raise ConfigError("empty scorer command")
        self.argv = argv
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
            )
        except OSError as exc:
            raise ScorerProtocolError(f"cannot launch scorer {argv[0]!r}: {exc}") from exc

    def request(self, obj: dict) -> dict:
        proc = self._proc
        if proc.poll() is not None:
            raise ScorerProtocolError(
                f"scorer process exited with code {proc.returncode}",
                query_id=obj.get("id"),
            )
        try:
            proc.stdin.write(json.dumps(obj, ensure_ascii=False) + "\n")
            proc.stdin.flush()
            line = proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise ScorerProtocolError(
                f"scorer pipe failed: {exc}", query_id=obj.get("id")
            ) from exc
        if not line:
            raise ScorerProtocolError(
                "scorer closed its output stream", query_id=obj.get("id")
            )
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise ScorerProtocolError(
                f"scorer sent invalid JSON: {exc}", query_id=obj.get("id")
            ) from exc

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self._proc.kill()


class SocketTransport:
    """Scorer reached over a local TCP socket, newline-delimited JSON."""

    def __init__(self, host: str, port: int, timeout: float = 60.0):
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ScorerProtocolError(
                f"cannot connect to scorer at {host}:{port}: {exc}"
            ) from exc
        self._reader = self._sock.makefile("r", encoding="utf-8", newline="\n")
        self._writer = self._sock.makefile("w", encoding="utf-8", newline="\n")

    def request(self, obj: dict) -> dict:
        try:
            self._writer.write(json.dumps(obj, ensure_ascii=False) + "\n")
            self._writer.flush()
            line = self._reader.readline()
        except OSError as exc:
            raise ScorerProtocolError(
                f"scorer socket failed: {exc}", query_id=obj.get("id")
            ) from exc
        if not line:
            raise ScorerProtocolError(
                "scorer closed the connection", query_id=obj.get("id")
            )
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise ScorerProtocolError(
                f"scorer sent invalid JSON: {exc}", query_id=obj.get("id")
            ) from exc

    def close(self) -> None:
        for stream in (self._writer, self._reader):
            try:
                stream.close()
            except OSError:
                pass
        self._sock.close()


class ReplayTransport:
    """Answers requests from a recorded file instead of a live scorer.

    Records are JSON lines of ``{"id", "query", "candidates", "logits"}``
    keyed by id; replay verifies the query and candidate texts still match
    what was recorded, so silent drift in the pipeline is caught.
    """

    def __init__(self, path: str | Path):
        self._records: dict[str, dict] = {}
        try:
            fh = open(path, encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot open replay file: {exc}") from exc
        with fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}: line {lineno}: invalid JSON") from exc
                self._records[rec["id"]] = rec

    def request(self, obj: dict) -> dict:
        rec = self._records.get(obj["id"])
        if rec is None:
            raise ScorerProtocolError(
                f"no recorded response for query {obj['id']!r}",
                query_id=obj["id"],
            )
        if rec["query"] != obj["query"] or rec["candidates"] != obj["candidates"]:
            raise ScorerProtocolError(
                f"recorded request for query {obj['id']!r} does not match "
                "the live request",
                query_id=obj["id"],
            )
        return {"id": rec["id"], "logits": rec["logits"]}

    def close(self) -> None:
        pass


class RecordingTransport:
    """Tees every (request, logits) pair through to a JSONL file."""

    def __init__(self, inner, path: str | Path):
        self._inner = inner
        self._fh = open(path, "w", encoding="utf-8", newline="")

    def request(self, obj: dict) -> dict:
        response = self._inner.request(obj)
        record = {
            "id": obj["id"],
            "query": obj["query"],
            "candidates": obj["candidates"],
            "logits": response.get("logits"),
        }
        self._fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        self._fh.flush()
        return response

    def close(self) -> None:
        self._fh.close()
        self._inner.close()


class ProtocolScorer:
    """Adapter giving a transport the built-in scorer's interface."""

    def __init__(self, transport):
        self._transport = transport

    def score_candidates(self, q: QueryAtom, clist: CandidateList) -> list[float]:
        has_synonyms = clist.has_preferred
        query_text, _ = format_pair(q, None, has_synonyms)
        texts = [
            format_pair(q, cand, has_synonyms)[1] for cand in clist.entries
        ]
        texts.append(NULL_TOKEN)
        response = self._transport.request(
            {"id": q.atom_id, "query": query_text, "candidates": texts}
        )
        if "error" in response:
            raise ScorerProtocolError(
                f"scorer error: {response['error']}", query_id=q.atom_id
            )
        if response.get("id") != q.atom_id:
            raise ScorerProtocolError(
                f"response id {response.get('id')!r} does not match request",
                query_id=q.atom_id,
            )
        logits = response.get("logits")
        if not isinstance(logits, list) or len(logits) != len(texts):
            raise ScorerProtocolError(
                f"expected {len(texts)} logits, got "
                f"{len(logits) if isinstance(logits, list) else type(logits).__name__}",
                query_id=q.atom_id,
            )
        try:
            return [float(v) for v in logits]
        except (TypeError, ValueError) as exc:
            raise DataError(f"non-numeric logit for query {q.atom_id!r}") from exc

    def close(self) -> None:
        self._transport.close()


class ScorerPool:
    """Fixed pool of scorer connections, one in-flight request each."""

    def __init__(self, factory, size: int = 1):
        if size < 1:
            raise ConfigError(f"pool size must be >= 1, got {size}")
        self._scorers = [factory() for _ in range(size)]
        self._idle: queue.Queue = queue.Queue()
        for s in self._scorers:
            self._idle.put(s)

    def score_candidates(self, q: QueryAtom, clist: CandidateList) -> list[float]:
        scorer = self._idle.get()
        try:
            return scorer.score_candidates(q, clist)
        finally:
            self._idle.put(scorer)

    def close(self) -> None:
        for s in self._scorers:
            s.close()


def open_scorer(endpoint: str):
    """Build a scorer from an endpoint spec.

    ``host:port`` connects a socket; ``replay:<path>`` replays a recorded
    file; anything else is a command line for a subprocess.
    """
    if endpoint.startswith("replay:"):
        return ProtocolScorer(ReplayTransport(endpoint[len("replay:") :]))
    host, sep, port = endpoint.rpartition(":")
    if sep and host and "/" not in host and " " not in host and port.isdigit():
        return ProtocolScorer(SocketTransport(host, int(port)))
    import shlex

    return ProtocolScorer(StdioTransport(shlex.split(endpoint)))
