"""Exception hierarchy shared across the engine.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
ScorerProtocolError -> 4.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all engine-raised errors."""


class ConfigError(EngineError):
    """Invalid or incomplete run configuration."""


class DataError(EngineError):
    """Malformed or inconsistent input data (TSV rows, embeddings, labels)."""


class ScorerProtocolError(EngineError):
    """A scorer endpoint failed to answer a request correctly.

    Retriable: the query that triggered it can be resent on a healthy
    connection.  ``query_id`` identifies the request that failed.
    """

    def __init__(self, message: str, query_id: str | None = None):
        super().__init__(message)
        self.query_id = query_id
