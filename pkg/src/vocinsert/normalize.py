"""Lexical normalization and semantic-group compatibility.

``normalize`` reduces a term to a canonical form so that surface variants
("Addison's Disease", "disease, addison") collide.  The pipeline, in order:
Unicode compatibility decomposition with combining marks stripped, casefold,
possessive "'s" removal, punctuation mapped to spaces, whitespace collapse,
stopword removal, lexicographic token sort.  Each step is switchable so the
procedure stays reproducible under any configuration.

``CompatibilityMatrix`` answers whether two semantic groups may be treated
as referring to the same kind of thing.  The default matrix is the identity
(a group is only compatible with itself); a TSV file can widen it.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from pathlib import Path

from .errors import DataError

_POSSESSIVE_RE = re.compile(r"['’]s\b")


@dataclass(frozen=True)
class NormConfig:
    """Switches for the normalization pipeline; equal config and input
    always produce equal output."""

    unicode_fold: bool = True
    strip_possessives: bool = True
    punctuation_to_space: bool = True
    sort_tokens: bool = True
    stopwords: frozenset[str] = frozenset()


DEFAULT_NORM = NormConfig()


def _is_punct_or_symbol(ch: str) -> bool:
    return unicodedata.category(ch)[0] in ("P", "S")


def normalize(s: str, cfg: NormConfig = DEFAULT_NORM) -> str:
    """Normalize a term; idempotent for every configuration."""
    if cfg.unicode_fold:
        s = unicodedata.normalize("NFKD", s)
        s = "".join(ch for ch in s if not unicodedata.combining(ch))
    s = s.casefold()
    if cfg.strip_possessives:
        s = _POSSESSIVE_RE.sub("", s)
    if cfg.punctuation_to_space:
        s = "".join(" " if _is_punct_or_symbol(ch) else ch for ch in s)
    tokens = s.split()
    if cfg.stopwords:
        tokens = [t for t in tokens if t not in cfg.stopwords]
    if cfg.sort_tokens:
        tokens.sort()
    return " ".join(tokens)


class CompatibilityMatrix:
    """Symmetric, reflexive lookup over unordered semantic-group pairs.

    With ``groups=None`` the matrix is open-world: any group is accepted and
    is compatible exactly with itself plus any listed pair.  A matrix loaded
    from a file is closed-world: looking up a group the file never mentions
    is an error, which catches typos in user corpora.
    """

    def __init__(self, pairs=(), groups=None):
        self._pairs: set[frozenset[str]] = set()
        mentioned: set[str] = set()
        for g1, g2 in pairs:
            mentioned.update((g1, g2))
            if g1 != g2:
                self._pairs.add(frozenset((g1, g2)))
        if groups is not None:
            mentioned.update(groups)
            self._groups: frozenset[str] | None = frozenset(mentioned)
        else:
            self._groups = None

    @classmethod
    def identity(cls) -> "CompatibilityMatrix":
        return cls()

    @classmethod
    def from_tsv(cls, path: str | Path) -> "CompatibilityMatrix":
        """Parse ``group1<TAB>group2<TAB>1`` rows; 0 rows only register groups."""
        pairs = []
        groups: set[str] = set()
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\r\n")
                if not line:
                    continue
                fields = line.split("\t")
                if len(fields) != 3 or fields[2] not in ("0", "1"):
                    raise DataError(
                        f"{path}: line {lineno}: expected 'group1<TAB>group2<TAB>0|1'"
                    )
                groups.update(fields[:2])
                if fields[2] == "1":
                    pairs.append((fields[0], fields[1]))
        return cls(pairs, groups)

    def compatible(self, g1: str, g2: str) -> bool:
        if self._groups is not None:
            for g in (g1, g2):
                if g not in self._groups:
                    raise DataError(f"semantic group {g!r} unknown to the matrix")
        return g1 == g2 or frozenset((g1, g2)) in self._pairs
