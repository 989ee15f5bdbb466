"""Vocabulary insertion engine.

Links each new terminology atom to an existing concept of a knowledge base
or flags it as a new concept, via rule-based synonymy closure, embedding
nearest-neighbor baselines, and null-aware candidate re-ranking, plus the
evaluation harness to compare them.
"""

__version__ = "0.1.0"
