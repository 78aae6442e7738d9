"""Tokenization and answer normalization shared by the reasoner and the metrics.

Both the closed-answer normalizer and the strict scoring rule hinge on the
same tokenization, so it lives here once: lowercase, split on whitespace,
strip leading/trailing punctuation from each token.
"""

from __future__ import annotations

import string
from pathlib import Path
from typing import Optional, Sequence

_EDGE_PUNCT = string.punctuation

# Default yes/no-type lexicon. Extensible via a lexicon file (one
# "token<TAB>Yes|No" line per entry) rather than hardcoding guesses.
DEFAULT_LEXICON = {"yes": "Yes", "no": "No"}


def tokenize(text: str) -> list[str]:
    """Lowercase, whitespace-split, strip punctuation off token edges.

    Tokens that are pure punctuation collapse to nothing and are dropped.
    """
    tokens = []
    for raw in text.lower().split():
        token = raw.strip(_EDGE_PUNCT)
        if token:
            tokens.append(token)
    return tokens


def load_lexicon(path: str | Path) -> dict[str, str]:
    """Load a yes/no lexicon file: ``token<TAB>Yes|No`` lines, # comments."""
    lexicon = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in ("Yes", "No"):
            raise ValueError(f"{path}:{lineno}: expected 'token<TAB>Yes|No', got {line!r}")
        lexicon[parts[0].lower()] = parts[1]
    if not lexicon:
        raise ValueError(f"{path}: empty lexicon")
    return lexicon


def first_yes_no(text: str, lexicon: Optional[dict[str, str]] = None) -> Optional[str]:
    """Map the first yes/no-type token in ``text`` to "Yes"/"No", or None.

    Only the first occurrence counts: a long response containing both words
    is pinned to whichever comes first.
    """
    lexicon = lexicon if lexicon is not None else DEFAULT_LEXICON
    for token in tokenize(text):
        if token in lexicon:
            return lexicon[token]
    return None


def option_labels(options: Sequence[str]) -> list[str]:
    """Letter labels A, B, C, ... for an option list."""
    if len(options) > 26:
        raise ValueError("more than 26 options are not supported")
    return [string.ascii_uppercase[i] for i in range(len(options))]


def first_option_label(text: str, options: Sequence[str]) -> Optional[str]:
    """Label of the first token matching an option label letter or an option's
    exact text (case-insensitive), or None if no token matches."""
    labels = option_labels(options)
    by_letter = {label.lower(): label for label in labels}
    by_text = {opt.lower(): labels[i] for i, opt in enumerate(options)}
    for token in tokenize(text):
        if token in by_letter:
            return by_letter[token]
        if token in by_text:
            return by_text[token]
    return None
