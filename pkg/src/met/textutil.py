"""Text normalization shared by the taxonomy index, extraction counters and matcher."""

from __future__ import annotations

import re
import unicodedata

_WS = re.compile(r"\s+")

# Sentence boundary: ., ?, ! or newline. Documents may arrive pre-segmented
# instead, in which case this is never called.
_SENT_BOUNDARY = re.compile(r"[.?!\n]+")


def normalize_name(name: str) -> str:
    """Canonical form used for counting and index keys.

    Unicode NFC, casefold, internal whitespace collapsed to single spaces,
    outer whitespace stripped. Display casing is tracked separately.
    """
    s = unicodedata.normalize("NFC", name).casefold()
    return _WS.sub(" ", s).strip()


def split_sentences(text: str) -> list[str]:
    """Split raw document text into trimmed, non-empty sentences."""
    return [part.strip() for part in _SENT_BOUNDARY.split(text) if part.strip()]
