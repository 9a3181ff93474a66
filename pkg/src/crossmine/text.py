"""Canonical text normalization shared by the lexical scorer and the tokenizer."""

from __future__ import annotations

import hashlib
import re

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def split_tokens(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation boundaries."""
    return _TOKEN_RE.findall(text.lower())


def stable_token_hash(token: str) -> int:
    """Process-independent 64-bit hash of a token.

    Python's builtin hash() is salted per process, which would break
    run-to-run reproducibility of hashed vocabularies.
    """
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")
