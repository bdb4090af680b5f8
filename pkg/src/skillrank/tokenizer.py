"""Bundled deterministic tokenizer: lowercase + whitespace split, hashed OOV ids.

A fixed vocabulary file maps frequent words to stable ids; anything else is
hashed into the remaining id space with a keyed blake2b digest, so encoding is
reproducible across runs and machines. Id 0 is reserved for padding.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

PAD_ID = 0


class WordTokenizer:
    def __init__(self, vocab_size: int, vocab: list[str] | None = None):
        if vocab_size < 2:
            raise ValueError("vocab_size must be at least 2 (pad + 1)")
        vocab = vocab or []
        if len(vocab) > vocab_size - 2:
            raise ValueError(
                f"vocabulary of {len(vocab)} words leaves no hashing space in vocab_size {vocab_size}"
            )
        self.vocab_size = vocab_size
        self._word_id = {word: i + 1 for i, word in enumerate(vocab)}
        self._hash_base = len(vocab) + 1  # OOV ids land in [hash_base, vocab_size)

    @classmethod
    def from_vocab_file(cls, path: str | Path, vocab_size: int) -> "WordTokenizer":
        """One word per line; line order fixes the ids."""
        words = [line.strip() for line in open(path, encoding="utf-8") if line.strip()]
        return cls(vocab_size=vocab_size, vocab=words)

    def tokenize(self, text: str) -> list[str]:
        return text.lower().split()

    def _oov_id(self, word: str) -> int:
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        span = self.vocab_size - self._hash_base
        return self._hash_base + int.from_bytes(digest, "little") % span

    def encode(self, text: str) -> list[int]:
        return [self._word_id.get(w) or self._oov_id(w) for w in self.tokenize(text)]
