"""Deterministic toy text embedder.

Stands in for a frozen language-model encoder: whitespace tokens are hashed
to fixed pseudo-random unit vectors, so identical prompts always embed
identically and any vocabulary is accepted.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, TensorError


@dataclass(frozen=True)
class TextEmbedding:
    tokens: Tensor          # (max_tokens, embed_dim), zero rows where padded
    pooled: Tensor          # (embed_dim,), mean of real token vectors
    mask: np.ndarray        # (max_tokens,) bool, True where a real token sits

    @property
    def is_null(self) -> bool:
        return not bool(self.mask.any())


def _token_vector(token: str, embed_dim: int) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    seed = int.from_bytes(digest, "little")
    vec = np.random.default_rng(seed).standard_normal(embed_dim)
    return vec / np.linalg.norm(vec)


def embed_text(prompt: str, embed_dim: int = 16, max_tokens: int = 8) -> TextEmbedding:
    """Embed a prompt as per-token unit vectors plus their mean."""
    words = prompt.split()
    if not words:
        raise TensorError("prompt is empty after whitespace trim")
    words = words[:max_tokens]
    tokens = np.zeros((max_tokens, embed_dim), dtype=np.float32)
    for i, word in enumerate(words):
        tokens[i] = _token_vector(word, embed_dim)
    mask = np.zeros(max_tokens, dtype=bool)
    mask[: len(words)] = True
    pooled = tokens[: len(words)].mean(axis=0)
    return TextEmbedding(
        tokens=Tensor(tokens, _trusted=True),
        pooled=Tensor(pooled.astype(np.float32), _trusted=True),
        mask=mask,
    )


def null_embedding(embed_dim: int = 16, max_tokens: int = 8) -> TextEmbedding:
    """The dropped-out conditioning input: zero vectors, everything padded."""
    return TextEmbedding(
        tokens=Tensor(np.zeros((max_tokens, embed_dim), dtype=np.float32), _trusted=True),
        pooled=Tensor(np.zeros(embed_dim, dtype=np.float32), _trusted=True),
        mask=np.zeros(max_tokens, dtype=bool),
    )
