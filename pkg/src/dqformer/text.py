"""Vocabulary, tokenizer and the small trainable language encoder."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .layers import TransformerBlock, sinusoidal_positions

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1
DEFAULT_MAX_LEN = 16

_WORD = re.compile(r"[^\W_]+", re.UNICODE)


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    token_to_id: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def words(self) -> list[str]:
        """Non-special tokens in id order."""
        return [t for t, _ in sorted(self.token_to_id.items(), key=lambda kv: kv[1]) if t not in (PAD, UNK)]

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocabulary":
        ordered = sorted(set(words) - {PAD, UNK})
        mapping = {PAD: PAD_ID, UNK: UNK_ID}
        for i, word in enumerate(ordered, start=2):
            mapping[word] = i
        return cls(mapping)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{w}\n" for w in self.words()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.from_words(line for line in lines if line)


def build_vocabulary(corpus: Sequence[str]) -> Vocabulary:
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    words: set[str] = set()
    for expression in corpus:
        words.update(split_words(expression))
    return Vocabulary.from_words(words)


def tokenize(expression: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> tuple[np.ndarray, int]:
    """Map ``expression`` to ``max_len`` ids (right-padded) and its valid length."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = [vocab.token_to_id.get(w, UNK_ID) for w in split_words(expression)][:max_len]
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return out, len(ids)


@dataclass
class LanguageFeatures:
    """Batched language features: ``features`` (B, L, C_l), ``valid_length`` (B,)."""

    features: torch.Tensor
    valid_length: torch.Tensor

    @property
    def padding_mask(self) -> torch.Tensor:
        """(B, L) boolean, True on padding rows."""
        positions = torch.arange(self.features.shape[1], device=self.features.device)
        return positions[None, :] >= self.valid_length[:, None]


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, dim: int = 64, depth: int = 2, num_heads: int = 4):
        super().__init__()
        self.dim = dim
        self.embedding = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)
        self.blocks = nn.ModuleList(TransformerBlock(dim, num_heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, tokens: torch.Tensor, valid_length: torch.Tensor) -> LanguageFeatures:
        if tokens.min() < 0 or tokens.max() >= self.embedding.num_embeddings:
            raise ValueError("token id outside vocabulary range")
        valid_length = valid_length.to(tokens.device)
        length = tokens.shape[1]
        x = self.embedding(tokens) + sinusoidal_positions(length, self.dim, self.embedding.weight.dtype, tokens.device)
        padding = torch.arange(length, device=tokens.device)[None, :] >= valid_length[:, None]
        for block in self.blocks:
            x = block(x, padding)
        x = self.norm(x).masked_fill(padding[..., None], 0.0)
        return LanguageFeatures(x, valid_length)
