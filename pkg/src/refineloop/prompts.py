"""Discrete prompt language: a small vocabulary of mode tokens, a NULL filler,
ambiguous two-mode query tokens and optional reserved style tokens."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .numerics import ConfigurationError, UsageError

Prompt = tuple[int, ...]  # fixed-length token ids; queries use the same shape


@dataclass(frozen=True)
class Vocabulary:
    """Token ids are dense: modes first, then NULL, ambiguous pairs, style tokens."""

    n_modes: int
    ambiguous_pairs: tuple[tuple[int, int], ...] = ()
    n_style: int = 0
    length: int = 4

    def __post_init__(self) -> None:
        if self.n_modes < 1 or self.length < 1 or self.n_style < 0:
            raise ConfigurationError("vocabulary needs >= 1 mode and prompt length >= 1")
        for i, j in self.ambiguous_pairs:
            if not (0 <= i < self.n_modes and 0 <= j < self.n_modes) or i == j:
                raise ConfigurationError(f"bad ambiguous pair ({i}, {j})")

    @classmethod
    def opposite_pairs(cls, n_modes: int, length: int = 4, n_style: int = 0) -> "Vocabulary":
        """Vocabulary whose ambiguous tokens pair each mode with the one across the circle."""
        half = n_modes // 2
        pairs = tuple((i, i + half) for i in range(half)) if n_modes % 2 == 0 else ()
        return cls(n_modes, pairs, n_style, length)

    @property
    def null(self) -> int:
        return self.n_modes

    @property
    def size(self) -> int:
        return self.n_modes + 1 + len(self.ambiguous_pairs) + self.n_style

    def mode_token(self, k: int) -> int:
        if not 0 <= k < self.n_modes:
            raise UsageError(f"no mode {k}")
        return k

    def ambiguous_token(self, index: int) -> int:
        return self.n_modes + 1 + index

    def is_mode(self, token: int) -> bool:
        return 0 <= token < self.n_modes

    def ambiguous_modes(self, token: int) -> tuple[int, int] | None:
        index = token - self.n_modes - 1
        if 0 <= index < len(self.ambiguous_pairs):
            return self.ambiguous_pairs[index]
        return None

    def names(self) -> list[str]:
        out = [f"MODE_{k}" for k in range(self.n_modes)] + ["NULL"]
        out += [f"AMBIG_{i}_{j}" for i, j in self.ambiguous_pairs]
        out += [f"STYLE_{s}" for s in range(self.n_style)]
        return out

    # prompts --------------------------------------------------------------

    def make(self, tokens: Iterable[int]) -> Prompt:
        """Left-align ``tokens`` and pad with NULL up to the prompt length."""
        toks = list(tokens)
        if len(toks) > self.length:
            raise UsageError(f"prompt longer than {self.length}")
        self.validate(toks)
        return tuple(toks + [self.null] * (self.length - len(toks)))

    def mode_query(self, k: int) -> Prompt:
        return self.make([self.mode_token(k)])

    def ambiguous_query(self, index: int) -> Prompt:
        return self.make([self.ambiguous_token(index)])

    def validate(self, prompt: Sequence[int]) -> None:
        for tok in prompt:
            if not 0 <= int(tok) < self.size:
                raise UsageError(f"token id {tok} outside vocabulary of size {self.size}")

    def format(self, prompt: Sequence[int]) -> str:
        names = self.names()
        return " ".join(names[int(t)] for t in prompt)

    def parse(self, text: str) -> Prompt:
        lookup = {name: i for i, name in enumerate(self.names())}
        try:
            toks = [lookup[w] for w in text.split()]
        except KeyError as exc:
            raise UsageError(f"unknown token {exc.args[0]!r}") from None
        if len(toks) != self.length:
            raise UsageError(f"expected {self.length} tokens, got {len(toks)}")
        return tuple(toks)


def embed_prompt(prompt: Sequence[int] | np.ndarray, table: np.ndarray) -> np.ndarray:
    """Mean of the token embeddings. Accepts one prompt ``(L,)`` or a batch ``(n, L)``."""
    ids = np.asarray(prompt, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise UsageError("token id outside embedding table")
    return table[ids].mean(axis=-2)


def prompt_length(prompt: Sequence[int], vocab: Vocabulary) -> int:
    """Number of non-NULL tokens."""
    return sum(1 for t in prompt if int(t) != vocab.null)
