"""Black-box terminal rewards on final samples."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffusion import MixtureDataset
from .numerics import ConfigurationError
from .prompts import Vocabulary, prompt_length

KINDS = ("mode_match", "ambiguous_nearest", "composite")


class RewardSpecError(ValueError):
    """The query does not carry what the reward needs."""


@dataclass(frozen=True)
class RewardSpec:
    kind: str = "mode_match"
    bandwidth: float = 1.0
    w_match: float = 1.0
    w_len: float = 0.5
    w_fmt: float = 0.2
    budget: int = 1

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigurationError(f"reward kind must be one of {KINDS}, got {self.kind!r}")
        if min(self.w_match, self.w_len, self.w_fmt) < 0 or self.bandwidth <= 0:
            raise ConfigurationError("reward weights must be >= 0 and bandwidth > 0")
        if self.budget < 0:
            raise ConfigurationError("length budget must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RewardValue:
    total: float
    components: dict[str, float]


def _gauss(x0: np.ndarray, center: np.ndarray, bandwidth: float) -> np.ndarray:
    d2 = ((np.asarray(x0, dtype=np.float64) - center) ** 2).sum(-1)
    return np.exp(-d2 / (2.0 * bandwidth ** 2))


def query_mode(q, vocab: Vocabulary) -> int:
    for tok in q:
        if vocab.is_mode(int(tok)):
            return int(tok)
    raise RewardSpecError("query names no mode token")


def query_allowed(q, vocab: Vocabulary) -> tuple[int, int]:
    for tok in q:
        pair = vocab.ambiguous_modes(int(tok))
        if pair is not None:
            return pair
    raise RewardSpecError("query holds no ambiguous token")


def mode_match(x0, q, dataset: MixtureDataset, vocab: Vocabulary, bandwidth: float = 1.0) -> float:
    return float(_gauss(x0, dataset.centers[query_mode(q, vocab)], bandwidth))


def ambiguous_nearest(x0, q, dataset: MixtureDataset, vocab: Vocabulary,
                      bandwidth: float = 1.0) -> float:
    i, j = query_allowed(q, vocab)
    return float(max(_gauss(x0, dataset.centers[i], bandwidth),
                     _gauss(x0, dataset.centers[j], bandwidth)))


def alignment(x0, q, dataset: MixtureDataset, vocab: Vocabulary, bandwidth: float) -> float:
    """Mode match for mode queries, nearest-allowed match for ambiguous ones."""
    if any(vocab.ambiguous_modes(int(t)) is not None for t in q):
        return ambiguous_nearest(x0, q, dataset, vocab, bandwidth)
    return mode_match(x0, q, dataset, vocab, bandwidth)


def composite(x0, q, final_prompt, spec: RewardSpec, dataset: MixtureDataset,
              vocab: Vocabulary) -> RewardValue:
    match = alignment(x0, q, dataset, vocab, spec.bandwidth)
    length_pen = -max(0, prompt_length(final_prompt, vocab) - spec.budget) / vocab.length
    fmt = 1.0 if any(vocab.is_mode(int(t)) for t in final_prompt) else 0.0
    total = spec.w_match * match + spec.w_len * length_pen + spec.w_fmt * fmt
    return RewardValue(total, {"match": match, "length": length_pen, "format": fmt})


def evaluate(spec: RewardSpec, x0, q, final_prompt, dataset: MixtureDataset,
             vocab: Vocabulary) -> RewardValue:
    if spec.kind == "mode_match":
        r = mode_match(x0, q, dataset, vocab, spec.bandwidth)
        return RewardValue(r, {"match": r})
    if spec.kind == "ambiguous_nearest":
        r = ambiguous_nearest(x0, q, dataset, vocab, spec.bandwidth)
        return RewardValue(r, {"match": r})
    return composite(x0, q, final_prompt, spec, dataset, vocab)


def reward_bounds(spec: RewardSpec) -> tuple[float, float]:
    if spec.kind == "composite":
        return -spec.w_len, spec.w_match + spec.w_fmt
    return 0.0, 1.0
