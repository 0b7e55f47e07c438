"""Shared fixtures: a small untrained setup for fast tests and a desk-default trained
denoiser (built once per session) for statistical and acceptance tests."""

from __future__ import annotations

import time

import numpy as np
import pytest

from refineloop.diffusion import (
    DenoiserTrainConfig,
    MixtureDataset,
    init_denoiser,
    make_schedule,
    train_denoiser,
)
from refineloop.environment import Env, EnvConfig
from refineloop.numerics import RandomSource
from refineloop.prompts import Vocabulary
from refineloop.rewards import RewardSpec


@pytest.fixture
def vocab():
    return Vocabulary.opposite_pairs(8)


@pytest.fixture
def dataset():
    return MixtureDataset()


@pytest.fixture
def small_env(vocab, dataset):
    """Untrained denoiser on a short horizon; cheap enough for structural tests."""
    schedule = make_schedule(10, 1e-3, 0.2)
    den = init_denoiser(vocab, 10, RandomSource(1), hidden=(16, 16))
    return Env(den, schedule, dataset, vocab, RewardSpec("mode_match"), EnvConfig(n_refine_infer=3))


class DeskModel:
    def __init__(self):
        self.vocab = Vocabulary.opposite_pairs(8)
        self.dataset = MixtureDataset()
        self.schedule = make_schedule(50, 1e-3, 0.2)
        t0 = time.perf_counter()
        self.denoiser, self.curve = train_denoiser(self.dataset, self.vocab, self.schedule,
                                                   DenoiserTrainConfig(), RandomSource(0).split("denoiser"))
        self.train_seconds = time.perf_counter() - t0

    def env(self, kind: str = "mode_match", **cfg) -> Env:
        return Env(self.denoiser, self.schedule, self.dataset, self.vocab, RewardSpec(kind), EnvConfig(**cfg))


@pytest.fixture(scope="session")
def desk():
    """Denoiser trained at desk defaults (the same run as ``refineloop train-diffusion`` with seed 0)."""
    return DeskModel()


def rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


# ------------------------------------------------------------ acceptance report

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
