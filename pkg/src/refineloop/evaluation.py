"""Evaluation runs under shared seeds, with bootstrap confidence intervals."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .baselines import BaselineKind
from .environment import (
    Env,
    EpisodeRecord,
    episode_specs,
    inference_schedule,
    plan_specs,
    replay_plans,
    rollout_batch,
)
from .numerics import ConfigurationError, RandomSource
from .policy import PolicyParams
from .prompts import Prompt

MODES = ("closed_loop", "precomputed", "identity", "feedforward", "no_feedback")


def bootstrap_ci(values, n_resamples: int = 2000, seed: int = 0,
                 level: float = 0.95) -> tuple[float, float] | None:
    """Percentile bootstrap interval for the mean; ``None`` for an empty sample."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return None
    if v.size == 1 or np.all(v == v[0]):
        return float(v[0]), float(v[0])
    res = stats.bootstrap((v,), np.mean, n_resamples=n_resamples, confidence_level=level,
                          method="percentile", random_state=np.random.default_rng(seed))
    return float(res.confidence_interval.low), float(res.confidence_interval.high)


def paired_difference(a, b, n_resamples: int = 2000, seed: int = 0):
    """Mean and bootstrap interval of ``a - b`` over episodes run on the same seeds."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ConfigurationError("paired samples must have equal length")
    d = a - b
    return (float(d.mean()) if d.size else None), bootstrap_ci(d, n_resamples, seed)


def eval_queries(pool: Sequence[Prompt], episodes: int) -> list[Prompt]:
    """Cycle through the pool so every query gets an equal share of episodes."""
    return [pool[i % len(pool)] for i in range(episodes)]


def run_episodes(env: Env, policy: PolicyParams | None, queries: Sequence[Prompt], rng: RandomSource,
                 mode: str, n_refine: int | None = None, threads: int = 1) -> list[EpisodeRecord]:
    """Evaluate one mode; episode ``i`` uses the same noise in every mode for a given ``rng``.

    ``no_feedback`` runs the multi-step schedule with the feedback block zeroed.
    """
    if mode not in MODES:
        raise ConfigurationError(f"eval mode must be one of {MODES}")
    if mode != "identity" and policy is None:
        raise ConfigurationError(f"{mode} evaluation needs a policy")
    n_refine = n_refine or env.config.n_refine_infer
    if mode == "identity":
        specs = episode_specs(env, queries, rng)
        return rollout_batch(env, None, specs, tag=BaselineKind.IDENTITY.value, threads=threads)
    if mode == "feedforward":
        specs = episode_specs(env, queries, rng, (env.T,))
        return rollout_batch(env, policy, specs, feedback=False, tag=BaselineKind.FEEDFORWARD.value,
                             threads=threads)
    specs = episode_specs(env, queries, rng, inference_schedule(env.T, n_refine))
    if mode == "precomputed":
        return replay_plans(env, plan_specs(policy, env, specs), threads=threads)
    return rollout_batch(env, policy, specs, feedback=(mode == "closed_loop"), tag=mode,
                         threads=threads)


@dataclass
class Summary:
    mode: str
    refine_steps: int | None
    episodes: int
    reward_mean: float | None
    reward_std: float | None
    reward_ci95: list[float] | None
    components: dict[str, dict] = field(default_factory=dict)
    policy_calls_mean: float | None = None
    non_finite: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(records: Sequence[EpisodeRecord], mode: str, refine_steps: int | None,
              n_resamples: int = 2000, seed: int = 0) -> Summary:
    r = np.array([x.reward for x in records], dtype=np.float64)
    finite = r[np.isfinite(r)]
    if not finite.size:
        return Summary(mode, refine_steps, len(records), None, None, None, {}, None, int(r.size))
    ci = bootstrap_ci(finite, n_resamples, seed)
    comps: dict[str, dict] = {}
    for name in sorted({k for x in records for k in x.components}):
        v = np.array([x.components[name] for x in records if name in x.components])
        c = bootstrap_ci(v, n_resamples, seed)
        comps[name] = {"mean": float(v.mean()), "ci95": list(c)}
    calls = float(np.mean([x.policy_calls for x in records]))
    return Summary(mode, refine_steps, len(records), float(finite.mean()), float(finite.std()),
                   list(ci), comps, calls, int(r.size - finite.size))


EPISODE_FIELDS = ["episode", "tag", "stream_id", "query", "final_prompt", "reward", "x0_0", "x0_1",
                  "policy_calls", "components"]


def episode_rows(records: Sequence[EpisodeRecord], env: Env) -> list[dict]:
    rows = []
    for i, x in enumerate(records):
        rows.append({"episode": i, "tag": x.tag, "stream_id": x.stream_id,
                     "query": env.vocab.format(x.query), "final_prompt": env.vocab.format(x.final_prompt),
                     "reward": x.reward, "x0_0": float(x.x0[0]), "x0_1": float(x.x0[1]),
                     "policy_calls": x.policy_calls,
                     "components": ";".join(f"{k}={v!r}" for k, v in sorted(x.components.items()))})
    return rows
