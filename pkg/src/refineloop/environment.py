"""Closed-loop refinement MDP: schedules, batched episode rollouts and a-priori plans.

Every episode owns an :class:`EpisodeNoise` drawn up front from its own labelled
stream (initial latent, per-step sampler noise and per-step action uniforms), so the
outcome of an episode never depends on how episodes are batched or threaded.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import policy as pol
from .diffusion import (
    DenoiserParams,
    MixtureDataset,
    NoiseSchedule,
    denoised_estimate,
    predict_noise,
    sampler_step,
)
from .numerics import ConfigurationError, RandomSource
from .policy import PolicyInputs, PolicyParams
from .prompts import Prompt, Vocabulary
from .rewards import RewardSpec, evaluate

log = logging.getLogger(__name__)

FEEDBACK_MODES = ("on", "off", "precomputed")
CHUNK = 64  # fixed batching unit; results are identical for any thread count


class EpisodeError(RuntimeError):
    def __init__(self, msg: str, dump: dict | None = None):
        super().__init__(msg)
        self.dump = dump or {}


# --------------------------------------------------------------------- schedules

def sample_training_schedule(T: int, n_refine: int, rng: RandomSource) -> tuple[int, ...]:
    """Uniform size-``n_refine`` subset of ``1..T`` (partial Fisher-Yates), sorted high to low."""
    if not 1 <= n_refine <= T:
        raise ConfigurationError(f"need 1 <= N_R <= T, got N_R={n_refine}, T={T}")
    pool = list(range(1, T + 1))
    for i in range(n_refine):
        j = int(rng.integers(i, T))
        pool[i], pool[j] = pool[j], pool[i]
    return tuple(sorted(pool[:n_refine], reverse=True))


def inference_schedule(T: int, n_refine: int) -> tuple[int, ...]:
    """Evenly spaced refinement steps, always starting at ``T``."""
    if not 1 <= n_refine <= T:
        raise ConfigurationError(f"need 1 <= N_R <= T, got N_R={n_refine}, T={T}")
    steps = {T - int(round(i * T / n_refine)) for i in range(n_refine)}
    return tuple(sorted((s for s in steps if s >= 1), reverse=True))


# ------------------------------------------------------------------- containers

@dataclass(frozen=True)
class EnvConfig:
    n_refine_train: int = 2
    n_refine_infer: int = 5
    sampler: str = "ddpm"
    eta: float = 0.0
    feedback: str = "on"
    schedule_per_member: bool = False

    def __post_init__(self) -> None:
        if self.feedback not in FEEDBACK_MODES:
            raise ConfigurationError(f"feedback must be one of {FEEDBACK_MODES}")
        if self.sampler not in ("ddpm", "ddim"):
            raise ConfigurationError("sampler must be 'ddpm' or 'ddim'")
        if self.n_refine_train < 1 or self.n_refine_infer < 1:
            raise ConfigurationError("refinement counts must be >= 1")


@dataclass
class Env:
    """Frozen pieces shared read-only by all rollouts."""

    denoiser: DenoiserParams
    schedule: NoiseSchedule
    dataset: MixtureDataset
    vocab: Vocabulary
    reward: RewardSpec
    config: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self) -> None:
        for n in (self.config.n_refine_train, self.config.n_refine_infer):
            if n > self.schedule.T:
                raise ConfigurationError(f"N_R={n} exceeds T={self.schedule.T}")

    @property
    def T(self) -> int:
        return self.schedule.T


@dataclass
class EpisodeNoise:
    x_T: np.ndarray  # (2,)
    z: np.ndarray  # (T + 1, 2); row t drives the step out of x_t
    u: np.ndarray  # (T + 1, L); row t drives the action sampled at t
    stream_id: int

    @classmethod
    def draw(cls, rng: RandomSource, T: int, L: int) -> "EpisodeNoise":
        return cls(rng.normal(2), rng.normal((T + 1, 2)), rng.uniform((T + 1, L)), rng.stream_id)


@dataclass
class RefinementEvent:
    t: int
    x_hat: np.ndarray  # as observed by the policy (zeros when feedback is masked)
    prompt: Prompt  # c_t before refinement
    action: Prompt  # c_{t-1}
    token_logprobs: np.ndarray  # (L,)
    dist: np.ndarray  # (L, V) log-probabilities at sampling time

    @property
    def logprob(self) -> float:
        return float(self.token_logprobs.sum())


@dataclass
class EpisodeRecord:
    query: Prompt
    refine_steps: tuple[int, ...]
    events: list[RefinementEvent]
    x0: np.ndarray
    reward: float
    components: dict[str, float]
    stream_id: int
    final_prompt: Prompt
    policy_calls: int = 0
    tag: str = "closed_loop"
    trajectory: np.ndarray | None = None  # (T + 1, 2), index t holds x_t
    prompt_path: list[Prompt] | None = None  # prompt used for the step out of x_t, index t

    def to_json(self, vocab: Vocabulary) -> str:
        return json.dumps({
            "tag": self.tag,
            "stream_id": self.stream_id,
            "query": vocab.format(self.query),
            "refine_steps": list(self.refine_steps),
            "events": [{"t": e.t, "x_hat": e.x_hat.tolist(), "prompt": vocab.format(e.prompt),
                        "action": vocab.format(e.action), "logprob": e.logprob}
                       for e in self.events],
            "final_prompt": vocab.format(self.final_prompt),
            "x0": self.x0.tolist(),
            "reward": self.reward,
            "components": self.components,
            "policy_calls": self.policy_calls,
        })


@dataclass
class EpisodeSpec:
    query: Prompt
    refine_steps: tuple[int, ...]
    noise: EpisodeNoise
    plan: dict[int, Prompt] | None = None  # replayed prompts, bypassing the policy


# ---------------------------------------------------------------------- rollouts

def _rollout_chunk(env: Env, policy: PolicyParams | None, specs: Sequence[EpisodeSpec],
                   feedback: bool, tag: str, keep_trajectory: bool) -> list[EpisodeRecord]:
    T, L = env.T, env.vocab.length
    n = len(specs)
    x = np.stack([s.noise.x_T for s in specs]).astype(np.float64)
    queries = np.array([s.query for s in specs], dtype=np.int64)
    c = queries.copy()
    z = np.stack([s.noise.z for s in specs])
    u = np.stack([s.noise.u for s in specs])
    events: list[list[RefinementEvent]] = [[] for _ in range(n)]
    calls = np.zeros(n, dtype=int)
    traj = np.zeros((n, T + 1, 2)) if keep_trajectory else None
    paths: list[list[Prompt]] | None = [[()] * (T + 1) for _ in range(n)] if keep_trajectory else None
    refine_at = [set(s.refine_steps) for s in specs]
    for t in range(T, 0, -1):
        if traj is not None:
            traj[:, t] = x
        eps = predict_noise(env.denoiser, x, c, t)
        changed = []
        plan_rows = [i for i, s in enumerate(specs) if s.plan is not None and t in s.plan]
        for i in plan_rows:
            c[i] = specs[i].plan[t]
            changed.append(i)
        rows = np.array([i for i, s in enumerate(specs)
                         if s.plan is None and policy is not None and t in refine_at[i]], dtype=int)
        if len(rows):
            if feedback:
                xhat = denoised_estimate(x[rows], c[rows], t, env.denoiser, env.schedule,
                                         eps_hat=eps[rows])
            else:
                xhat = np.zeros((len(rows), 2))
            inputs = PolicyInputs(xhat, c[rows].copy(), queries[rows], np.full(len(rows), t))
            logp, _ = pol.forward(policy, inputs)
            acts = pol.sample_tokens(logp, u[rows, t])
            tok_lp = pol.token_logprobs(logp, acts)
            for k, i in enumerate(rows):
                events[i].append(RefinementEvent(t, xhat[k], tuple(int(v) for v in c[i]),
                                                 tuple(int(v) for v in acts[k]), tok_lp[k], logp[k]))
                calls[i] += 1
            c[rows] = acts
            changed += rows.tolist()
        if changed:
            changed = np.array(sorted(changed))
            eps[changed] = predict_noise(env.denoiser, x[changed], c[changed], t)
        if paths is not None:
            for i in range(n):
                paths[i][t] = tuple(int(v) for v in c[i])
        x = sampler_step(env.config.sampler, x, z[:, t], c, t, env.denoiser, env.schedule,
                         eps_hat=eps, eta=env.config.eta)
    if traj is not None:
        traj[:, 0] = x
    out = []
    for i, s in enumerate(specs):
        final = tuple(int(v) for v in c[i])
        if np.all(np.isfinite(x[i])):
            rv = evaluate(env.reward, x[i], s.query, final, env.dataset, env.vocab)
            reward, comps = float(rv.total), rv.components
        else:
            log.warning("non-finite latent in episode %d (stream %d)", i, s.noise.stream_id)
            reward, comps = float("nan"), {}
        out.append(EpisodeRecord(
            s.query, s.refine_steps, events[i], x[i].copy(), reward, comps, s.noise.stream_id,
            final, int(calls[i]), tag,
            traj[i] if traj is not None else None, paths[i] if paths is not None else None))
    return out


def rollout_batch(env: Env, policy: PolicyParams | None, specs: Sequence[EpisodeSpec],
                  feedback: bool = True, tag: str = "closed_loop", threads: int = 1,
                  keep_trajectory: bool = False) -> list[EpisodeRecord]:
    """Run episodes in fixed-size chunks, optionally spread over worker threads.

    ``policy=None`` keeps every prompt at its query (unless a spec carries a plan).
    Episodes whose latent turns non-finite come back with a NaN reward.
    """
    chunks = [specs[i:i + CHUNK] for i in range(0, len(specs), CHUNK)]
    work = lambda ch: _rollout_chunk(env, policy, ch, feedback, tag, keep_trajectory)  # noqa: E731
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(ch) for ch in chunks]
    return [rec for part in parts for rec in part]


def rollout(env: Env, policy: PolicyParams | None, query: Prompt, refine_steps: Sequence[int],
            rng: RandomSource, feedback: str = "on", keep_trajectory: bool = True) -> EpisodeRecord:
    """One episode; raises :class:`EpisodeError` (with a trajectory dump) on a non-finite latent."""
    if not refine_steps:
        raise ConfigurationError("refinement schedule must be non-empty")
    steps = tuple(sorted(set(int(t) for t in refine_steps), reverse=True))
    if steps[0] > env.T or steps[-1] < 1:
        raise ConfigurationError("refinement steps outside 1..T")
    noise = EpisodeNoise.draw(rng, env.T, env.vocab.length)
    if feedback == "precomputed":
        plan = precompute_prompts(policy, env, query, steps, noise)
        spec = EpisodeSpec(tuple(query), steps, noise, plan)
        rec = rollout_batch(env, None, [spec], tag="precomputed", keep_trajectory=keep_trajectory)[0]
    else:
        spec = EpisodeSpec(tuple(query), steps, noise)
        rec = rollout_batch(env, policy, [spec], feedback=(feedback == "on"),
                            keep_trajectory=keep_trajectory)[0]
    if not np.isfinite(rec.reward):
        raise EpisodeError("non-finite latent during rollout",
                           {"trajectory": None if rec.trajectory is None else rec.trajectory.tolist(),
                            "stream_id": rec.stream_id})
    return rec


def group_specs(env: Env, query: Prompt, group_size: int, rng: RandomSource,
                refine_steps: Sequence[int] | None = None,
                per_member: bool = False) -> list[EpisodeSpec]:
    """``group_size`` episodes for one query with independent noise streams.

    The refinement schedule is drawn once and shared unless ``per_member`` is set.
    """
    if group_size < 2:
        raise ConfigurationError("group size must be >= 2")
    n_r = env.config.n_refine_train
    shared = tuple(refine_steps) if refine_steps is not None else \
        sample_training_schedule(env.T, n_r, rng.split("schedule"))
    specs = []
    for g in range(group_size):
        steps = sample_training_schedule(env.T, n_r, rng.split(("schedule", g))) \
            if per_member and refine_steps is None else shared
        noise = EpisodeNoise.draw(rng.split(("episode", g)), env.T, env.vocab.length)
        specs.append(EpisodeSpec(tuple(query), steps, noise))
    return specs


def episode_specs(env: Env, queries: Sequence[Prompt], rng: RandomSource,
                  refine_steps: Sequence[int] = ()) -> list[EpisodeSpec]:
    """One spec per query, episode ``i`` drawing its noise from ``rng.split(("episode", i))``.

    Evaluations that share ``rng`` therefore see identical initial latents and sampler noise.
    """
    steps = tuple(refine_steps)
    return [EpisodeSpec(tuple(q), steps, EpisodeNoise.draw(rng.split(("episode", i)), env.T,
                                                           env.vocab.length))
            for i, q in enumerate(queries)]


def rollout_group(env: Env, policy: PolicyParams | None, query: Prompt, group_size: int,
                  rng: RandomSource, feedback: bool = True, threads: int = 1,
                  refine_steps: Sequence[int] | None = None) -> list[EpisodeRecord]:
    specs = group_specs(env, query, group_size, rng, refine_steps, env.config.schedule_per_member)
    return rollout_batch(env, policy, specs, feedback=feedback, threads=threads)


# --------------------------------------------------------------- a-priori plans

def precompute_prompts(policy: PolicyParams, env: Env, query: Prompt, refine_steps: Sequence[int],
                       noise: EpisodeNoise) -> dict[int, Prompt]:
    """All refinement prompts generated before sampling, with the feedback block zeroed."""
    steps = sorted(set(refine_steps), reverse=True)
    c = np.array([query], dtype=np.int64)
    q = c.copy()
    plan: dict[int, Prompt] = {}
    for t in steps:
        inputs = PolicyInputs(np.zeros((1, 2)), c.copy(), q, np.array([t]))
        logp, _ = pol.forward(policy, inputs)
        c = pol.sample_tokens(logp, noise.u[t][None])
        plan[t] = tuple(int(v) for v in c[0])
    return plan


def plan_specs(policy: PolicyParams, env: Env, specs: Sequence[EpisodeSpec]) -> list[EpisodeSpec]:
    return [EpisodeSpec(s.query, s.refine_steps, s.noise,
                        precompute_prompts(policy, env, s.query, s.refine_steps, s.noise))
            for s in specs]


def replay_plans(env: Env, specs: Sequence[EpisodeSpec], threads: int = 1,
                 keep_trajectory: bool = False) -> list[EpisodeRecord]:
    """Feedback-free sampling loop; it has no access to any policy."""
    if any(s.plan is None for s in specs):
        raise ConfigurationError("every spec needs a prompt plan")
    return rollout_batch(env, None, specs, tag="precomputed", threads=threads,
                         keep_trajectory=keep_trajectory)
