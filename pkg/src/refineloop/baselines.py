"""Comparators: no refinement, one blind refinement, and weight-level diffusion RL.

The diffusion-RL fine-tuner treats each stochastic DDPM step as an action: the
log-probability of ``x_{t-1}`` is the Gaussian density around the model mean with
standard deviation ``sigma_t``. It shares the group advantages and clipped ratios of
the prompt trainer so only the MDP differs between the two.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .diffusion import DenoiserParams, NoiseSchedule, ddpm_mean, noise_backward, predict_noise
from .environment import Env, EpisodeRecord, episode_specs, rollout_batch
from .grpo import group_advantages
from .numerics import AdamState, ConfigurationError, RandomSource, adam_step
from .policy import PolicyParams
from .prompts import Prompt

log = logging.getLogger(__name__)


class BaselineKind(str, enum.Enum):
    IDENTITY = "identity"
    FEEDFORWARD = "feedforward"
    DIFFUSION_RL = "diffusion_rl"


def identity_rollout(env: Env, queries: Sequence[Prompt], rng: RandomSource,
                     threads: int = 1) -> list[EpisodeRecord]:
    """Sampling with the prompt held at the query; no policy is consulted."""
    return rollout_batch(env, None, episode_specs(env, queries, rng, ()), tag=BaselineKind.IDENTITY.value,
                         threads=threads)


def feedforward_rollout(env: Env, policy: PolicyParams, queries: Sequence[Prompt],
                        rng: RandomSource, threads: int = 1) -> list[EpisodeRecord]:
    """One policy call at ``t = T`` with the feedback block zeroed; its prompt is used throughout."""
    return rollout_batch(env, policy, episode_specs(env, queries, rng, (env.T,)), feedback=False,
                         tag=BaselineKind.FEEDFORWARD.value, threads=threads)


# ------------------------------------------------------------------- diffusion RL

def gaussian_step_logprob(x_prev: np.ndarray, mean: np.ndarray, sigma) -> np.ndarray:
    """Isotropic Gaussian log-density per row; ``sigma`` is a scalar or one value per row."""
    x_prev, mean = np.atleast_2d(x_prev), np.atleast_2d(mean)
    s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), x_prev.shape[:-1])
    d = x_prev.shape[-1]
    sq = np.sum((x_prev - mean) ** 2, axis=-1) / s ** 2
    return -0.5 * sq - d * np.log(s) - 0.5 * d * math.log(2 * math.pi)


@dataclass
class DiffusionRLConfig:
    updates: int = 100
    group_size: int = 8
    groups_per_update: int = 4
    clip_eps: float = 0.2
    lr: float = 1e-4
    std_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.group_size < 2 or self.groups_per_update < 1 or self.updates < 0:
            raise ConfigurationError("diffusion-RL needs group_size >= 2, groups >= 1, updates >= 0")
        if not 0.0 < self.clip_eps < 1.0 or self.lr <= 0:
            raise ConfigurationError("diffusion-RL needs 0 < clip_eps < 1 and lr > 0")


@dataclass
class TransitionBatch:
    """Stochastic steps of a set of episodes, flattened to rows."""

    x_t: np.ndarray  # (n, 2)
    x_prev: np.ndarray  # (n, 2)
    t: np.ndarray  # (n,)
    prompts: np.ndarray  # (n, L)
    old_logp: np.ndarray  # (n,)
    adv: np.ndarray  # (n,)


def step_logprob_and_grad(params: DenoiserParams, schedule: NoiseSchedule, batch: TransitionBatch,
                          dlogp: np.ndarray | None = None):
    """Per-row log-density of the recorded steps; with ``dlogp`` also the weight gradient of
    ``sum(dlogp * logp)``."""
    eps, cache = predict_noise(params, batch.x_t, batch.prompts, batch.t, return_cache=True)
    mean = ddpm_mean(batch.x_t, eps, batch.t, schedule)
    sigma = schedule.sigmas[batch.t]
    logp = gaussian_step_logprob(batch.x_prev, mean, sigma)
    if dlogp is None:
        return logp, None
    a, ab = schedule.alphas[batch.t], schedule.alpha_bars[batch.t]
    dmean_deps = -(1.0 - a) / (np.sqrt(1.0 - ab) * np.sqrt(a))
    g_mean = (batch.x_prev - mean) / sigma[:, None] ** 2
    g_eps = (dlogp * dmean_deps)[:, None] * g_mean
    return logp, noise_backward(params, cache, g_eps)


def collect_transitions(env: Env, params: DenoiserParams, queries: Sequence[Prompt],
                        cfg: DiffusionRLConfig, rng: RandomSource,
                        threads: int = 1) -> tuple[TransitionBatch, list[EpisodeRecord]]:
    """Roll out one group per query with the fixed query prompt and gather stochastic steps."""
    tuned = Env(params, env.schedule, env.dataset, env.vocab, env.reward, env.config)
    group_queries = [q for q in queries for _ in range(cfg.group_size)]
    recs = rollout_batch(tuned, None, episode_specs(tuned, group_queries, rng, ()),
                         tag=BaselineKind.DIFFUSION_RL.value, threads=threads, keep_trajectory=True)
    stoch = [t for t in range(env.T, 0, -1) if env.schedule.sigmas[t] > 0]
    xs, xp, ts, cs, advs = [], [], [], [], []
    for k in range(len(queries)):
        group = recs[k * cfg.group_size:(k + 1) * cfg.group_size]
        if not all(math.isfinite(r.reward) for r in group):
            continue
        adv = group_advantages([r.reward for r in group], cfg.std_eps)
        for a, r in zip(adv, group):
            for t in stoch:
                xs.append(r.trajectory[t])
                xp.append(r.trajectory[t - 1])
                ts.append(t)
                cs.append(r.query)
                advs.append(a)
    batch = TransitionBatch(np.array(xs).reshape(-1, 2), np.array(xp).reshape(-1, 2),
                            np.array(ts, dtype=np.int64), np.array(cs, dtype=np.int64).reshape(len(ts), -1),
                            np.zeros(len(ts)), np.array(advs))
    if len(ts):
        batch.old_logp, _ = step_logprob_and_grad(params, env.schedule, batch)
    return batch, recs


@dataclass
class DiffusionRLMetrics:
    update: int
    reward_mean: float
    clip_frac: float
    loss: float

    def row(self) -> dict:
        return asdict(self)


def diffusion_rl_finetune(env: Env, queries: Sequence[Prompt], cfg: DiffusionRLConfig,
                          rng: RandomSource, threads: int = 1,
                          on_update: Callable[[DiffusionRLMetrics], None] | None = None
                          ) -> tuple[DenoiserParams, list[DiffusionRLMetrics]]:
    """Clipped policy-gradient fine-tuning of a copy of ``env.denoiser``; ``env`` is left untouched.

    Each update rolls out ``groups_per_update`` groups (queries cycle through ``queries``),
    broadcasts each episode's group advantage to its stochastic steps and takes one Adam
    step on ``-mean(min(rho A, clip(rho) A))``.
    """
    if env.config.sampler != "ddpm":
        raise ConfigurationError("diffusion-RL needs the stochastic DDPM sampler")
    params = env.denoiser.copy()
    adam = AdamState.for_arrays(params.arrays(), cfg.lr)
    history = []
    for u in range(cfg.updates):
        r = rng.split(("update", u))
        qs = [queries[(u * cfg.groups_per_update + k) % len(queries)] for k in range(cfg.groups_per_update)]
        batch, recs = collect_transitions(env, params, qs, cfg, r, threads)
        rewards = np.array([x.reward for x in recs])
        if not len(batch.t):
            history.append(DiffusionRLMetrics(u, float(np.nanmean(rewards)), float("nan"), float("nan")))
            continue
        logp, _ = step_logprob_and_grad(params, env.schedule, batch)
        rho = np.exp(logp - batch.old_logp)
        unclipped = rho * batch.adv
        clipped = np.clip(rho, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * batch.adv
        active = unclipped <= clipped
        dlogp = np.where(active, -rho * batch.adv, 0.0) / len(rho)
        _, grads = step_logprob_and_grad(params, env.schedule, batch, dlogp)
        loss = -float(np.minimum(unclipped, clipped).mean())
        adam_step(adam, params.arrays(), grads)
        params.bump()
        m = DiffusionRLMetrics(u, float(np.nanmean(rewards)), float(np.mean(~active)), loss)
        history.append(m)
        if on_update is not None:
            on_update(m)
    return params, history
