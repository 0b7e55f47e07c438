"""Token-level GRPO for the refinement policy.

Each refinement event contributes ``L`` tokens (one per prompt slot). The terminal
advantage of an episode is broadcast to all of its tokens.
"""

from __future__ import annotations

import logging
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import policy as pol
from .environment import Env, EpisodeRecord, group_specs, rollout_batch
from .numerics import AdamState, ConfigurationError, RandomSource, UsageError, adam_step
from .policy import PolicyInputs, PolicyParams
from .prompts import Prompt

log = logging.getLogger(__name__)


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_coef: float = 0.005
    # 5e-6 is the full-size setting for a LoRA-tuned multimodal LM; a tiny MLP needs far more.
    lr: float = 3e-4
    inner_iters: int = 1
    std_eps: float = 1e-8
    queries_per_batch: int = 16
    updates: int = 3000
    kl_direction: str = "old_new"  # or "new_old"
    kl_anchor: str = "old"  # or "reference" (the initial policy)

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ConfigurationError("group_size must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigurationError("clip_eps must lie in (0, 1)")
        if self.kl_coef < 0:
            raise ConfigurationError("kl_coef must be >= 0")
        if self.inner_iters < 1 or self.queries_per_batch < 1 or self.updates < 0:
            raise ConfigurationError("inner_iters, queries_per_batch >= 1 and updates >= 0")
        if self.kl_direction not in ("old_new", "new_old"):
            raise ConfigurationError("kl_direction must be 'old_new' or 'new_old'")
        if self.kl_anchor not in ("old", "reference"):
            raise ConfigurationError("kl_anchor must be 'old' or 'reference'")


# ---------------------------------------------------------------------- algebra

def group_advantages(rewards: Sequence[float], std_eps: float = 1e-8) -> np.ndarray:
    """``(r - mean) / std`` with the population std; all zeros when the group is degenerate.

    The normalization is done in exact rational arithmetic. The output then depends only
    on the exact input values, so any shift or positive scaling that is itself exact in
    floating point leaves the advantages bit-for-bit unchanged.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ConfigurationError("a group needs at least two rewards")
    if not np.all(np.isfinite(r)):
        return np.full_like(r, np.nan)
    exact = [Fraction(float(x)) for x in r]
    mean = sum(exact, Fraction(0)) / len(exact)
    dev = [x - mean for x in exact]
    var = sum((d * d for d in dev), Fraction(0)) / len(dev)
    if var == 0 or _sqrt(var) < std_eps:
        return np.zeros_like(r)
    return np.array([math.copysign(_sqrt(d * d / var), d) if d else 0.0 for d in dev])


def _sqrt(x: Fraction, bits: int = 128) -> float:
    """Square root of a non-negative rational, truncated to ``bits`` fractional bits before rounding."""
    return float(Fraction(math.isqrt(x.numerator * 4 ** bits // x.denominator), 2 ** bits))


def token_surrogate(new_logp, old_logp, advantage, clip_eps: float) -> np.ndarray:
    """Per-token ``min(rho A, clip(rho, 1-eps, 1+eps) A)``."""
    new_logp, old_logp = np.asarray(new_logp, float), np.asarray(old_logp, float)
    if new_logp.shape != old_logp.shape:
        raise UsageError(f"log-prob shapes differ: {new_logp.shape} vs {old_logp.shape}")
    adv = np.asarray(advantage, float)
    if adv.ndim:  # one advantage per leading row, shared by that row's tokens
        adv = adv.reshape(adv.shape + (1,) * (new_logp.ndim - adv.ndim))
    rho = np.exp(new_logp - old_logp)
    return np.minimum(rho * adv, np.clip(rho, 1 - clip_eps, 1 + clip_eps) * adv)


def kl_penalty(old_dist: np.ndarray, new_dist: np.ndarray, direction: str = "old_new") -> float:
    """Exact categorical KL summed over slots; inputs are ``(L, V)`` log-probabilities."""
    return float(np.sum(kl_per_slot(old_dist, new_dist, direction)))


def kl_per_slot(old_logp: np.ndarray, new_logp: np.ndarray, direction: str = "old_new") -> np.ndarray:
    old_logp, new_logp = np.asarray(old_logp, float), np.asarray(new_logp, float)
    if old_logp.shape != new_logp.shape:
        raise UsageError(f"distribution shapes differ: {old_logp.shape} vs {new_logp.shape}")
    if direction == "old_new":
        return np.sum(np.exp(old_logp) * (old_logp - new_logp), axis=-1)
    return np.sum(np.exp(new_logp) * (new_logp - old_logp), axis=-1)


# ------------------------------------------------------------------------ batch

@dataclass
class GroupBatch:
    """Flattened refinement events of one or more groups with their frozen old-policy data."""

    inputs: PolicyInputs
    actions: np.ndarray  # (E, L)
    old_token_logp: np.ndarray  # (E, L)
    old_dist: np.ndarray  # (E, L, V)
    event_adv: np.ndarray  # (E,)
    advantages: np.ndarray  # (episodes,)
    episodes: list[EpisodeRecord] = field(default_factory=list)
    ref_dist: np.ndarray | None = None

    @property
    def n_events(self) -> int:
        return len(self.event_adv)


def build_batch(groups: Sequence[Sequence[EpisodeRecord]], std_eps: float = 1e-8) -> GroupBatch:
    xh, cs, qs, ts, acts, old_lp, dists, ev_adv, all_adv, eps = [], [], [], [], [], [], [], [], [], []
    for group in groups:
        adv = group_advantages([e.reward for e in group], std_eps)
        all_adv.append(adv)
        for a, ep in zip(adv, group):
            eps.append(ep)
            for ev in ep.events:
                xh.append(ev.x_hat)
                cs.append(ev.prompt)
                qs.append(ep.query)
                ts.append(ev.t)
                acts.append(ev.action)
                old_lp.append(ev.token_logprobs)
                dists.append(ev.dist)
                ev_adv.append(a)
    if not xh:
        raise UsageError("no refinement events in batch")
    inputs = PolicyInputs(np.array(xh, float).reshape(-1, 2), np.array(cs), np.array(qs), np.array(ts))
    return GroupBatch(inputs, np.array(acts), np.array(old_lp), np.array(dists), np.array(ev_adv),
                      np.concatenate(all_adv), eps)


# --------------------------------------------------------------- loss/gradient

@dataclass
class LossInfo:
    loss: float
    surrogate: float
    kl: float
    clip_frac: float


def grpo_loss_and_grad(params: PolicyParams, batch: GroupBatch,
                       cfg: GrpoConfig) -> tuple[float, list[np.ndarray], LossInfo]:
    """``-mean_tokens(surrogate) + beta * mean_events(KL)`` and its gradient."""
    logp, cache = pol.forward(params, batch.inputs)
    E, L, V = logp.shape
    new_tok = pol.token_logprobs(logp, batch.actions)
    adv = batch.event_adv[:, None]
    rho = np.exp(new_tok - batch.old_token_logp)
    unclipped = rho * adv
    clipped = np.clip(rho, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * adv
    surr = np.minimum(unclipped, clipped)
    use_unclipped = unclipped <= clipped
    n_tok = E * L
    # d(-mean surr)/d(new_tok)
    g_tok = np.where(use_unclipped, -rho * adv, 0.0) / n_tok
    probs = np.exp(logp)
    onehot = np.zeros_like(logp)
    np.put_along_axis(onehot, batch.actions[..., None], 1.0, axis=-1)
    dlogits = g_tok[..., None] * (onehot - probs)

    anchor = batch.ref_dist if cfg.kl_anchor == "reference" else batch.old_dist
    if anchor is None:
        raise UsageError("reference distributions missing from batch")
    kl_slots = kl_per_slot(anchor, logp, cfg.kl_direction)
    kl = float(kl_slots.sum(axis=1).mean())
    if cfg.kl_coef:
        if cfg.kl_direction == "old_new":
            g_kl = probs - np.exp(anchor)
        else:
            d = logp - anchor
            g_kl = probs * (d - np.sum(probs * d, axis=-1, keepdims=True))
        dlogits = dlogits + cfg.kl_coef * g_kl / E
    loss = -float(surr.mean()) + cfg.kl_coef * kl
    grads = pol.backward(params, cache, batch.inputs, dlogits)
    clip_frac = float(np.mean(~use_unclipped))
    return loss, grads, LossInfo(loss, float(surr.mean()), kl, clip_frac)


# --------------------------------------------------------------------- training

@dataclass
class UpdateMetrics:
    update: int
    reward_mean: float
    reward_min: float
    reward_max: float
    kl: float
    adv_std: float
    loss: float
    skipped_groups: int

    def row(self) -> dict:
        return asdict(self)


def sample_queries(pool: Sequence[Prompt], n: int, rng: RandomSource) -> list[Prompt]:
    idx = rng.integers(0, len(pool), n)
    return [pool[int(i)] for i in idx]


def collect(env: Env, params: PolicyParams, queries: Sequence[Prompt], cfg: GrpoConfig,
            rng: RandomSource, mode: str = "closed_loop",
            threads: int = 1) -> list[list[EpisodeRecord]]:
    """Roll out one group per query. ``mode='feedforward'`` refines once at ``T`` without feedback."""
    specs = []
    for k, q in enumerate(queries):
        steps = (env.T,) if mode == "feedforward" else None
        specs += group_specs(env, q, cfg.group_size, rng.split(("group", k)), steps,
                             env.config.schedule_per_member)
    feedback = mode == "closed_loop" and env.config.feedback == "on"
    recs = rollout_batch(env, params, specs, feedback=feedback, tag=mode, threads=threads)
    G = cfg.group_size
    return [recs[i:i + G] for i in range(0, len(recs), G)]


def train_policy(env: Env, params: PolicyParams, query_pool: Sequence[Prompt], cfg: GrpoConfig,
                 rng: RandomSource, mode: str = "closed_loop", start_update: int = 0,
                 adam: AdamState | None = None, threads: int = 1,
                 on_update: Callable[[UpdateMetrics, PolicyParams, AdamState], None] | None = None,
                 reference: PolicyParams | None = None
                 ) -> tuple[PolicyParams, list[UpdateMetrics], AdamState]:
    """Repeated (sample queries, roll out groups, GRPO step) loop; mutates and returns ``params``.

    Randomness for update ``u`` comes from ``rng.split(("update", u))`` so a run resumed
    at ``start_update`` with the saved parameters and optimizer state is identical to an
    uninterrupted one.
    """
    if mode not in ("closed_loop", "feedforward"):
        raise ConfigurationError(f"unknown training mode {mode!r}")
    adam = adam or AdamState.for_arrays(params.arrays(), cfg.lr)
    if cfg.kl_anchor == "reference" and reference is None:
        reference = params.copy()
    history: list[UpdateMetrics] = []
    for u in range(start_update, cfg.updates):
        r = rng.split(("update", u))
        queries = sample_queries(query_pool, cfg.queries_per_batch, r.split("queries"))
        groups = collect(env, params, queries, cfg, r.split("rollout"), mode, threads)
        good = [g for g in groups if all(math.isfinite(e.reward) for e in g)]
        skipped = len(groups) - len(good)
        if skipped:
            log.warning("update %d: skipped %d group(s) with non-finite latents", u, skipped)
        rewards = np.array([e.reward for g in good for e in g]) if good else np.array([np.nan])
        if not good:
            history.append(UpdateMetrics(u, *(float("nan"),) * 5, float("nan"), skipped))
            continue
        batch = build_batch(good, cfg.std_eps)
        if reference is not None:
            batch.ref_dist, _ = pol.forward(reference, batch.inputs)
        loss = float("nan")
        for _ in range(cfg.inner_iters):
            loss, grads, _ = grpo_loss_and_grad(params, batch, cfg)
            if not math.isfinite(loss):
                raise FloatingPointError(f"GRPO loss is not finite at update {u}")
            adam_step(adam, params.arrays(), grads)
            params.bump()
        new_logp, _ = pol.forward(params, batch.inputs)
        kl = float(kl_per_slot(batch.old_dist, new_logp, cfg.kl_direction).sum(axis=1).mean())
        m = UpdateMetrics(u, float(rewards.mean()), float(rewards.min()), float(rewards.max()),
                          kl, float(batch.advantages.std()), loss, skipped)
        history.append(m)
        if on_update is not None:
            on_update(m, params, adam)
    return params, history, adam
