"""Toy conditional DDPM on a 2D ring of Gaussian modes.

Prompts steer the denoiser through a vote semantics: every slot holding ``MODE_k``
is a vote for mode ``k`` and every other slot (NULL, ambiguous or style tokens) is a
wildcard vote spread uniformly over all modes. A data point for a prompt is drawn by
picking one slot uniformly and resolving its vote, so ``MODE_k`` repeated in every slot
pins mode ``k`` while a single ``MODE_k`` among fillers only tilts the odds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    AdamState,
    ConfigurationError,
    MlpParams,
    RandomSource,
    UsageError,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
)
from .prompts import Vocabulary

log = logging.getLogger(__name__)

TIME_EMB_DIM = 16


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------- schedule

@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by timestep, with index 0 holding the ``alpha_bar_0 = 1`` convention."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    kind: str = "linear"
    beta_min: float = 0.0
    beta_max: float = 0.0

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise UsageError(f"timestep outside 1..{self.T}")

    def descriptor(self) -> dict:
        return {"T": self.T, "kind": self.kind, "beta_min": self.beta_min,
                "beta_max": self.beta_max}


def make_schedule(T: int, beta_min: float, beta_max: float, kind: str = "linear") -> NoiseSchedule:
    if T < 1 or not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigurationError(f"need T >= 1 and 0 < beta_min <= beta_max < 1, got "
                                 f"T={T}, beta_min={beta_min}, beta_max={beta_max}")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min])
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], beta_min, beta_max)
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}")
    betas = np.concatenate([[0.0], betas])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    var = np.zeros(T + 1)
    var[1:] = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:]
    return NoiseSchedule(T, betas, alphas, alpha_bars, np.sqrt(var), kind, beta_min, beta_max)


# ----------------------------------------------------------------------- dataset

@dataclass(frozen=True)
class MixtureDataset:
    n_modes: int = 8
    radius: float = 5.0
    std: float = 0.1

    def __post_init__(self) -> None:
        if self.n_modes < 1 or self.std <= 0 or self.radius < 0:
            raise ConfigurationError("mixture needs >= 1 mode, std > 0, radius >= 0")
        if self.n_modes > 1 and self.radius == 0:
            raise ConfigurationError("modes must be distinct")

    @property
    def centers(self) -> np.ndarray:
        ang = 2 * np.pi * np.arange(self.n_modes) / self.n_modes
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def sample(self, modes: np.ndarray, rng: RandomSource) -> np.ndarray:
        modes = np.asarray(modes)
        return self.centers[modes] + self.std * rng.normal((len(modes), 2))

    def nearest_mode(self, x: np.ndarray) -> np.ndarray:
        d = ((np.asarray(x)[:, None, :] - self.centers[None]) ** 2).sum(-1)
        return d.argmin(axis=1)


def resolve_modes(prompts: np.ndarray, vocab: Vocabulary, rng: RandomSource) -> np.ndarray:
    """Draw a data mode for every prompt row under the slot-vote semantics."""
    prompts = np.asarray(prompts)
    n = len(prompts)
    slot = rng.integers(0, prompts.shape[1], n)
    tok = prompts[np.arange(n), slot]
    wildcard = rng.integers(0, vocab.n_modes, n)
    return np.where(tok < vocab.n_modes, tok, wildcard)


def mode_probabilities(prompt, vocab: Vocabulary) -> np.ndarray:
    """Exact mode distribution implied by a prompt."""
    p = np.full(vocab.n_modes, 0.0)
    for tok in prompt:
        if vocab.is_mode(int(tok)):
            p[int(tok)] += 1.0
        else:
            p += 1.0 / vocab.n_modes
    return p / len(prompt)


def sample_training_prompts(n: int, vocab: Vocabulary, rng: RandomSource) -> np.ndarray:
    """Random prompts covering everything a refinement policy can emit.

    A focus mode fills a uniform number of slots; the remaining slots are filled
    with another mode token (p=0.15) or a non-mode token (NULL with p=0.6 of those,
    otherwise any ambiguous/style token).
    """
    L, K = vocab.length, vocab.n_modes
    focus = rng.integers(0, K, n)
    count = rng.integers(0, L + 1, n)
    order = np.argsort(rng.uniform((n, L)), axis=1)
    extra_modes = rng.integers(0, K, (n, L))
    n_other = vocab.size - K - 1
    if n_other:
        other = K + 1 + rng.integers(0, n_other, (n, L))
        filler = np.where(rng.uniform((n, L)) < 0.6, vocab.null, other)
    else:
        filler = np.full((n, L), vocab.null)
    filler = np.where(rng.uniform((n, L)) < 0.15, extra_modes, filler)
    rank = np.argsort(order, axis=1)
    return np.where(rank < count[:, None], focus[:, None], filler)


# ---------------------------------------------------------------------- denoiser

def time_embedding(t, T: int, dim: int = TIME_EMB_DIM) -> np.ndarray:
    """Sinusoidal features of ``t / T``; shape ``(..., dim)``."""
    s = np.asarray(t, dtype=np.float64)[..., None] / T
    freqs = np.exp(np.linspace(0.0, math.log(200.0), dim // 2))
    ang = s * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class DenoiserParams:
    """Noise predictor: MLP over ``[x, mean token embedding, time features]``."""

    mlp: MlpParams
    token_emb: np.ndarray
    T: int

    def __post_init__(self) -> None:
        want = 2 + self.token_emb.shape[1] + TIME_EMB_DIM
        if self.mlp.in_dim != want or self.mlp.out_dim != 2:
            raise ConfigurationError(f"denoiser MLP must map {want} -> 2")

    def arrays(self) -> list[np.ndarray]:
        return self.mlp.arrays() + [self.token_emb]

    def bump(self) -> None:
        self.mlp.stamp += 1

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.mlp.copy(), self.token_emb.copy(), self.T)


def init_denoiser(vocab: Vocabulary, T: int, rng: RandomSource, hidden=(128, 128, 128),
                  d_emb: int = 8) -> DenoiserParams:
    mlp = init_mlp([2 + d_emb + TIME_EMB_DIM, *hidden, 2], "tanh", rng.split("mlp"))
    emb = 0.5 * rng.split("emb").normal((vocab.size, d_emb))
    return DenoiserParams(mlp, emb, T)


@dataclass
class EpsCache:
    mlp_cache: object
    prompts: np.ndarray


def _as_rows(x, prompts, t):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    if len(prompts) == 1 and len(x) > 1:
        prompts = np.broadcast_to(prompts, (len(x), prompts.shape[1]))
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (len(x),))
    return x, prompts, t


def predict_noise(params: DenoiserParams, x, prompts, t,
                  return_cache: bool = False):
    """``eps_hat(x_t, t, c)`` for a batch; ``prompts`` may be a single prompt."""
    x, prompts, t = _as_rows(x, prompts, t)
    emb = params.token_emb[prompts].mean(axis=1)
    feats = np.concatenate([x, emb, time_embedding(t, params.T)], axis=1)
    out, cache = mlp_forward(params.mlp, feats)
    if return_cache:
        return out, EpsCache(cache, prompts)
    return out


def noise_backward(params: DenoiserParams, cache: EpsCache, out_grad: np.ndarray) -> list[np.ndarray]:
    """Gradients (aligned with ``params.arrays()``) of ``sum(out_grad * eps_hat)``."""
    grads, g_in = mlp_backward(params.mlp, cache.mlp_cache, out_grad)
    d = params.token_emb.shape[1]
    g_emb = g_in[:, 2:2 + d] / cache.prompts.shape[1]
    table = np.zeros_like(params.token_emb)
    for slot in range(cache.prompts.shape[1]):
        np.add.at(table, cache.prompts[:, slot], g_emb)
    return grads + [table]


# ------------------------------------------------------------------ noising / loss

def forward_noise(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Closed form ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    schedule.check_t(t)
    ab = schedule.alpha_bars[np.asarray(t)]
    ab = ab[..., None] if np.ndim(ab) else ab
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def epsilon_loss_and_grad(params: DenoiserParams, x0, prompts, t, eps,
                          schedule: NoiseSchedule) -> tuple[float, list[np.ndarray]]:
    """Noise-regression loss averaged over batch and coordinates, with gradients."""
    x0 = np.atleast_2d(x0)
    if not len(x0):
        raise UsageError("empty batch")
    xt = forward_noise(x0, t, np.atleast_2d(eps), schedule)
    pred, cache = predict_noise(params, xt, prompts, t, return_cache=True)
    resid = pred - np.atleast_2d(eps)
    loss = float(np.mean(resid ** 2))
    grads = noise_backward(params, cache, 2.0 * resid / resid.size)
    return loss, grads


@dataclass
class DenoiserTrainConfig:
    steps: int = 30000
    batch_size: int = 256
    lr: float = 2e-3
    lr_final: float = 1e-4
    hidden: tuple[int, ...] = (128, 128, 128)
    d_emb: int = 8
    log_every: int = 500


@dataclass
class TrainCurve:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def train_denoiser(dataset: MixtureDataset, vocab: Vocabulary, schedule: NoiseSchedule,
                   cfg: DenoiserTrainConfig, rng: RandomSource,
                   init: DenoiserParams | None = None) -> tuple[DenoiserParams, TrainCurve]:
    """Fit the noise predictor with Adam (cosine-decayed learning rate).

    The curve holds the mean loss of each ``log_every`` window; its first entry is
    the loss of the untrained network on one batch.
    """
    if vocab.n_modes != dataset.n_modes:
        raise ConfigurationError("vocabulary and dataset disagree on the number of modes")
    params = init or init_denoiser(vocab, schedule.T, rng.split("init"), cfg.hidden, cfg.d_emb)
    adam = AdamState.for_arrays(params.arrays(), cfg.lr)
    curve = TrainCurve()
    window: list[float] = []
    for step in range(cfg.steps):
        r = rng.split(("batch", step))
        prompts = sample_training_prompts(cfg.batch_size, vocab, r.split("prompt"))
        modes = resolve_modes(prompts, vocab, r.split("mode"))
        x0 = dataset.sample(modes, r.split("x0"))
        t = r.integers(1, schedule.T + 1, cfg.batch_size)
        eps = r.normal((cfg.batch_size, 2))
        loss, grads = epsilon_loss_and_grad(params, x0, prompts, t, eps, schedule)
        if not math.isfinite(loss):
            raise TrainingError(f"denoiser loss diverged at step {step} (last window "
                                f"mean {np.mean(window) if window else float('nan'):.4g})")
        if step == 0:
            curve.steps.append(0)
            curve.losses.append(loss)
        window.append(loss)
        frac = step / max(cfg.steps - 1, 1)
        adam.lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * frac))
        adam_step(adam, params.arrays(), grads)
        params.bump()
        if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
            curve.steps.append(step + 1)
            curve.losses.append(float(np.mean(window)))
            log.info("denoiser step %d loss %.5f", step + 1, curve.losses[-1])
            window = []
    return params, curve


# ---------------------------------------------------------------------- samplers

def _col(v):
    v = np.asarray(v, dtype=np.float64)
    return v[..., None] if v.ndim else v


def ddpm_step(x_t, z, prompts, t, params: DenoiserParams, schedule: NoiseSchedule,
              eps_hat: np.ndarray | None = None) -> np.ndarray:
    """One ancestral step ``x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) eps_hat)/sqrt(alpha_t) + sigma_t z``."""
    schedule.check_t(t)
    x_t = np.atleast_2d(x_t)
    if eps_hat is None:
        eps_hat = predict_noise(params, x_t, prompts, t)
    t = np.asarray(t)
    a, ab, s = _col(schedule.alphas[t]), _col(schedule.alpha_bars[t]), _col(schedule.sigmas[t])
    mean = (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    return mean + s * np.atleast_2d(z)


def ddpm_mean(x_t, eps_hat, t, schedule: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    a, ab = _col(schedule.alphas[t]), _col(schedule.alpha_bars[t])
    return (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)


def ddim_step(x_t, prompts, t, params: DenoiserParams, schedule: NoiseSchedule,
              eta: float = 0.0, z=None, eps_hat: np.ndarray | None = None) -> np.ndarray:
    """DDIM update from ``t`` to ``t-1``; ``eta = 0`` is deterministic, ``eta = 1`` matches DDPM variance."""
    schedule.check_t(t)
    x_t = np.atleast_2d(x_t)
    if eps_hat is None:
        eps_hat = predict_noise(params, x_t, prompts, t)
    t = np.asarray(t)
    ab, ab_prev = _col(schedule.alpha_bars[t]), _col(schedule.alpha_bars[t - 1])
    x0_hat = (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
    direction = np.sqrt(np.clip(1.0 - ab_prev - sigma ** 2, 0.0, None)) * eps_hat
    out = np.sqrt(ab_prev) * x0_hat + direction
    if eta > 0:
        if z is None:
            raise UsageError("stochastic DDIM (eta > 0) needs noise z")
        out = out + sigma * np.atleast_2d(z)
    return out


def denoised_estimate(x_t, prompts, t, params: DenoiserParams, schedule: NoiseSchedule,
                      eps_hat: np.ndarray | None = None) -> np.ndarray:
    """Tweedie-style estimate ``(x_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t)``."""
    schedule.check_t(t)
    x_t = np.atleast_2d(x_t)
    if eps_hat is None:
        eps_hat = predict_noise(params, x_t, prompts, t)
    ab = _col(schedule.alpha_bars[np.asarray(t)])
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def sampler_step(kind: str, x_t, z, prompts, t, params, schedule, eps_hat=None, eta: float = 0.0):
    if kind == "ddpm":
        return ddpm_step(x_t, z, prompts, t, params, schedule, eps_hat)
    if kind == "ddim":
        return ddim_step(x_t, prompts, t, params, schedule, eta, z, eps_hat)
    raise ConfigurationError(f"unknown sampler {kind!r}")


def sample(params: DenoiserParams, schedule: NoiseSchedule, prompts: np.ndarray,
           x_T: np.ndarray, z: np.ndarray, kind: str = "ddpm", eta: float = 0.0) -> np.ndarray:
    """Fixed-prompt sampling for a batch. ``z[:, t]`` is the noise used at step ``t``."""
    x = np.array(x_T, dtype=np.float64)
    prompts = np.atleast_2d(prompts)
    for t in range(schedule.T, 0, -1):
        x = sampler_step(kind, x, z[:, t], prompts, t, params, schedule, eta=eta)
    return x
