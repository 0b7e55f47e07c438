"""Stochastic prompt-refinement policy over factorized per-slot categoricals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import TIME_EMB_DIM, time_embedding
from .numerics import (
    ConfigurationError,
    MlpParams,
    RandomSource,
    init_mlp,
    log_softmax,
    mlp_backward,
    mlp_forward,
)
from .prompts import Prompt

XHAT_CLIP = 3.0


@dataclass
class PolicyParams:
    """Relu trunk whose last layer holds ``length`` heads of ``vocab_size`` logits each.

    ``token_emb`` embeds the current prompt and the query for the trunk input; it is
    separate from the denoiser's table. Each head also adds a copy term,
    ``copy[slot, 0] * count(prompt) + copy[slot, 1] * count(query)``, where ``count``
    holds per-token occurrence counts, so reusing input tokens is cheap to learn. ``xhat_scale``
    normalises the denoised estimate before it is clipped to ``[-XHAT_CLIP, XHAT_CLIP]``.
    """

    mlp: MlpParams
    token_emb: np.ndarray
    copy_w: np.ndarray  # (L, 2)
    length: int
    T: int
    xhat_scale: float = 5.0

    def __post_init__(self) -> None:
        d = self.token_emb.shape[1]
        if self.mlp.in_dim != 2 + 2 * d + TIME_EMB_DIM:
            raise ConfigurationError("policy trunk input width does not match embeddings")
        if self.mlp.out_dim != self.length * self.vocab_size:
            raise ConfigurationError("policy needs one vocab-sized head per prompt slot")
        if self.copy_w.shape != (self.length, 2):
            raise ConfigurationError("copy weights must have shape (L, 2)")

    @property
    def vocab_size(self) -> int:
        return self.token_emb.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return self.mlp.arrays() + [self.token_emb, self.copy_w]

    def bump(self) -> None:
        self.mlp.stamp += 1

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.mlp.copy(), self.token_emb.copy(), self.copy_w.copy(),
                            self.length, self.T, self.xhat_scale)


def init_policy(vocab_size: int, length: int, T: int, rng: RandomSource, hidden=(64, 64),
                d_emb: int = 8, xhat_scale: float = 5.0, emb_scale: float = 2.0) -> PolicyParams:
    """Heads and copy weights start at zero, so the initial policy is uniform in every slot."""
    mlp = init_mlp([2 + 2 * d_emb + TIME_EMB_DIM, *hidden, length * vocab_size], "relu",
                   rng.split("mlp"), zero_last=True)
    emb = emb_scale * rng.split("emb").normal((vocab_size, d_emb))
    return PolicyParams(mlp, emb, np.zeros((length, 2)), length, T, xhat_scale)


@dataclass(frozen=True)
class MdpState:
    x_hat: np.ndarray
    prompt: Prompt
    query: Prompt
    t: int
    T: int

    def __post_init__(self) -> None:
        if not 1 <= self.t <= self.T:
            raise ConfigurationError(f"state timestep {self.t} outside 1..{self.T}")


@dataclass
class PolicyInputs:
    """Batched raw state pieces; features are rebuilt from these whenever θ changes."""

    x_hat: np.ndarray  # (n, 2), already zeroed where feedback is masked
    prompts: np.ndarray  # (n, L)
    queries: np.ndarray  # (n, L)
    t: np.ndarray  # (n,)

    @classmethod
    def from_states(cls, states: list[MdpState], feedback: bool = True) -> "PolicyInputs":
        xh = np.array([s.x_hat for s in states], dtype=np.float64).reshape(len(states), 2)
        if not feedback:
            xh = np.zeros_like(xh)
        return cls(xh, np.array([s.prompt for s in states]), np.array([s.query for s in states]),
                   np.array([s.t for s in states]))

    def __len__(self) -> int:
        return len(self.t)


def featurize(params: PolicyParams, inputs: PolicyInputs) -> np.ndarray:
    """``[x_hat block | embedded prompt | embedded query | time features]`` per row."""
    xh = np.clip(inputs.x_hat / params.xhat_scale, -XHAT_CLIP, XHAT_CLIP)
    emb_c = params.token_emb[inputs.prompts].mean(axis=1)
    emb_q = params.token_emb[inputs.queries].mean(axis=1)
    return np.concatenate([xh, emb_c, emb_q, time_embedding(inputs.t, params.T)], axis=1)


def featurize_state(state: MdpState, params: PolicyParams, feedback: bool = True) -> np.ndarray:
    return featurize(params, PolicyInputs.from_states([state], feedback))[0]


def token_bags(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    """Per-row token occurrence counts ``(n, V)``."""
    n, L = tokens.shape
    bags = np.zeros((n, vocab_size))
    for slot in range(L):
        bags[np.arange(n), tokens[:, slot]] += 1.0
    return bags


def forward(params: PolicyParams, inputs: PolicyInputs):
    """Per-slot log-probabilities ``(n, L, V)`` plus the cache needed by :func:`backward`."""
    logits, cache = mlp_forward(params.mlp, featurize(params, inputs))
    logits = logits.reshape(len(inputs), params.length, params.vocab_size)
    bag_c = token_bags(inputs.prompts, params.vocab_size)
    bag_q = token_bags(inputs.queries, params.vocab_size)
    logits = (logits + params.copy_w[None, :, 0, None] * bag_c[:, None, :]
              + params.copy_w[None, :, 1, None] * bag_q[:, None, :])
    return log_softmax(logits), (cache, bag_c, bag_q)


def backward(params: PolicyParams, cache, inputs: PolicyInputs,
             dlogits: np.ndarray) -> list[np.ndarray]:
    """Gradients aligned with ``params.arrays()`` given d(objective)/d(logits)."""
    mlp_cache, bag_c, bag_q = cache
    g_copy = np.stack([np.einsum("nlv,nv->l", dlogits, bag_c),
                       np.einsum("nlv,nv->l", dlogits, bag_q)], axis=1)
    grads, g_in = mlp_backward(params.mlp, mlp_cache, dlogits.reshape(len(inputs), -1))
    d = params.token_emb.shape[1]
    L = inputs.prompts.shape[1]
    table = np.zeros_like(params.token_emb)
    g_c = g_in[:, 2:2 + d] / L
    g_q = g_in[:, 2 + d:2 + 2 * d] / L
    for slot in range(L):
        np.add.at(table, inputs.prompts[:, slot], g_c)
        np.add.at(table, inputs.queries[:, slot], g_q)
    return grads + [table, g_copy]


def policy_distribution(params: PolicyParams, state: MdpState, feedback: bool = True) -> np.ndarray:
    """``(L, V)`` log-probabilities of the next prompt given ``state``."""
    logp, _ = forward(params, PolicyInputs.from_states([state], feedback))
    return logp[0]


def sample_tokens(logp: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per slot. ``logp`` is ``(..., L, V)``, ``u`` is ``(..., L)`` in [0, 1)."""
    cdf = np.cumsum(np.exp(logp), axis=-1)
    tok = (cdf < u[..., None]).sum(axis=-1)
    return np.minimum(tok, logp.shape[-1] - 1)


def token_logprobs(logp: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.take_along_axis(logp, actions[..., None], axis=-1)[..., 0]


def sample_action(params: PolicyParams, state: MdpState, rng: RandomSource,
                  feedback: bool = True) -> tuple[Prompt, float]:
    logp = policy_distribution(params, state, feedback)
    tok = sample_tokens(logp, rng.uniform(params.length))
    return tuple(int(v) for v in tok), float(token_logprobs(logp, tok).sum())


def action_logprob(params: PolicyParams, state: MdpState, action: Prompt,
                   feedback: bool = True) -> tuple[float, list[np.ndarray]]:
    """``log pi(action | state)`` and its gradient with respect to ``params.arrays()``."""
    inputs = PolicyInputs.from_states([state], feedback)
    logp, cache = forward(params, inputs)
    act = np.asarray(action)[None]
    value = float(token_logprobs(logp, act).sum())
    onehot = np.zeros_like(logp)
    np.put_along_axis(onehot, act[..., None], 1.0, axis=-1)
    return value, backward(params, cache, inputs, onehot - np.exp(logp))
