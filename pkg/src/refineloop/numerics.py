"""Small dense-math toolkit: MLPs with hand-written backprop, Adam, softmax helpers,
finite-difference checking and a labelled, splittable random source."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1


class ConfigurationError(ValueError):
    """Raised for invalid shapes, bounds or settings."""


class UsageError(RuntimeError):
    """Raised when an API is called out of order or with stale state."""


# --------------------------------------------------------------------------- MLP

_ACTIVATIONS = ("tanh", "relu")


@dataclass
class MlpParams:
    """Stack of dense layers; hidden layers use ``activations[i]``, the last is linear."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...]
    stamp: int = 0  # bumped on every in-place update so stale caches can be detected

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigurationError("weights and biases must be non-empty and paired")
        if len(self.activations) != len(self.weights) - 1:
            raise ConfigurationError("need one activation per hidden layer")
        for act in self.activations:
            if act not in _ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {act!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigurationError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ConfigurationError(f"layer {i} does not chain with layer {i - 1}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         tuple(self.activations))


def init_mlp(sizes: Sequence[int], activation: str, rng: "RandomSource",
             zero_last: bool = False) -> MlpParams:
    """Glorot-style init. ``zero_last`` zeroes the output layer (uniform softmax heads)."""
    if len(sizes) < 2 or min(sizes) < 1:
        raise ConfigurationError(f"bad layer sizes {sizes}")
    weights, biases = [], []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_last:
            w = np.zeros((a, b))
        else:
            gain = np.sqrt(2.0) if activation == "relu" and not last else 1.0
            w = rng.normal((a, b)) * gain / np.sqrt(a)
        weights.append(w)
        biases.append(np.zeros(b))
    return MlpParams(weights, biases, (activation,) * (len(sizes) - 2))


@dataclass
class MlpCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    owner: int
    stamp: int


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    return 1.0 - a * a if kind == "tanh" else (z > 0).astype(z.dtype)


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    """Evaluate the network on a vector ``(d,)`` or a batch ``(n, d)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ConfigurationError(f"input width {x.shape[-1]} != first layer {params.in_dim}")
    inputs, pre = [], []
    h = x
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = z if i == n_layers - 1 else _act(params.activations[i], z)
    return h, MlpCache(inputs, pre, id(params), params.stamp)


def mlp_backward(params: MlpParams, cache: MlpCache,
                 output_grad: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Backpropagate ``output_grad``; returns (grads aligned with ``params.arrays()``, input grad).

    Batched inputs have their parameter gradients summed over the batch.
    """
    if cache.owner != id(params) or cache.stamp != params.stamp:
        raise UsageError("forward cache does not belong to the current parameters")
    g = np.asarray(output_grad, dtype=np.float64)
    grads: list[np.ndarray] = [None] * (2 * len(params.weights))  # type: ignore[list-item]
    for i in reversed(range(len(params.weights))):
        if i < len(params.weights) - 1:
            a = cache.inputs[i + 1]
            g = g * _act_grad(params.activations[i], cache.pre[i], a)
        h = cache.inputs[i]
        if h.ndim == 1:
            grads[2 * i] = np.outer(h, g)
            grads[2 * i + 1] = g.copy()
        else:
            grads[2 * i] = h.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return grads, g


# -------------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_arrays(cls, arrays: Sequence[np.ndarray], lr: float, **kw) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(a) for a in arrays],
                   v=[np.zeros_like(a) for a in arrays], **kw)


def adam_step(state: AdamState, arrays: Sequence[np.ndarray],
              grads: Sequence[np.ndarray]) -> None:
    """In-place bias-corrected Adam update of ``arrays``."""
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ConfigurationError("parameter / gradient / moment counts differ")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ConfigurationError(f"shape mismatch {p.shape} vs {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ----------------------------------------------------------------------- softmax

def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(logits, axis))


# ----------------------------------------------------------- finite differences

def finite_diff_check(loss: Callable[[], float], arrays: Sequence[np.ndarray],
                      grads: Sequence[np.ndarray], h: float = 1e-5, floor: float = 1e-6,
                      max_coords: int | None = None,
                      rng: "RandomSource | None" = None) -> float:
    """Worst relative error between ``grads`` and central differences of ``loss``.

    ``loss`` is re-evaluated after perturbing ``arrays`` in place. The error of a
    coordinate is ``|a - n| / max(|a| + |n|, floor)``. With ``max_coords`` a random
    subset of coordinates (drawn from ``rng``) is checked instead of all of them.
    """
    coords = [(k, idx) for k, a in enumerate(arrays) for idx in np.ndindex(a.shape)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or RandomSource(0)
        pick = rng.generator.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = 0.0
    for k, idx in coords:
        a = arrays[k]
        orig = a[idx]
        a[idx] = orig + h
        fp = loss()
        a[idx] = orig - h
        fm = loss()
        a[idx] = orig
        num = (fp - fm) / (2.0 * h)
        ana = float(grads[k][idx])
        worst = max(worst, abs(ana - num) / max(abs(ana) + abs(num), floor))
    return worst


# ---------------------------------------------------------------- random source

def _label_key(label: Hashable) -> int:
    digest = hashlib.blake2b(repr(label).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RandomSource:
    """Seeded stream with labelled children.

    ``split(label)`` derives a child purely from ``(seed, path, label)``, so it never
    consumes or depends on the parent's own draws.
    """

    def __init__(self, seed: int, path: tuple[Hashable, ...] = ()) -> None:
        self.seed = int(seed) & _MASK64
        self.path = tuple(path)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        for label in self.path:
            key = _label_key(label)
            entropy += [key & 0xFFFFFFFF, key >> 32]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def split(self, label: Hashable) -> "RandomSource":
        return RandomSource(self.seed, self.path + (label,))

    @property
    def stream_id(self) -> int:
        """64-bit identifier of this stream (seed mixed with its label path)."""
        return _label_key((self.seed, self.path))

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)
