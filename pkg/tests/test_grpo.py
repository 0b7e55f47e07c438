import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refineloop import policy as pol
from refineloop.grpo import (
    GroupBatch,
    GrpoConfig,
    build_batch,
    collect,
    group_advantages,
    grpo_loss_and_grad,
    kl_penalty,
    token_surrogate,
    train_policy,
)
from refineloop.numerics import ConfigurationError, RandomSource, UsageError, finite_diff_check
from refineloop.policy import PolicyInputs, init_policy

# ----------------------------------------------------------------- advantages


def test_advantages_example():
    assert np.allclose(group_advantages([1, 2, 3]), [-1.2247, 0, 1.2247], atol=1e-4)
    assert group_advantages([1, 2, 3])[2] == pytest.approx(math.sqrt(1.5), rel=1e-15)


def test_degenerate_group_is_zero():
    assert np.array_equal(group_advantages([0.7] * 8), np.zeros(8))
    assert np.array_equal(group_advantages([1.0, 1.0 + 1e-12], std_eps=1e-8), np.zeros(2))


def test_group_too_small():
    with pytest.raises(ConfigurationError):
        group_advantages([1.0])


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@given(st.lists(finite, min_size=2, max_size=16))
def test_advantages_normalized(r):
    a = group_advantages(r)
    if np.all(a == 0):
        return
    assert abs(a.mean()) < 1e-9 and abs(a.std() - 1) < 1e-9


@given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=16), st.integers(-10**6, 10**6))
def test_advantages_shift_invariant_bit_exact(r, c):
    base = np.array(r, float)
    assert np.array_equal(group_advantages(base + c), group_advantages(base))


@given(st.lists(finite, min_size=2, max_size=16), st.integers(-20, 20))
def test_advantages_power_of_two_scale_bit_exact(r, k):
    base = np.array(r)
    assert np.array_equal(group_advantages(base * 2.0 ** k, std_eps=0), group_advantages(base, std_eps=0))


@given(st.lists(st.integers(-50, 50), min_size=2, max_size=8), st.integers(1, 999))
def test_advantages_rational_scale_bit_exact(r, c):
    # integer rewards times an integer factor are exact in float64
    base = np.array(r, float)
    assert np.array_equal(group_advantages(base * c), group_advantages(base))


# ------------------------------------------------------------------- surrogate

def test_surrogate_examples():
    assert token_surrogate([math.log(1.5)], [0.0], 1.0, 0.2)[0] == pytest.approx(1.2)
    assert token_surrogate([math.log(0.5)], [0.0], -1.0, 0.2)[0] == pytest.approx(-0.8)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=10), st.floats(-3, 3))
def test_surrogate_at_identity_ratio_is_advantage(lp, adv):
    out = token_surrogate(lp, lp, adv, 0.2)
    assert np.allclose(out, adv, rtol=0, atol=0)


def test_surrogate_broadcasts_event_advantage():
    out = token_surrogate(np.zeros((3, 4)), np.zeros((3, 4)), np.array([1.0, -2.0, 0.5]), 0.2)
    assert np.array_equal(out, np.repeat([[1.0], [-2.0], [0.5]], 4, axis=1))


def test_surrogate_misaligned():
    with pytest.raises(UsageError):
        token_surrogate([0.0, 0.0], [0.0], 1.0, 0.2)


# ------------------------------------------------------------------------- KL

def test_kl_example():
    old = np.log([[0.5, 0.5]])
    new = np.log([[0.75, 0.25]])
    assert kl_penalty(old, new) == pytest.approx(0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(2), abs=1e-15)
    assert kl_penalty(old, new) == pytest.approx(0.1438, abs=1e-4)


def _logdist(rng, shape):
    x = rng.normal(shape) * 2
    return x - np.log(np.exp(x).sum(-1, keepdims=True))


@settings(max_examples=200)
@given(st.integers(0, 10**6), st.sampled_from(["old_new", "new_old"]))
def test_kl_nonnegative_and_zero_on_equal(seed, direction):
    r = RandomSource(seed)
    a, b = _logdist(r.split("a"), (4, 7)), _logdist(r.split("b"), (4, 7))
    assert kl_penalty(a, b, direction) >= 0
    assert kl_penalty(a, a, direction) == 0


def test_kl_shape_mismatch():
    with pytest.raises(UsageError):
        kl_penalty(np.zeros((2, 3)), np.zeros((3, 3)))


# ------------------------------------------------------------ full objective

def _synthetic_batch(seed, V=5, L=3, E=6, T=10):
    r = RandomSource(seed)
    old = init_policy(V, L, T, r.split("old"), hidden=(6, 5), d_emb=3)
    for a in old.arrays():
        a[...] = r.split(("w", a.shape)).normal(a.shape) * 0.5
    inputs = PolicyInputs(r.split("xh").normal((E, 2)) * 4, r.split("c").integers(0, V, (E, L)),
                          r.split("q").integers(0, V, (E, L)), r.split("t").integers(1, T + 1, E))
    old_logp, _ = pol.forward(old, inputs)
    acts = pol.sample_tokens(old_logp, r.split("u").uniform((E, L)))
    adv = r.split("adv").normal(E)
    batch = GroupBatch(inputs, acts, pol.token_logprobs(old_logp, acts), old_logp, adv, adv)
    batch.ref_dist = _logdist(r.split("ref"), (E, L, V))
    new = old.copy()
    for a in new.arrays():
        a += r.split(("d", a.shape)).normal(a.shape) * 0.3
    new.bump()
    return old, new, batch


@pytest.mark.parametrize("direction", ["old_new", "new_old"])
@pytest.mark.parametrize("anchor", ["old", "reference"])
def test_objective_gradient_finite_differences(direction, anchor):
    cfg = GrpoConfig(kl_coef=0.3, kl_direction=direction, kl_anchor=anchor)
    worst = 0.0
    for k in range(100):
        _, p, batch = _synthetic_batch(k)
        _, grads, _ = grpo_loss_and_grad(p, batch, cfg)

        def f():
            p.bump()
            return grpo_loss_and_grad(p, batch, cfg)[0]
        worst = max(worst, finite_diff_check(f, p.arrays(), grads, max_coords=40, rng=RandomSource(k)))
    assert worst < 1e-4


def test_first_iteration_equals_reinforce():
    old, _, batch = _synthetic_batch(3)
    E, L = batch.actions.shape
    cfg = GrpoConfig(kl_coef=0.0)
    loss, grads, info = grpo_loss_and_grad(old, batch, cfg)
    assert info.clip_frac == 0
    assert loss == pytest.approx(-batch.event_adv.mean(), abs=1e-15)
    # hand-coded REINFORCE with baseline: each event's action log-prob gradient, weighted by its advantage
    want = [np.zeros_like(a) for a in old.arrays()]
    for e in range(E):
        state = pol.MdpState(batch.inputs.x_hat[e], tuple(batch.inputs.prompts[e]), tuple(batch.inputs.queries[e]),
                             int(batch.inputs.t[e]), old.T)
        _, g = pol.action_logprob(old, state, tuple(int(v) for v in batch.actions[e]))
        for w, gi in zip(want, g):
            w -= batch.event_adv[e] * gi / (E * L)
    for a, b in zip(grads, want):
        assert np.allclose(a, b, atol=1e-13, rtol=1e-10)


def test_zero_advantages_give_zero_gradient():
    _, p, batch = _synthetic_batch(5)
    batch.event_adv = np.zeros_like(batch.event_adv)
    loss, grads, _ = grpo_loss_and_grad(p, batch, GrpoConfig(kl_coef=0.0))
    assert loss == 0.0 and all(np.all(g == 0) for g in grads)


def test_kl_gradient_vanishes_at_old_policy():
    old, _, batch = _synthetic_batch(6)
    batch.event_adv = np.zeros_like(batch.event_adv)
    loss, grads, info = grpo_loss_and_grad(old, batch, GrpoConfig(kl_coef=1.0))
    assert info.kl == 0.0 and max(np.abs(g).max() for g in grads) == 0.0


def test_missing_reference_distribution():
    _, p, batch = _synthetic_batch(7)
    batch.ref_dist = None
    with pytest.raises(UsageError):
        grpo_loss_and_grad(p, batch, GrpoConfig(kl_anchor="reference"))


@pytest.mark.parametrize("kwargs", [dict(group_size=1), dict(clip_eps=0.0), dict(kl_coef=-1.0),
                                    dict(kl_direction="sideways"), dict(kl_anchor="start")])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        GrpoConfig(**kwargs)


# ------------------------------------------------------------------- training

def _pol(env, seed=0):
    return init_policy(env.vocab.size, env.vocab.length, env.T, RandomSource(seed), hidden=(16,))


def test_batch_broadcasts_terminal_advantage(small_env):
    cfg = GrpoConfig(group_size=4)
    groups = collect(small_env, _pol(small_env), [small_env.vocab.mode_query(1)], cfg, RandomSource(0))
    batch = build_batch(groups)
    adv = group_advantages([e.reward for e in groups[0]])
    assert batch.n_events == 4 * small_env.config.n_refine_train
    assert np.array_equal(batch.event_adv, np.repeat(adv, small_env.config.n_refine_train))


def test_feedforward_collection_refines_once_blind(small_env):
    cfg = GrpoConfig(group_size=3)
    groups = collect(small_env, _pol(small_env), [small_env.vocab.mode_query(0)] * 2, cfg, RandomSource(1),
                     mode="feedforward")
    for g in groups:
        for ep in g:
            assert [e.t for e in ep.events] == [small_env.T]
            assert np.all(ep.events[0].x_hat == 0)


def test_zero_updates_returns_initial(small_env):
    p = _pol(small_env)
    before = [a.copy() for a in p.arrays()]
    out, hist, _ = train_policy(small_env, p, [small_env.vocab.mode_query(0)], GrpoConfig(updates=0),
                                RandomSource(0))
    assert hist == [] and all(np.array_equal(a, b) for a, b in zip(out.arrays(), before))


def test_resume_matches_uninterrupted(small_env):
    pool = [small_env.vocab.mode_query(k) for k in range(8)]
    cfg = GrpoConfig(updates=4, queries_per_batch=2, group_size=4, lr=1e-2)
    full, h_full, _ = train_policy(small_env, _pol(small_env), pool, cfg, RandomSource(0))
    half_cfg = GrpoConfig(updates=2, queries_per_batch=2, group_size=4, lr=1e-2)
    half, h1, adam = train_policy(small_env, _pol(small_env), pool, half_cfg, RandomSource(0))
    resumed, h2, _ = train_policy(small_env, half, pool, cfg, RandomSource(0), start_update=2, adam=adam)
    assert all(np.array_equal(a, b) for a, b in zip(full.arrays(), resumed.arrays()))
    assert [m.row() for m in h_full] == [m.row() for m in h1 + h2]


def test_nan_loss_aborts(small_env):
    p = _pol(small_env)
    p.copy_w[:] = np.nan
    with pytest.raises(FloatingPointError):
        train_policy(small_env, p, [small_env.vocab.mode_query(0)], GrpoConfig(updates=1, queries_per_batch=1),
                     RandomSource(0))


def test_unknown_training_mode(small_env):
    with pytest.raises(ConfigurationError):
        train_policy(small_env, _pol(small_env), [small_env.vocab.mode_query(0)], GrpoConfig(updates=1),
                     RandomSource(0), mode="sideways")
