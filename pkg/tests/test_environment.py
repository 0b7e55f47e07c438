import itertools

import numpy as np
import pytest

from refineloop.environment import (
    Env,
    EnvConfig,
    EpisodeError,
    episode_specs,
    group_specs,
    inference_schedule,
    plan_specs,
    replay_plans,
    rollout,
    rollout_batch,
    sample_training_schedule,
)
from refineloop.numerics import ConfigurationError, RandomSource
from refineloop.policy import init_policy


def _policy(env, seed=0, scale=0.3):
    p = init_policy(env.vocab.size, env.vocab.length, env.T, RandomSource(seed), hidden=(16,))
    r = RandomSource(seed + 100)
    for a in p.arrays():
        a[...] += r.normal(a.shape) * scale
    p.bump()
    return p


def test_training_schedule_single_step_uniform():
    n = 100_000
    r = RandomSource(0)
    draws = [sample_training_schedule(4, 1, r.split(i))[0] for i in range(n)]
    freq = np.bincount(draws, minlength=5)[1:] / n
    se = np.sqrt(0.25 * 0.75 / n)
    assert np.all(np.abs(freq - 0.25) < 4 * se)


def test_training_schedule_pairs_uniform():
    n = 100_000
    r = RandomSource(1)
    counts = {}
    for i in range(n):
        s = sample_training_schedule(10, 2, r.split(i))
        assert s[0] > s[1]
        counts[s] = counts.get(s, 0) + 1
    assert set(counts) == {tuple(sorted(p, reverse=True)) for p in itertools.combinations(range(1, 11), 2)}
    p = 1 / 45
    se = np.sqrt(p * (1 - p) / n)
    assert max(abs(c / n - p) for c in counts.values()) < 4.5 * se


def test_full_schedule_is_every_step():
    assert sample_training_schedule(6, 6, RandomSource(0)) == (6, 5, 4, 3, 2, 1)


@pytest.mark.parametrize("n,want", [(1, (10,)), (2, (10, 5)), (10, tuple(range(10, 0, -1)))])
def test_inference_schedule_examples(n, want):
    assert inference_schedule(10, n) == want


@pytest.mark.parametrize("T", [7, 10, 50])
def test_inference_schedule_properties(T):
    for n in range(1, T + 1):
        s = inference_schedule(T, n)
        assert s[0] == T and len(s) == n and len(set(s)) == n and min(s) >= 1


@pytest.mark.parametrize("n", [0, 11])
def test_schedules_reject_bad_counts(n):
    with pytest.raises(ConfigurationError):
        inference_schedule(10, n)
    with pytest.raises(ConfigurationError):
        sample_training_schedule(10, n, RandomSource(0))


def test_env_rejects_too_many_refinements(small_env):
    with pytest.raises(ConfigurationError):
        Env(small_env.denoiser, small_env.schedule, small_env.dataset, small_env.vocab, small_env.reward,
            EnvConfig(n_refine_infer=11))


def test_event_count_and_prompt_constancy(small_env):
    p = _policy(small_env)
    q = small_env.vocab.mode_query(2)
    rec = rollout(small_env, p, q, (9, 4, 2), RandomSource(0))
    assert [e.t for e in rec.events] == [9, 4, 2] and rec.policy_calls == 3
    path = rec.prompt_path
    for t in range(10, 0, -1):
        if t in (9, 4, 2):
            assert path[t] == rec.events[[9, 4, 2].index(t)].action
        elif t < 10:
            assert path[t] == path[t + 1]
    assert path[10] == q and rec.final_prompt == path[1]
    assert rec.events[0].prompt == q
    assert rec.events[1].prompt == rec.events[0].action


def test_always_query_policy_matches_identity(small_env):
    q = small_env.vocab.mode_query(5)
    p = init_policy(small_env.vocab.size, 4, 10, RandomSource(0), hidden=(4,))
    bias = p.mlp.biases[-1].reshape(4, small_env.vocab.size)
    for slot, tok in enumerate(q):
        bias[slot, tok] = 60.0
    specs = episode_specs(small_env, [q] * 20, RandomSource(3), tuple(range(10, 0, -1)))
    a = rollout_batch(small_env, p, specs)
    b = rollout_batch(small_env, None, specs, tag="identity")
    assert all(r.policy_calls == 10 and r.final_prompt == q for r in a)
    assert np.allclose([r.x0 for r in a], [r.x0 for r in b], atol=1e-12, rtol=0)


def test_rollout_deterministic(small_env):
    p = _policy(small_env)
    q = small_env.vocab.mode_query(0)
    r1 = rollout(small_env, p, q, (10, 5), RandomSource(9))
    r2 = rollout(small_env, p, q, (10, 5), RandomSource(9))
    assert np.array_equal(r1.x0, r2.x0) and r1.final_prompt == r2.final_prompt
    assert np.array_equal(r1.trajectory, r2.trajectory)


def test_results_independent_of_threads(small_env):
    p = _policy(small_env)
    qs = [small_env.vocab.mode_query(k % 8) for k in range(200)]
    specs = episode_specs(small_env, qs, RandomSource(4), (10, 6, 3))
    a = rollout_batch(small_env, p, specs, threads=1)
    b = rollout_batch(small_env, p, specs, threads=3)
    assert np.array_equal([r.x0 for r in a], [r.x0 for r in b])
    assert [r.final_prompt for r in a] == [r.final_prompt for r in b]


def test_precomputed_plans_use_no_policy_in_loop(small_env):
    p = _policy(small_env)
    qs = [small_env.vocab.mode_query(k) for k in range(8)]
    specs = plan_specs(p, small_env, episode_specs(small_env, qs, RandomSource(5), (10, 5, 2)))
    recs = replay_plans(small_env, specs)
    assert all(r.policy_calls == 0 and not r.events for r in recs)
    assert all(r.final_prompt == s.plan[2] for r, s in zip(recs, specs))
    with pytest.raises(ConfigurationError):
        replay_plans(small_env, episode_specs(small_env, qs, RandomSource(5)))


def test_precomputed_rollout_mode(small_env):
    p = _policy(small_env)
    rec = rollout(small_env, p, small_env.vocab.mode_query(1), (10, 5), RandomSource(0), feedback="precomputed")
    assert rec.policy_calls == 0 and rec.tag == "precomputed"


def test_no_feedback_rollouts_see_zero_xhat(small_env):
    p = _policy(small_env)
    specs = episode_specs(small_env, [small_env.vocab.mode_query(3)] * 4, RandomSource(6), (10, 5))
    for r in rollout_batch(small_env, p, specs, feedback=False):
        assert all(np.all(e.x_hat == 0) for e in r.events)


@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
def test_non_finite_latent_raises(small_env):
    small_env.denoiser.mlp.biases[-1][:] = np.inf
    small_env.denoiser.bump()
    with pytest.raises(EpisodeError) as err:
        rollout(small_env, None, small_env.vocab.mode_query(0), (10,), RandomSource(0))
    assert "trajectory" in err.value.dump


@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
def test_batched_non_finite_is_nan_reward(small_env):
    small_env.denoiser.mlp.biases[-1][:] = np.inf
    small_env.denoiser.bump()
    recs = rollout_batch(small_env, None, episode_specs(small_env, [small_env.vocab.mode_query(0)], RandomSource(0)))
    assert np.isnan(recs[0].reward)


def test_rollout_rejects_empty_schedule(small_env):
    with pytest.raises(ConfigurationError):
        rollout(small_env, None, small_env.vocab.mode_query(0), (), RandomSource(0))


def test_group_schedule_shared_unless_per_member(small_env):
    q = small_env.vocab.mode_query(0)
    env2 = Env(small_env.denoiser, small_env.schedule, small_env.dataset, small_env.vocab, small_env.reward,
               EnvConfig(n_refine_train=3))
    shared = group_specs(env2, q, 8, RandomSource(0))
    assert len({s.refine_steps for s in shared}) == 1
    assert len({s.noise.stream_id for s in shared}) == 8
    own = group_specs(env2, q, 8, RandomSource(0), per_member=True)
    assert len({s.refine_steps for s in own}) > 1
    with pytest.raises(ConfigurationError):
        group_specs(env2, q, 1, RandomSource(0))
