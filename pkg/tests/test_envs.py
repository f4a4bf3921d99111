import numpy as np
import pytest

from capolab.advantages import grpo_advantage
from capolab.config import ConfigError
from capolab.envs import (
    ChainTask,
    GroupedBandit,
    NoiseModel,
    env_to_kv,
    expected_reward,
    inject_advantage_noise,
    optimal_expected_reward,
    parse_env,
    rollout,
    rollout_group,
)
from capolab.config import format_kv
from capolab.policy import PolicyParams, log_prob


def correct_policy(env: ChainTask, wrong_step=None) -> PolicyParams:
    logits = np.full((env.num_states, env.num_actions), -50.0)
    for c in range(env.num_contexts):
        for t, s in enumerate(env.states(c)):
            a = env.correct_actions[c, t]
            if t == wrong_step:
                a = (a + 1) % env.num_actions
            logits[s, a] = 50.0
    return PolicyParams(logits)


def test_chain_rewards_terminal_only():
    env = ChainTask.default(2, 3, 3)
    rng = np.random.default_rng(0)
    t = rollout(env, correct_policy(env), 1, rng)
    assert t.rewards.tolist() == [0.0, 0.0, 1.0]
    for step in range(3):
        t = rollout(env, correct_policy(env, wrong_step=step), 0, rng)
        assert t.rewards.tolist() == [0.0, 0.0, 0.0]


def test_rollout_records_behavior_logps():
    env = ChainTask.default(2, 3, 4)
    p = PolicyParams(np.random.default_rng(2).normal(size=(8, 3)))
    t = rollout(env, p, 1, np.random.default_rng(3))
    assert t.context_ids.tolist() == [4, 5, 6, 7]
    for s, a, lp in zip(t.context_ids, t.actions, t.behavior_logps):
        assert lp == pytest.approx(log_prob(p, int(s), int(a)), abs=1e-12)


def test_bandit_success_rate():
    env = GroupedBandit(np.array([[0.7, 0.2]]))
    p = PolicyParams([[50.0, -50.0]])
    g = rollout_group(env, p, 0, 100_000, np.random.default_rng(0))
    rewards = g.group_rewards
    assert set(np.unique(rewards)) <= {0.0, 1.0}
    assert 0.69 <= rewards.mean() <= 0.71


def test_group_contract():
    env = ChainTask.default(3, 3, 3)
    p = PolicyParams(np.random.default_rng(0).normal(size=(9, 3)))
    g = rollout_group(env, p, 2, 16, np.random.default_rng(4))
    assert g.size == 16
    assert all(np.array_equal(m.context_ids, g.members[0].context_ids) for m in g.members)
    g2 = rollout_group(env, p, 2, 16, np.random.default_rng(4))
    for a, b in zip(g.members, g2.members):
        assert np.array_equal(a.actions, b.actions) and np.array_equal(a.rewards, b.rewards)
    det = rollout_group(env, correct_policy(env), 0, 8, np.random.default_rng(1))
    assert all(np.array_equal(m.actions, det.members[0].actions) for m in det.members)
    with pytest.raises(ValueError):
        rollout_group(env, p, 0, 1, np.random.default_rng(0))


def test_label_noise_flips_rate():
    env = ChainTask.default(1, 2, 2, label_noise=0.1)
    g = rollout_group(env, correct_policy(env), 0, 50_000, np.random.default_rng(0))
    assert 0.895 <= g.group_rewards.mean() <= 0.905


def _with_advantage(length, value=0.0):
    env = GroupedBandit(np.array([[0.5, 0.5]]))
    t = rollout(env, PolicyParams.zeros(1, 2), 0, np.random.default_rng(0))
    from dataclasses import replace

    return replace(
        t,
        context_ids=np.zeros(length, dtype=int),
        actions=np.zeros(length, dtype=int),
        behavior_logps=np.full(length, -0.5),
        rewards=np.zeros(length),
        advantage_tokens=np.full(length, value),
        advantage_scalar=value,
    )


def test_noise_identity_at_zero_sigma():
    t = _with_advantage(5, 0.3)
    out = inject_advantage_noise(t, NoiseModel(0.0), np.random.default_rng(0))
    assert np.array_equal(out.advantage_tokens, t.advantage_tokens)
    assert out.advantage_scalar == t.advantage_scalar


@pytest.mark.parametrize("sigma,lo,hi", [(1.0, 0.99, 1.01), (2.0, 3.96, 4.04)])
def test_noise_moments(sigma, lo, hi):
    t = _with_advantage(1_000_000)
    out = inject_advantage_noise(t, NoiseModel(sigma), np.random.default_rng(11))
    assert abs(out.advantage_tokens.mean()) <= 0.004 * sigma
    assert lo <= out.advantage_tokens.var() <= hi
    assert out.length == t.length
    assert np.array_equal(out.actions, t.actions) and np.array_equal(out.rewards, t.rewards)


def test_noise_needs_advantages():
    env = GroupedBandit(np.array([[0.5, 0.5]]))
    t = rollout(env, PolicyParams.zeros(1, 2), 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        inject_advantage_noise(t, NoiseModel(1.0), np.random.default_rng(0))
    with pytest.raises(ValueError):
        NoiseModel(-1.0)


def test_optimal_expected_reward():
    assert optimal_expected_reward(GroupedBandit(np.array([[0.9, 0.1], [0.2, 0.8]]))) == pytest.approx(0.85)
    assert optimal_expected_reward(ChainTask.default(3, 3, 4)) == 1.0
    assert optimal_expected_reward(GroupedBandit(np.array([[0.5, 0.5, 0.5]]))) == 0.5


def test_expected_reward_matches_enumeration():
    env = ChainTask.default(2, 3, 2)
    p = PolicyParams(np.random.default_rng(5).normal(size=(4, 3)))
    probs = np.exp(p.logits) / np.exp(p.logits).sum(1, keepdims=True)
    total = 0.0
    for c in range(2):
        s0, s1 = env.states(c)
        for a0 in range(3):
            for a1 in range(3):
                total += 0.5 * probs[s0, a0] * probs[s1, a1] * env.success_prob(c, [a0, a1])
    assert expected_reward(env, p) == pytest.approx(total, abs=1e-14)


def test_env_spec_roundtrip():
    text = "env=bandit\ncontexts=2\nactions=3\n# comment\nreward_row.0=0.1,0.2,0.3\nreward_row.1=1,0,0.5\n"
    env = parse_env(text)
    assert isinstance(env, GroupedBandit)
    np.testing.assert_array_equal(env.reward_table, [[0.1, 0.2, 0.3], [1, 0, 0.5]])
    chain = parse_env("env=chain\ncontexts=2\nactions=3\nchain_length=4\nlabel_noise=0.1\n")
    assert chain.chain_length == 4 and chain.label_noise == 0.1
    again = parse_env(format_kv(env_to_kv(chain)))
    assert np.array_equal(again.correct_actions, chain.correct_actions)


@pytest.mark.parametrize(
    "text",
    [
        "env=bandit\ncontexts=2\nactions=2\nreward_row.0=0.1,0.2\n",
        "env=bandit\ncontexts=1\nactions=2\nreward_row.0=0.1\n",
        "env=bandit\ncontexts=1\nactions=2\nreward_row.0=0.1,1.5\n",
        "env=grid\ncontexts=1\nactions=2\n",
        "env=chain\ncontexts=1\nactions=2\n",
        "env=chain\ncontexts=1\nactions=2\nchain_length=3\ncolour=red\n",
    ],
)
def test_env_spec_errors(text):
    with pytest.raises(ConfigError):
        parse_env(text)


def test_group_advantage_on_rollout():
    env = GroupedBandit(np.array([[0.5, 0.5]]))
    g = rollout_group(env, PolicyParams.zeros(1, 2), 0, 16, np.random.default_rng(0))
    prof = grpo_advantage(g)
    assert abs(prof.scalar_values.mean()) < 1e-10


def test_best_actions():
    bandit = GroupedBandit(np.array([[0.2, 0.9, 0.9], [0.7, 0.1, 0.3]]))
    assert bandit.best_actions().tolist() == [1, 0]
    chain = ChainTask.default(2, 3, 3)
    assert chain.best_actions().tolist() == [0, 1, 2, 1, 2, 0]
