import math

import numpy as np
import pytest

from capolab.envs import ChainTask, GroupedBandit, NoiseModel
from capolab.lab import (
    StepSchedule,
    default_lab_env,
    filtered_estimator_bias,
    mc_gradient_stats,
    step_size,
    true_gradient,
    variance_halving_check,
)
from capolab.policy import PolicyParams, logprob_gradient, softmax


def normal_cdf(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def normal_pdf(x):
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def negative_part_mean(mu, sigma):
    """E[X 1{X <= 0}] for X ~ N(mu, sigma^2)."""
    return mu * normal_cdf(-mu / sigma) - sigma * normal_pdf(mu / sigma)


def bandit_filtered_bias(env, params, sigma):
    probs = softmax(params.logits)
    out = np.zeros_like(params.logits)
    for c in range(env.num_contexts):
        base = probs[c] @ env.reward_table[c]
        for a in range(env.num_actions):
            h = negative_part_mean(env.reward_table[c, a] - base, sigma)
            out += probs[c, a] * h * logprob_gradient(params, c, a)
    return out / env.num_contexts


def test_true_gradient_bandit_closed_form():
    env = default_lab_env()
    params = PolicyParams(np.random.default_rng(0).normal(size=(2, 3)))
    probs = softmax(params.logits)
    want = np.zeros((2, 3))
    for c in range(2):
        r = env.reward_table[c]
        want[c] = probs[c] * (r - probs[c] @ r) / 2
    np.testing.assert_allclose(true_gradient(env, params), want, atol=1e-14)


def test_true_gradient_matches_finite_differences_on_chain():
    from capolab.envs import expected_reward

    env = ChainTask.default(2, 3, 3)
    params = PolicyParams(np.random.default_rng(1).normal(size=(6, 3)))
    fd = np.zeros_like(params.logits)
    for idx in np.ndindex(params.shape):
        hi, lo = params.copy(), params.copy()
        hi.logits[idx] += 1e-6
        lo.logits[idx] -= 1e-6
        fd[idx] = (expected_reward(env, hi) - expected_reward(env, lo)) / 2e-6
    np.testing.assert_allclose(true_gradient(env, params), fd, atol=1e-8)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
def test_filtered_bias_matches_closed_form(sigma):
    env = default_lab_env()
    params = PolicyParams(np.array([[0.3, -0.2, 0.0], [0.1, 0.4, -0.5]]))
    mc = filtered_estimator_bias(env, params, NoiseModel(sigma), 400_000, np.random.default_rng(2))
    exact = bandit_filtered_bias(env, params, sigma)
    se = sigma / math.sqrt(400_000)
    assert np.max(np.abs(mc - exact)) <= 5 * se
    # the gate's discarded mass is the filtered estimator's bias with its sign flipped
    p1 = mc_gradient_stats(env, params, "phase1", NoiseModel(sigma), 400_000, np.random.default_rng(3))
    np.testing.assert_allclose(p1.mean_gradient - true_gradient(env, params), -exact, atol=5 * se)


@pytest.mark.parametrize("estimator", ["phase1", "phase2"])
def test_mse_decomposition_identity(estimator):
    env = default_lab_env()
    params = PolicyParams(np.random.default_rng(4).normal(size=(2, 3)))
    s = mc_gradient_stats(env, params, estimator, NoiseModel(1.0), 50_000, np.random.default_rng(5))
    assert abs(s.mse - (s.bias_norm**2 + s.variance_trace)) <= 1e-9
    assert s.n_samples == 50_000


def test_phase2_is_unbiased():
    env = ChainTask.default(2, 2, 3)
    params = PolicyParams(np.random.default_rng(6).normal(size=(6, 2)))
    s = mc_gradient_stats(env, params, "phase2", NoiseModel(0.5), 200_000, np.random.default_rng(7))
    assert s.bias_norm <= 3 * s.standard_error


def test_worker_count_does_not_change_results():
    env = default_lab_env()
    params = env.init_params()
    a = mc_gradient_stats(env, params, "phase1", NoiseModel(1.0), 200_000, np.random.default_rng(8), workers=1)
    b = mc_gradient_stats(env, params, "phase1", NoiseModel(1.0), 200_000, np.random.default_rng(8), workers=3)
    np.testing.assert_allclose(a.mean_gradient, b.mean_gradient, rtol=1e-10, atol=0)
    assert a.variance_trace == pytest.approx(b.variance_trace, rel=1e-10)
    assert a.mse == pytest.approx(b.mse, rel=1e-10)


def test_zero_centered_filtering_lowers_variance():
    rng = np.random.default_rng(9)
    for _ in range(5):
        C, K = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        env = GroupedBandit(np.repeat(rng.random((C, 1)), K, axis=1))
        params = PolicyParams(rng.normal(size=(C, K)))
        noise = NoiseModel(float(rng.uniform(0.3, 2.0)))
        v1 = mc_gradient_stats(env, params, "phase1", noise, 20_000, np.random.default_rng(1)).variance_trace
        v2 = mc_gradient_stats(env, params, "phase2", noise, 20_000, np.random.default_rng(1)).variance_trace
        assert v1 <= v2


def test_variance_halving():
    ratio = variance_halving_check(1.0, 10**6, np.random.default_rng(10))
    assert 0.48 <= ratio <= 0.52
    # a positive mean shifts mass to the kept side
    assert variance_halving_check(1.0, 10**5, np.random.default_rng(10), mean=1.0) > 0.52
    with pytest.raises(ValueError):
        variance_halving_check(0.0, 10**6, np.random.default_rng(0))
    with pytest.raises(ValueError):
        variance_halving_check(1.0, 1000, np.random.default_rng(0))


def test_step_sizes():
    sched = StepSchedule(0.5, 100)
    assert step_size(sched, 0) == 0.5
    assert step_size(sched, 100) == 0.25
    steps = np.array([step_size(sched, t) for t in range(200_000)])
    assert np.all(np.diff(steps) < 0)
    # harmonic tail: partial sums keep growing, squared sums settle
    assert steps.sum() > 2 * steps[:2000].sum()
    sq = np.cumsum(steps**2)
    assert sq[-1] - sq[100_000] < 1e-3 * sq[-1]
    with pytest.raises(ValueError):
        step_size(sched, -1)
    with pytest.raises(ValueError):
        StepSchedule(0.0, 1.0)


def test_argument_checks():
    env = default_lab_env()
    with pytest.raises(ValueError):
        mc_gradient_stats(env, env.init_params(), "phase3", NoiseModel(1.0), 10_000, np.random.default_rng(0))
    with pytest.raises(ValueError):
        mc_gradient_stats(env, env.init_params(), "phase1", NoiseModel(1.0), 999, np.random.default_rng(0))
    with pytest.raises(ValueError):
        true_gradient(ChainTask.default(2, 10, 6), PolicyParams.zeros(12, 10))


def test_true_gradient_examples():
    env = GroupedBandit(np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(true_gradient(env, PolicyParams.zeros(1, 2)), [[0.25, -0.25]], atol=1e-15)
    sat = PolicyParams([[50.0, -50.0]])
    assert np.linalg.norm(true_gradient(env, sat)) <= 1e-8
    flat = GroupedBandit(np.full((2, 3), 0.4))
    assert np.max(np.abs(true_gradient(flat, PolicyParams(np.random.default_rng(0).normal(size=(2, 3)))))) <= 1e-15


def test_phase2_unbiased_without_noise():
    env = default_lab_env()
    params = PolicyParams(np.array([[0.2, 0.0, -0.4], [0.3, -0.1, 0.0]]))
    s = mc_gradient_stats(env, params, "phase2", NoiseModel(0.0), 10**6, np.random.default_rng(12))
    assert s.bias_norm <= 3 * s.standard_error
    small = mc_gradient_stats(env, params, "phase2", NoiseModel(0.0), 1000, np.random.default_rng(12))
    assert small.bias_norm > s.bias_norm


def test_large_noise_roughly_halves_gradient_variance():
    env = default_lab_env()
    params = env.init_params()
    noise = NoiseModel(20.0)
    v1 = mc_gradient_stats(env, params, "phase1", noise, 200_000, np.random.default_rng(13)).variance_trace
    v2 = mc_gradient_stats(env, params, "phase2", noise, 200_000, np.random.default_rng(13)).variance_trace
    assert v1 <= 0.55 * v2


def test_filtered_bias_partition():
    env = default_lab_env()
    params = PolicyParams(np.array([[0.5, -0.5, 0.0], [0.0, 0.2, -0.2]]))
    noise = NoiseModel(1.0)
    n = 300_000
    p1 = mc_gradient_stats(env, params, "phase1", noise, n, np.random.default_rng(14))
    p2 = mc_gradient_stats(env, params, "phase2", noise, n, np.random.default_rng(14))
    bias = filtered_estimator_bias(env, params, noise, n, np.random.default_rng(14))
    # same draws on all three calls, so the partition is exact up to rounding
    np.testing.assert_allclose(p1.mean_gradient + bias, p2.mean_gradient, atol=1e-12)
    flat = GroupedBandit(np.full((1, 2), 0.5))
    zero = filtered_estimator_bias(flat, PolicyParams([[0.3, -0.3]]), NoiseModel(0.0), 10_000, np.random.default_rng(0))
    assert np.all(zero == 0)


def test_halving_scale_and_shift():
    assert 0.48 <= variance_halving_check(2.0, 10**6, np.random.default_rng(15)) <= 0.52
    assert variance_halving_check(1.0, 10**5, np.random.default_rng(15), mean=50.0) == 1.0


def test_step_size_partial_sum_bounds():
    sched = StepSchedule(0.5, 100.0)
    t = np.arange(10**6)
    steps = sched.alpha0 / (1.0 + t / sched.tau)
    assert steps[0] == step_size(sched, 0) and steps[-1] == step_size(sched, 10**6 - 1)
    assert steps.sum() >= sched.alpha0 * sched.tau * math.log(1 + 10**6 / sched.tau) * (1 - 1e-3)
    assert (steps**2).sum() <= sched.alpha0**2 * sched.tau * math.pi**2 / 6
