"""Monte Carlo study of the filtered vs. unfiltered single-sample gradient estimators.

The single-sample estimator is ``g_hat = grad log pi(o|c) * A_hat`` with
``A_hat = A_pi + eps`` and ``eps ~ N(0, sigma^2)`` drawn per token.  The
imitation form multiplies by ``1{A_hat >= 0}``.  Exact reference gradients
come from enumerating every context and action sequence.

Sampling runs in fixed-size chunks, each with its own seed stream spawned
from one root, and chunk moments are merged in order with the pairwise
(Chan et al.) update.  Results therefore do not depend on ``workers``.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .envs import ENUMERATION_LIMIT, ChainTask, Env, GroupedBandit, NoiseModel
from .policy import PolicyParams, log_softmax

CHUNK = 1 << 16
ESTIMATORS = ("phase1", "phase2")


@dataclass
class GradientStats:
    mean_gradient: np.ndarray
    bias_norm: float
    variance_trace: float
    mse: float
    n_samples: int

    @property
    def standard_error(self) -> float:
        """RMS error of the sample mean as an estimate of its expectation."""
        return math.sqrt(self.variance_trace / self.n_samples)


@dataclass(frozen=True)
class StepSchedule:
    """Harmonic-type step sizes ``alpha0 / (1 + t / tau)``."""

    alpha0: float = 0.5
    tau: float = 100.0

    def __post_init__(self):
        if not (self.alpha0 > 0 and self.tau > 0):
            raise ValueError("alpha0 and tau must be positive")


def step_size(sched: StepSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    return sched.alpha0 / (1.0 + t / sched.tau)


def _enumeration_size(env: Env) -> int:
    return env.num_contexts * env.num_actions**env.episode_length * env.episode_length


def _check_enumerable(env: Env) -> None:
    size = _enumeration_size(env)
    if size > ENUMERATION_LIMIT:
        raise ValueError(f"{size} (context, sequence, step) combinations exceed the limit {ENUMERATION_LIMIT}")


def _context_baselines(env: Env, probs: np.ndarray) -> np.ndarray:
    if isinstance(env, GroupedBandit):
        return np.sum(probs * env.reward_table, axis=1)
    return np.array(
        [np.prod(probs[env.states(c), env.correct_actions[c]]) for c in range(env.num_contexts)]
    )


def true_gradient(env: Env, params: PolicyParams) -> np.ndarray:
    """Exact ``E[grad log pi(o|c) * A_pi(c, o)]`` under uniform contexts."""
    _check_enumerable(env)
    env._check_params(params)
    probs = np.exp(log_softmax(params.logits))
    baseline = _context_baselines(env, probs)
    grad = np.zeros_like(params.logits)
    K = env.num_actions
    for c in range(env.num_contexts):
        states = env.states(c)
        for seq in itertools.product(range(K), repeat=env.episode_length):
            p_seq = float(np.prod(probs[states, seq]))
            adv = env.success_prob(c, seq) - baseline[c]
            if p_seq == 0.0 or adv == 0.0:
                continue
            for s, a in zip(states, seq):
                row = -probs[s].copy()
                row[a] += 1.0
                grad[s] += p_seq * adv * row
    return grad / env.num_contexts


def _draw(env: Env, params: PolicyParams, noise: NoiseModel, m: int, gen: np.random.Generator):
    """Score vectors (m, S, K) per token and per-token noisy advantages (m, T)."""
    probs = np.exp(log_softmax(params.logits))
    baseline = _context_baselines(env, probs)
    T = env.episode_length
    ctx = gen.integers(env.num_contexts, size=m)
    states = ctx[:, None] * T + np.arange(T)[None, :]
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    u = gen.random((m, T))
    actions = np.minimum((u[:, :, None] >= cdf[states]).sum(axis=2), env.num_actions - 1)
    if isinstance(env, GroupedBandit):
        clean = env.reward_table[ctx, actions[:, 0]]
    else:
        clean = np.all(actions == env.correct_actions[ctx], axis=1).astype(np.float64)
    adv = (clean - baseline[ctx])[:, None] + noise.sigma * gen.standard_normal((m, T))
    return states, actions, adv, probs


def _estimates(states, actions, weights, probs, shape) -> np.ndarray:
    """Per-sample gradient vectors: sum_t weights_t * (onehot(a_t) - pi(s_t))."""
    m, T = states.shape
    out = np.zeros((m,) + shape)
    rows = np.arange(m)
    for t in range(T):
        s, a, w = states[:, t], actions[:, t], weights[:, t]
        out[rows, s, :] -= probs[s] * w[:, None]
        out[rows, s, a] += w
    return out.reshape(m, -1)


@dataclass
class _Moments:
    n: int
    mean: np.ndarray
    m2: np.ndarray
    sq_err: float
    extra: np.ndarray

    def merge(self, other: "_Moments") -> "_Moments":
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.n * other.n / n)
        extra_mean = self.extra + (other.extra - self.extra) * (other.n / n)
        return _Moments(n, mean, m2, self.sq_err + other.sq_err, extra_mean)


def _chunk_moments(env, params, noise, estimator, m, seed, g_true) -> _Moments:
    gen = np.random.default_rng(seed)
    states, actions, adv, probs = _draw(env, params, noise, m, gen)
    full = _estimates(states, actions, adv, probs, params.shape)
    neg = _estimates(states, actions, np.where(adv < 0.0, adv, 0.0), probs, params.shape)
    x = full - neg if estimator == "phase1" else full
    mean = x.mean(axis=0)
    m2 = ((x - mean) ** 2).sum(axis=0)
    sq_err = float(((x - g_true) ** 2).sum())
    return _Moments(m, mean, m2, sq_err, neg.mean(axis=0))


def _run_chunks(env, params, noise, estimator, n, rng, workers, g_true) -> _Moments:
    if n < 1:
        raise ValueError("n must be positive")
    n_chunks = -(-n // CHUNK)
    sizes = [CHUNK] * (n_chunks - 1) + [n - CHUNK * (n_chunks - 1)]
    root = np.random.SeedSequence(int(rng.integers(0, 2**63)))
    seeds = root.spawn(n_chunks)
    job = lambda args: _chunk_moments(env, params, noise, estimator, args[0], args[1], g_true)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(job, zip(sizes, seeds)))
    else:
        parts = [job(a) for a in zip(sizes, seeds)]
    total = parts[0]
    for p in parts[1:]:
        total = total.merge(p)
    return total


def mc_gradient_stats(
    env: Env,
    params: PolicyParams,
    estimator: str,
    noise: NoiseModel,
    n: int,
    rng: np.random.Generator,
    *,
    workers: int = 1,
) -> GradientStats:
    """Bias, total variance and MSE of ``n`` single-sample gradient estimates."""
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}, got {estimator!r}")
    if n < 1000:
        raise ValueError("n must be >= 1000")
    g = true_gradient(env, params).reshape(-1)
    mom = _run_chunks(env, params, noise, estimator, n, rng, workers, g)
    return GradientStats(
        mean_gradient=mom.mean.reshape(params.shape),
        bias_norm=float(np.linalg.norm(mom.mean - g)),
        variance_trace=float(mom.m2.sum() / mom.n),
        mse=mom.sq_err / mom.n,
        n_samples=mom.n,
    )


def filtered_estimator_bias(
    env: Env, params: PolicyParams, noise: NoiseModel, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Monte Carlo ``E[grad log pi * A_hat * 1{A_hat <= 0}]``.

    This is the mass the imitation gate throws away, i.e. the unfiltered mean
    minus the filtered mean (``E[g_hat] - E[g_hat_1]``).  The filtered
    estimator's bias ``E[g_hat_1] - g`` is its negative.
    """
    if n < 1000:
        raise ValueError("n must be >= 1000")
    g = true_gradient(env, params).reshape(-1)
    mom = _run_chunks(env, params, noise, "phase2", n, rng, 1, g)
    return mom.extra.reshape(params.shape)


def variance_halving_check(sigma: float, n: int, rng: np.random.Generator, mean: float = 0.0) -> float:
    """``E[A^2 1{A > 0}] / E[A^2]`` for ``A ~ N(mean, sigma^2)``."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    if n < 10**5:
        raise ValueError("n must be >= 1e5")
    a = mean + sigma * rng.standard_normal(n)
    sq = a * a
    return float(sq[a > 0].sum() / sq.sum())


def default_lab_env() -> GroupedBandit:
    return GroupedBandit(np.array([[0.8, 0.2, 0.5], [0.3, 0.6, 0.3]]))
