"""Toy verifiable-reward environments.

Two tasks cover the advantage structures we care about:

* :class:`GroupedBandit` -- one step per episode, Bernoulli reward per arm.
* :class:`ChainTask` -- ``T`` steps, reward 1 only at the end and only if
  every step picked the correct action.

Both can corrupt the observed reward with a label flip (``label_noise``),
mimicking an imperfect verifier.  Contexts are drawn uniformly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Union

import numpy as np

from .advantages import TrajectoryGroup, trajectory_aggregate
from .config import ConfigError, parse_kv, read_kv
from .policy import PolicyParams, Trajectory, log_softmax

ENUMERATION_LIMIT = 10**6


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean Gaussian perturbation of advantage values."""

    sigma: float = 0.0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


class _Env:
    num_contexts: int
    num_actions: int
    episode_length: int
    label_noise: float

    @property
    def num_states(self) -> int:
        return self.num_contexts * self.episode_length

    def states(self, context: int) -> np.ndarray:
        if not 0 <= context < self.num_contexts:
            raise IndexError(f"context {context} out of range [0, {self.num_contexts})")
        return context * self.episode_length + np.arange(self.episode_length)

    def init_params(self) -> PolicyParams:
        return PolicyParams.zeros(self.num_states, self.num_actions)

    def _check_params(self, params: PolicyParams) -> None:
        if params.shape != (self.num_states, self.num_actions):
            raise ValueError(
                f"policy shape {params.shape} does not fit env ({self.num_states}, {self.num_actions})"
            )

    def _observe(self, success: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        # the flip draw is always consumed so noise level never shifts the stream
        flip = rng.random(success.shape) < self.label_noise
        return np.where(flip, 1.0 - success, success)


@dataclass(frozen=True)
class GroupedBandit(_Env):
    reward_table: np.ndarray
    label_noise: float = 0.0

    def __post_init__(self):
        table = np.array(self.reward_table, dtype=np.float64)
        if table.ndim != 2 or table.shape[1] < 2 or table.shape[0] < 1:
            raise ValueError(f"reward_table must be (contexts, actions>=2), got {table.shape}")
        if np.any(table < 0) or np.any(table > 1):
            raise ValueError("success probabilities must lie in [0, 1]")
        table.setflags(write=False)
        object.__setattr__(self, "reward_table", table)
        _check_noise(self.label_noise)

    @property
    def num_contexts(self) -> int:
        return self.reward_table.shape[0]

    @property
    def num_actions(self) -> int:
        return self.reward_table.shape[1]

    @property
    def episode_length(self) -> int:
        return 1

    def success(self, context: int, actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Clean success indicator for each row of ``actions`` (shape (n, 1))."""
        p = self.reward_table[context, actions[:, 0]]
        return (rng.random(len(actions)) < p).astype(np.float64)

    def success_prob(self, context: int, actions) -> float:
        return float(self.reward_table[context, int(np.asarray(actions).reshape(-1)[0])])

    def best_actions(self) -> np.ndarray:
        """Highest-success action per state (lowest id on ties)."""
        return np.argmax(self.reward_table, axis=1)


@dataclass(frozen=True)
class ChainTask(_Env):
    correct_actions: np.ndarray
    num_actions: int
    label_noise: float = 0.0

    def __post_init__(self):
        correct = np.array(self.correct_actions, dtype=np.int64)
        if correct.ndim != 2 or correct.shape[1] < 2:
            raise ValueError(f"correct_actions must be (contexts, chain_length>=2), got {correct.shape}")
        if self.num_actions < 2:
            raise ValueError("need at least 2 actions")
        if correct.min() < 0 or correct.max() >= self.num_actions:
            raise ValueError("correct action out of range")
        correct.setflags(write=False)
        object.__setattr__(self, "correct_actions", correct)
        _check_noise(self.label_noise)

    @classmethod
    def default(cls, num_contexts: int, num_actions: int, chain_length: int, label_noise: float = 0.0):
        c = np.arange(num_contexts)[:, None]
        t = np.arange(chain_length)[None, :]
        return cls((c + t) % num_actions, num_actions, label_noise)

    @property
    def num_contexts(self) -> int:
        return self.correct_actions.shape[0]

    @property
    def chain_length(self) -> int:
        return self.correct_actions.shape[1]

    @property
    def episode_length(self) -> int:
        return self.chain_length

    def success(self, context: int, actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.all(actions == self.correct_actions[context], axis=1).astype(np.float64)

    def success_prob(self, context: int, actions) -> float:
        return float(np.array_equal(np.asarray(actions), self.correct_actions[context]))

    def best_actions(self) -> np.ndarray:
        return self.correct_actions.reshape(-1).copy()


Env = Union[GroupedBandit, ChainTask]


def _check_noise(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"label_noise must be in [0, 1], got {p}")


def _sample(env: Env, params: PolicyParams, context: int, n: int, rng: np.random.Generator) -> list[Trajectory]:
    env._check_params(params)
    states = env.states(context)
    logp = log_softmax(params.logits[states])
    cdf = np.cumsum(np.exp(logp), axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random((n, len(states)))
    actions = (u[:, :, None] >= cdf[None, :, :]).sum(axis=2)
    actions = np.minimum(actions, env.num_actions - 1)
    success = env.success(context, actions, rng)
    observed = env._observe(success, rng)
    step_idx = np.arange(len(states))
    out = []
    for i in range(n):
        rewards = np.zeros(len(states))
        rewards[-1] = observed[i]
        out.append(
            Trajectory(
                context_ids=states,
                actions=actions[i],
                behavior_logps=logp[step_idx, actions[i]],
                rewards=rewards,
                task_context=context,
            )
        )
    return out


def rollout(env: Env, params: PolicyParams, context: int, rng: np.random.Generator) -> Trajectory:
    return _sample(env, params, context, 1, rng)[0]


def rollout_group(
    env: Env, params: PolicyParams, context: int, group_size: int, rng: np.random.Generator
) -> TrajectoryGroup:
    if group_size < 2:
        raise ValueError(f"group_size must be >= 2 for group-relative estimators, got {group_size}")
    return TrajectoryGroup(context, _sample(env, params, context, group_size, rng))


def inject_advantage_noise(traj: Trajectory, noise: NoiseModel, rng: np.random.Generator) -> Trajectory:
    """Add i.i.d. N(0, sigma^2) to every token advantage; scalar is re-aggregated."""
    if not traj.has_advantages:
        raise ValueError("trajectory has no advantages to perturb")
    tokens = traj.advantage_tokens + noise.sigma * rng.standard_normal(traj.length)
    return replace(traj, advantage_tokens=tokens, advantage_scalar=trajectory_aggregate(tokens))


def expected_reward(env: Env, params: PolicyParams) -> float:
    """Exact noise-free expected reward of the stochastic policy."""
    env._check_params(params)
    probs = np.exp(log_softmax(params.logits))
    if isinstance(env, GroupedBandit):
        return float(np.mean(np.sum(probs * env.reward_table, axis=1)))
    per_ctx = []
    for c in range(env.num_contexts):
        states = env.states(c)
        per_ctx.append(np.prod(probs[states, env.correct_actions[c]]))
    return float(np.mean(per_ctx))


def optimal_expected_reward(env: Env) -> float:
    """Best achievable noise-free reward, by enumerating deterministic policies per context."""
    n_seq = env.num_actions**env.episode_length
    if env.num_contexts * n_seq > ENUMERATION_LIMIT:
        raise ValueError(f"{env.num_contexts * n_seq} action sequences exceed enumeration limit {ENUMERATION_LIMIT}")
    best = []
    for c in range(env.num_contexts):
        best.append(
            max(
                env.success_prob(c, seq)
                for seq in itertools.product(range(env.num_actions), repeat=env.episode_length)
            )
        )
    return float(np.mean(best))


# -- environment description files ---------------------------------------------------

_ENV_KEYS = {"env", "contexts", "actions", "chain_length", "label_noise"}
_ROW_PREFIXES = ("reward_row.", "correct_row.")


def is_env_key(key: str) -> bool:
    return key in _ENV_KEYS or key.startswith(_ROW_PREFIXES)


def env_from_kv(entries: dict[str, tuple[str, int]], source: str = "<env>") -> Env:
    """Build an environment from parsed ``key=value`` entries (unknown keys rejected)."""

    def get(key, conv, default=None):
        if key not in entries:
            if default is None:
                raise ConfigError(f"{source}: missing required key {key!r}")
            return default
        value, lineno = entries[key]
        try:
            return conv(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {value!r}") from exc

    for key, (_, lineno) in entries.items():
        if not is_env_key(key):
            raise ConfigError(f"{source}:{lineno}: unknown env key {key!r}")

    kind = get("env", str)
    n_ctx = get("contexts", int)
    n_act = get("actions", int)
    noise = get("label_noise", float, 0.0)

    def rows(prefix, conv, width):
        out = []
        for c in range(n_ctx):
            key = f"{prefix}{c}"
            if key not in entries:
                return None if not out else _missing(source, key)
            value, lineno = entries[key]
            try:
                row = [conv(x) for x in value.split(",")]
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad row {value!r}") from exc
            if len(row) != width:
                raise ConfigError(f"{source}:{lineno}: {key} needs {width} values, got {len(row)}")
            out.append(row)
        extra = [k for k in entries if k.startswith(prefix) and k[len(prefix):] not in {str(c) for c in range(n_ctx)}]
        if extra:
            raise ConfigError(f"{source}:{entries[extra[0]][1]}: {extra[0]} has no matching context")
        return out

    try:
        if kind == "bandit":
            table = rows("reward_row.", float, n_act)
            if table is None:
                raise ConfigError(f"{source}: bandit needs reward_row.<c> for every context")
            return GroupedBandit(np.array(table), label_noise=noise)
        if kind == "chain":
            length = get("chain_length", int)
            correct = rows("correct_row.", int, length)
            if correct is None:
                return ChainTask.default(n_ctx, n_act, length, noise)
            return ChainTask(np.array(correct), n_act, noise)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    raise ConfigError(f"{source}:{entries['env'][1]}: env must be 'bandit' or 'chain', got {kind!r}")


def _missing(source, key):
    raise ConfigError(f"{source}: missing {key}")


def load_env(path: str | Path) -> Env:
    return env_from_kv(read_kv(path), str(path))


def parse_env(text: str) -> Env:
    return env_from_kv(parse_kv(text, "<env>"))


def env_to_kv(env: Env) -> dict[str, object]:
    out: dict[str, object] = {"env": "bandit" if isinstance(env, GroupedBandit) else "chain"}
    out["contexts"] = env.num_contexts
    out["actions"] = env.num_actions
    if isinstance(env, ChainTask):
        out["chain_length"] = env.chain_length
    out["label_noise"] = float(env.label_noise)
    if isinstance(env, GroupedBandit):
        for c, row in enumerate(env.reward_table):
            out[f"reward_row.{c}"] = [float(x) for x in row]
    else:
        for c, row in enumerate(env.correct_actions):
            out[f"correct_row.{c}"] = [int(x) for x in row]
    return out
