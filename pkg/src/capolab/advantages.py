"""Advantage estimators: group-relative, GAE, leave-one-out and global-batch.

Every estimator returns an :class:`AdvantageProfile`; :meth:`AdvantageProfile.attach`
writes the values back onto the trajectories.  Trajectory-level estimators
broadcast one scalar to every token.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .policy import Trajectory

EPS_STD = 1e-8
ESTIMATOR_KINDS = ("group_relative", "gae", "leave_one_out", "global_baseline")
ALGO_TO_KIND = {
    "grpo": "group_relative",
    "ppo": "gae",
    "rloo": "leave_one_out",
    "reinforcepp": "global_baseline",
}


@dataclass
class TrajectoryGroup:
    """``G`` trajectories sampled for the same task context."""

    context: int
    members: list[Trajectory]

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError(f"group needs at least 2 members, got {len(self.members)}")
        for m in self.members:
            if m.task_context != self.context:
                raise ValueError("all group members must share the context")

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def group_rewards(self) -> np.ndarray:
        return np.array([m.total_reward for m in self.members])


@dataclass
class ValueTable:
    """Critic ``V(state, step)``; lookups of unseen entries are an error."""

    values: dict[tuple[int, int], float]

    def __call__(self, state: int, step: int) -> float:
        try:
            return self.values[(int(state), int(step))]
        except KeyError:
            raise KeyError(f"no value for state {state} at step {step}") from None

    def get(self, state: int, step: int, default: float = 0.0) -> float:
        return self.values.get((int(state), int(step)), default)


@dataclass
class AdvantageProfile:
    estimator_kind: str
    token_values: list[np.ndarray]
    scalar_values: np.ndarray

    def __post_init__(self):
        if self.estimator_kind not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator kind {self.estimator_kind!r}")
        self.scalar_values = np.asarray(self.scalar_values, dtype=np.float64)

    def attach(self, trajectories: Sequence[Trajectory]) -> list[Trajectory]:
        if len(trajectories) != len(self.token_values):
            raise ValueError("profile and trajectory counts differ")
        return [
            replace(t, advantage_tokens=tok, advantage_scalar=float(s))
            for t, tok, s in zip(trajectories, self.token_values, self.scalar_values)
        ]


def trajectory_aggregate(token_values) -> float:
    """Token mean; this is the A(tau) the curriculum gate looks at."""
    v = np.asarray(token_values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot aggregate an empty advantage sequence")
    return float(v.mean())


def _broadcast(kind: str, trajectories: Sequence[Trajectory], scalars: np.ndarray) -> AdvantageProfile:
    tokens = [np.full(t.length, a) for t, a in zip(trajectories, scalars)]
    return AdvantageProfile(kind, tokens, np.array([trajectory_aggregate(t) for t in tokens]))


def _standardize(rewards: np.ndarray, eps_std: float) -> np.ndarray:
    std = rewards.std()
    if std == 0.0:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / (std + eps_std)


def grpo_advantage(group: TrajectoryGroup, eps_std: float = EPS_STD) -> AdvantageProfile:
    """(r - mean) / (population std + eps); a zero-variance group gets all zeros."""
    return _broadcast("group_relative", group.members, _standardize(group.group_rewards, eps_std))


def rloo_advantage(group: TrajectoryGroup) -> AdvantageProfile:
    r = group.group_rewards
    g = len(r)
    # r_i - (S - r_i)/(G-1) == (G r_i - S)/(G-1); sums to zero up to rounding
    adv = (g * r - r.sum()) / (g - 1)
    return _broadcast("leave_one_out", group.members, adv)


def reinforcepp_advantage(
    batch: Sequence[Trajectory], eps_std: float = EPS_STD, standardize: bool = True
) -> AdvantageProfile:
    """Global-batch baseline, optionally divided by the batch std."""
    if len(batch) < 2:
        raise ValueError("global-baseline advantage needs a batch of at least 2")
    r = np.array([t.total_reward for t in batch])
    adv = _standardize(r, eps_std) if standardize else r - r.mean()
    return _broadcast("global_baseline", batch, adv)


def returns_to_go(rewards, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def fit_value_table(trajectories: Sequence[Trajectory], gamma: float = 1.0) -> ValueTable:
    """Empirical mean discounted return-to-go per visited (state, step)."""
    if not trajectories:
        raise ValueError("need at least one trajectory to fit a value table")
    sums: dict[tuple[int, int], float] = {}
    counts: dict[tuple[int, int], int] = {}
    for traj in trajectories:
        g = returns_to_go(traj.rewards, gamma)
        for t, s in enumerate(traj.context_ids):
            key = (int(s), t)
            sums[key] = sums.get(key, 0.0) + g[t]
            counts[key] = counts.get(key, 0) + 1
    return ValueTable({k: sums[k] / counts[k] for k in sums})


def gae_advantage(traj: Trajectory, values: ValueTable, gamma: float = 1.0, lam: float = 1.0) -> AdvantageProfile:
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lam must lie in [0, 1]")
    T = traj.length
    v = np.array([values(s, t) for t, s in enumerate(traj.context_ids)] + [0.0])
    adv = np.zeros(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        delta = traj.rewards[t] + gamma * v[t + 1] - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return AdvantageProfile("gae", [adv], np.array([trajectory_aggregate(adv)]))


def gae_batch(trajectories: Sequence[Trajectory], values: ValueTable, gamma: float = 1.0, lam: float = 1.0) -> AdvantageProfile:
    parts = [gae_advantage(t, values, gamma, lam) for t in trajectories]
    return AdvantageProfile(
        "gae",
        [p.token_values[0] for p in parts],
        np.array([p.scalar_values[0] for p in parts]),
    )


def estimate_advantages(
    algo: str,
    groups: Sequence[TrajectoryGroup],
    *,
    eps_std: float = EPS_STD,
    gamma: float = 1.0,
    lam: float = 1.0,
    standardize_batch: bool = True,
) -> list[Trajectory]:
    """Run the estimator selected by ``algo`` over a step's groups; returns annotated trajectories in group order."""
    if algo not in ALGO_TO_KIND:
        raise ValueError(f"unknown algo {algo!r}; expected one of {sorted(ALGO_TO_KIND)}")
    flat = [t for g in groups for t in g.members]
    if algo == "grpo":
        return [t for g in groups for t in grpo_advantage(g, eps_std).attach(g.members)]
    if algo == "rloo":
        return [t for g in groups for t in rloo_advantage(g).attach(g.members)]
    if algo == "reinforcepp":
        return reinforcepp_advantage(flat, eps_std, standardize_batch).attach(flat)
    values = fit_value_table(flat, gamma)
    return gae_batch(flat, values, gamma, lam).attach(flat)
