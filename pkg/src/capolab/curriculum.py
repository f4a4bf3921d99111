"""Phase resolution, the advantage-sign gate, and the static difficulty-ordered baseline."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .envs import Env, _sample
from .policy import PolicyParams

# absorbs float error in fraction * steps, e.g. 0.29 * 100 == 28.999999999999996
_FLOOR_SLACK = 1e-9


class Phase(enum.Enum):
    IMITATION = "imitation"
    DISCRIMINATION = "discrimination"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class PhaseSchedule:
    switch_fraction: float
    total_steps: int

    def __post_init__(self):
        if not 0.0 <= self.switch_fraction <= 1.0:
            raise ValueError(f"switch_fraction must lie in [0, 1], got {self.switch_fraction}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")

    @property
    def switch_step(self) -> int:
        return int(math.floor(self.switch_fraction * self.total_steps + _FLOOR_SLACK))


def current_phase(sched: PhaseSchedule, step: int) -> Phase:
    """Hard switch: imitation strictly before ``floor(fraction * total)``."""
    if not 0 <= step < sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps})")
    return Phase.IMITATION if step < sched.switch_step else Phase.DISCRIMINATION


def advantage_mask(phase: Phase, scalar_advantages) -> np.ndarray:
    a = np.asarray(scalar_advantages, dtype=np.float64)
    if phase is Phase.IMITATION:
        return a >= 0.0
    return np.ones(a.shape, dtype=bool)


@dataclass(frozen=True)
class DifficultyEstimate:
    context: int
    pass_rate: float
    k: int


def estimate_difficulty(
    env: Env, params: PolicyParams, context: int, k: int = 16, rng: np.random.Generator | None = None
) -> DifficultyEstimate:
    """pass@k-style success fraction from ``k`` sampled rollouts (observed reward)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    trajs = _sample(env, params, context, k, rng)
    successes = sum(1 for t in trajs if t.total_reward >= 1.0)
    return DifficultyEstimate(context, successes / k, k)


def static_curriculum_order(estimates: Sequence[DifficultyEstimate]) -> list[int]:
    """Easy to hard: descending pass rate, ties by ascending context id."""
    if not estimates:
        raise ValueError("need at least one difficulty estimate")
    return [e.context for e in sorted(estimates, key=lambda e: (-e.pass_rate, e.context))]


def static_batch_contexts(order: Sequence[int], step: int, total_steps: int, batch_groups: int) -> list[int]:
    """Contexts for one step of the static curriculum.

    The visible prefix of ``order`` grows linearly with training progress
    (never shorter than one batch), and the batch cycles round-robin through it.
    """
    n = len(order)
    visible = max(min(batch_groups, n), math.ceil((step + 1) / total_steps * n))
    visible = min(visible, n)
    start = step * batch_groups
    return [order[(start + j) % visible] for j in range(batch_groups)]
