"""Tabular contextual softmax policy.

Each context (state) owns one row of logits; the policy over actions is the
softmax of that row.  Everything here is a pure function of the logits, so the
exact gradient, entropy and KL are cheap enough for enumeration-based checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np


@dataclass(frozen=True)
class ActionSpace:
    num_actions: int

    def __post_init__(self):
        if int(self.num_actions) < 2:
            raise ValueError(f"need at least 2 actions, got {self.num_actions}")


@dataclass
class PolicyParams:
    """Logit table of shape (num_contexts, num_actions)."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.array(self.logits, dtype=np.float64)
        if self.logits.ndim != 2:
            raise ValueError(f"logits must be 2-D, got shape {self.logits.shape}")
        ActionSpace(self.logits.shape[1])
        if self.logits.shape[0] < 1:
            raise ValueError("need at least one context")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    @classmethod
    def zeros(cls, num_contexts: int, num_actions: int) -> "PolicyParams":
        return cls(np.zeros((num_contexts, num_actions)))

    @property
    def num_contexts(self) -> int:
        return self.logits.shape[0]

    @property
    def num_actions(self) -> int:
        return self.logits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.logits.copy())


@dataclass(frozen=True)
class ReferencePolicy:
    """Read-only snapshot of a policy, used as the KL anchor."""

    logits: np.ndarray = field(repr=False)

    @classmethod
    def capture(cls, params: PolicyParams) -> "ReferencePolicy":
        frozen = params.logits.copy()
        frozen.setflags(write=False)
        return cls(frozen)

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape


@dataclass
class Trajectory:
    """One sampled episode.

    ``context_ids`` are policy rows (states), one per step.  The advantage
    fields stay ``None`` until an estimator fills them.
    """

    context_ids: np.ndarray
    actions: np.ndarray
    behavior_logps: np.ndarray
    rewards: np.ndarray
    advantage_tokens: Optional[np.ndarray] = None
    advantage_scalar: Optional[float] = None
    task_context: int = 0

    def __post_init__(self):
        self.context_ids = np.asarray(self.context_ids, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.behavior_logps = np.asarray(self.behavior_logps, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        n = len(self.context_ids)
        if n < 1:
            raise ValueError("trajectory must have at least one step")
        for name in ("actions", "behavior_logps", "rewards"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length {len(getattr(self, name))} != {n}")
        if np.any(self.behavior_logps > 0):
            raise ValueError("behavior log-probabilities must be <= 0")
        if self.advantage_tokens is not None:
            self.advantage_tokens = np.asarray(self.advantage_tokens, dtype=np.float64)
            if len(self.advantage_tokens) != n:
                raise ValueError("advantage_tokens length mismatch")

    @property
    def length(self) -> int:
        return len(self.context_ids)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    @property
    def has_advantages(self) -> bool:
        return self.advantage_tokens is not None and self.advantage_scalar is not None


def _check_index(params: PolicyParams, context: int, action: Optional[int] = None) -> None:
    if not 0 <= context < params.num_contexts:
        raise IndexError(f"context {context} out of range [0, {params.num_contexts})")
    if action is not None and not 0 <= action < params.num_actions:
        raise IndexError(f"action {action} out of range [0, {params.num_actions})")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, stabilised by the row maximum."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def action_probs(params: PolicyParams, context: int) -> np.ndarray:
    _check_index(params, context)
    return softmax(params.logits[context])


def log_prob(params: PolicyParams, context: int, action: int) -> float:
    _check_index(params, context, action)
    return float(log_softmax(params.logits[context])[action])


def sample_action(params: PolicyParams, context: int, rng: np.random.Generator) -> tuple[int, float]:
    _check_index(params, context)
    logp = log_softmax(params.logits[context])
    probs = np.exp(logp)
    # inverse-CDF draw: exactly one uniform consumed per call
    u = rng.random()
    action = int(np.searchsorted(np.cumsum(probs), u * probs.sum(), side="right"))
    action = min(action, params.num_actions - 1)
    return action, float(logp[action])


def logprob_gradient(params: PolicyParams, context: int, action: int) -> np.ndarray:
    """d log pi(action | context) / d logits, shaped like the logit table."""
    _check_index(params, context, action)
    grad = np.zeros_like(params.logits)
    grad[context] = -softmax(params.logits[context])
    grad[context, action] += 1.0
    return grad


def policy_entropy(params: PolicyParams, context: int) -> float:
    _check_index(params, context)
    logp = log_softmax(params.logits[context])
    return float(max(0.0, -np.sum(np.exp(logp) * logp)))


def mean_entropy(params: PolicyParams) -> float:
    logp = log_softmax(params.logits)
    return float(np.mean(np.maximum(0.0, -np.sum(np.exp(logp) * logp, axis=1))))


def _kl_rows(logits: np.ndarray, ref_logits: np.ndarray) -> np.ndarray:
    logp = log_softmax(logits)
    logq = log_softmax(ref_logits)
    return np.maximum(0.0, np.sum(np.exp(logp) * (logp - logq), axis=-1))


def _resolve_contexts(params: PolicyParams, contexts: Optional[Iterable[int]]) -> np.ndarray:
    if contexts is None:
        return np.arange(params.num_contexts)
    ctx = np.unique(np.fromiter((int(c) for c in contexts), dtype=np.int64))
    if ctx.size == 0:
        raise ValueError("need at least one context for KL")
    if ctx.min() < 0 or ctx.max() >= params.num_contexts:
        raise IndexError("context out of range")
    return ctx


def kl_to_reference(
    params: PolicyParams,
    ref: ReferencePolicy,
    contexts: Optional[Iterable[int]] = None,
) -> float:
    """Mean over ``contexts`` of the exact KL(pi_theta(.|c) || pi_ref(.|c))."""
    if ref.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs reference {ref.shape}")
    ctx = _resolve_contexts(params, contexts)
    return float(np.mean(_kl_rows(params.logits[ctx], ref.logits[ctx])))


def kl_gradient(
    params: PolicyParams,
    ref: ReferencePolicy,
    contexts: Optional[Iterable[int]] = None,
) -> np.ndarray:
    """Gradient of :func:`kl_to_reference` with respect to the logits."""
    if ref.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs reference {ref.shape}")
    ctx = _resolve_contexts(params, contexts)
    logp = log_softmax(params.logits[ctx])
    logq = log_softmax(ref.logits[ctx])
    p = np.exp(logp)
    diff = logp - logq
    kl = np.sum(p * diff, axis=1, keepdims=True)
    grad = np.zeros_like(params.logits)
    grad[ctx] = p * (diff - kl) / len(ctx)
    return grad


def save_checkpoint(params: PolicyParams, path: str | Path) -> None:
    lines = [f"contexts={params.num_contexts} actions={params.num_actions}"]
    for row in params.logits:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> PolicyParams:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty checkpoint")
    header = dict(tok.split("=", 1) for tok in text[0].split())
    try:
        n, k = int(header["contexts"]), int(header["actions"])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}:1: bad checkpoint header {text[0]!r}") from exc
    rows = [line.split() for line in text[1:] if line.strip()]
    if len(rows) != n or any(len(r) != k for r in rows):
        raise ValueError(f"{path}: expected {n} rows of {k} logits")
    return PolicyParams(np.array(rows, dtype=np.float64))
