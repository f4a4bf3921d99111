"""Clipped surrogate objective with a KL anchor, in filtered and full form.

For a batch of N trajectories the objective is

    (1/N) sum_i m_i (1/T_i) sum_t min(rho_t A_t, clip(rho_t, 1-eps, 1+eps) A_t)
        - beta * KL(pi_theta || pi_ref)

with ``m_i = 1{A(tau_i) >= 0}`` in the imitation phase and ``m_i = 1`` otherwise.
The denominator stays N in both phases, and the KL term sits outside the
gate so it never vanishes.  Gradients are analytic; at a clip kink the
active branch of the min is used.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .policy import PolicyParams, ReferencePolicy, Trajectory, kl_gradient, kl_to_reference, log_softmax

KINK_TOL = 1e-6


@dataclass(frozen=True)
class ClipConfig:
    epsilon: float = 0.2
    beta: float = 0.02

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


@dataclass
class ObjectiveReport:
    objective_value: float
    gradient: np.ndarray
    num_contributing: int
    kl_value: float


def importance_ratio(new_logp: float, old_logp: float) -> float:
    return float(np.exp(new_logp - old_logp))


def clipped_term(rho: float, advantage: float, epsilon: float) -> float:
    return min(rho * advantage, min(max(rho, 1.0 - epsilon), 1.0 + epsilon) * advantage)


def _stack(batch: Sequence[Trajectory]):
    for t in batch:
        if not t.has_advantages:
            raise ValueError("every trajectory needs advantages before evaluating the objective")
    states = np.concatenate([t.context_ids for t in batch])
    actions = np.concatenate([t.actions for t in batch])
    old = np.concatenate([t.behavior_logps for t in batch])
    adv = np.concatenate([t.advantage_tokens for t in batch])
    inv_len = np.concatenate([np.full(t.length, 1.0 / t.length) for t in batch])
    return states, actions, old, adv, inv_len


def _token_terms(params: PolicyParams, states, actions, old, adv, epsilon):
    """Per-token surrogate value and the factor multiplying grad log pi."""
    logp_all = log_softmax(params.logits[states])
    logp = logp_all[np.arange(len(states)), actions]
    rho = np.exp(logp - old)
    clipped = np.clip(rho, 1.0 - epsilon, 1.0 + epsilon)
    unclipped_val = rho * adv
    clipped_val = clipped * adv
    value = np.minimum(unclipped_val, clipped_val)
    # derivative flows only through the unclipped branch when it is the active one
    active = unclipped_val <= clipped_val
    coef = np.where(active, unclipped_val, 0.0)
    return value, coef, np.exp(logp_all)


def surrogate_objective(
    batch: Sequence[Trajectory],
    params: PolicyParams,
    ref: ReferencePolicy,
    cfg: ClipConfig,
    *,
    normalizer: Optional[int] = None,
    kl_contexts: Optional[Iterable[int]] = None,
) -> ObjectiveReport:
    """Ungated objective over ``batch``.

    ``normalizer`` overrides the batch-size denominator and ``kl_contexts`` the
    set of states the KL is averaged over; both exist so a sub-batch can be
    scored on the full batch's terms.
    """
    if normalizer is None:
        if not batch:
            raise ValueError("empty batch")
        normalizer = len(batch)
    if kl_contexts is None:
        kl_contexts = np.unique(np.concatenate([t.context_ids for t in batch]))
    kl_contexts = np.asarray(list(kl_contexts), dtype=np.int64)

    grad = np.zeros_like(params.logits)
    surrogate = 0.0
    if batch:
        states, actions, old, adv, inv_len = _stack(batch)
        value, coef, probs = _token_terms(params, states, actions, old, adv, cfg.epsilon)
        w = inv_len / normalizer
        surrogate = float(np.sum(w * value))
        # d rho / d logits = rho * (onehot(a) - pi)
        row_grad = -probs * (w * coef)[:, None]
        row_grad[np.arange(len(states)), actions] += w * coef
        np.add.at(grad, states, row_grad)

    kl = 0.0
    if cfg.beta != 0.0 and kl_contexts.size:
        kl = kl_to_reference(params, ref, kl_contexts)
        grad = grad - cfg.beta * kl_gradient(params, ref, kl_contexts)
        objective = surrogate - cfg.beta * kl
    else:
        if kl_contexts.size and ref.shape == params.shape:
            kl = kl_to_reference(params, ref, kl_contexts)
        objective = surrogate
    return ObjectiveReport(objective, grad, len(batch), kl)


def phase_mask(batch: Sequence[Trajectory]) -> np.ndarray:
    return np.array([t.advantage_scalar >= 0.0 for t in batch], dtype=bool)


def phase1_objective(
    batch: Sequence[Trajectory], params: PolicyParams, ref: ReferencePolicy, cfg: ClipConfig
) -> ObjectiveReport:
    """Imitation form: trajectories with A(tau) < 0 drop out, denominator unchanged."""
    if not batch:
        raise ValueError("empty batch")
    return gated_objective(batch, phase_mask(batch), params, ref, cfg)


def phase2_objective(
    batch: Sequence[Trajectory],
    params: PolicyParams,
    ref: ReferencePolicy,
    cfg: ClipConfig,
    *,
    normalizer: Optional[int] = None,
    kl_contexts: Optional[Iterable[int]] = None,
) -> ObjectiveReport:
    """Discrimination form: the full advantage spectrum."""
    return surrogate_objective(batch, params, ref, cfg, normalizer=normalizer, kl_contexts=kl_contexts)


def gated_objective(
    batch: Sequence[Trajectory],
    mask: np.ndarray,
    params: PolicyParams,
    ref: ReferencePolicy,
    cfg: ClipConfig,
) -> ObjectiveReport:
    """Objective over the masked-in trajectories, scored on the full batch's terms."""
    if not batch:
        raise ValueError("empty batch")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(batch),):
        raise ValueError("mask length must match the batch")
    kept = [t for t, m in zip(batch, mask) if m]
    contexts = np.unique(np.concatenate([t.context_ids for t in batch]))
    return surrogate_objective(kept, params, ref, cfg, normalizer=len(batch), kl_contexts=contexts)


def surrogate_gradient_check(
    params: PolicyParams,
    batch: Sequence[Trajectory],
    cfg: ClipConfig,
    step: float = 1e-5,
    *,
    ref: Optional[ReferencePolicy] = None,
    phase: str = "discrimination",
    floor: float = 1e-3,
) -> float:
    """Max relative gap between analytic and central-difference gradients.

    Coordinates whose +/- step moves any importance ratio to within
    ``KINK_TOL`` of a clip boundary, or across one, are skipped.  Relative
    error is ``|a - f| / max(|a|, |f|, floor)``.
    """
    if not 0 < step <= 1e-3:
        raise ValueError("step must lie in (0, 1e-3]")
    ref = ref if ref is not None else ReferencePolicy.capture(params)
    fn = phase1_objective if phase == "imitation" else phase2_objective
    analytic = fn(batch, params, ref, cfg).gradient
    states, actions, old, _, _ = _stack(batch)
    lo, hi = 1.0 - cfg.epsilon, 1.0 + cfg.epsilon

    def ratios(p):
        lp = log_softmax(p.logits[states])[np.arange(len(states)), actions]
        return np.exp(lp - old)

    def near_kink(r):
        return np.any(np.abs(r - lo) < KINK_TOL) or np.any(np.abs(r - hi) < KINK_TOL)

    worst = 0.0
    probe = params.copy()
    for idx in np.ndindex(params.shape):
        base = probe.logits[idx]
        probe.logits[idx] = base + step
        f_plus, r_plus = fn(batch, probe, ref, cfg).objective_value, ratios(probe)
        probe.logits[idx] = base - step
        f_minus, r_minus = fn(batch, probe, ref, cfg).objective_value, ratios(probe)
        probe.logits[idx] = base
        if near_kink(r_plus) or near_kink(r_minus):
            continue
        if np.any((r_plus - lo) * (r_minus - lo) < 0) or np.any((r_plus - hi) * (r_minus - hi) < 0):
            continue
        fd = (f_plus - f_minus) / (2.0 * step)
        a = analytic[idx]
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
    return worst
