"""Training loop, metric logging, switch-point sweeps and algorithm comparisons."""

from __future__ import annotations

import csv
import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .advantages import ALGO_TO_KIND, EPS_STD, estimate_advantages
from .config import ConfigError, read_kv
from .curriculum import (
    Phase,
    PhaseSchedule,
    advantage_mask,
    current_phase,
    estimate_difficulty,
    static_batch_contexts,
    static_curriculum_order,
)
from .envs import Env, NoiseModel, env_from_kv, env_to_kv, expected_reward, inject_advantage_noise, is_env_key, load_env, rollout_group
from .lab import StepSchedule, step_size
from .objective import ClipConfig, gated_objective
from .policy import PolicyParams, ReferencePolicy, kl_to_reference, log_softmax, mean_entropy

ALGOS = tuple(ALGO_TO_KIND)
CURRICULA = ("capo", "none", "static")
LR_SCHEDULES = ("fixed", "robbins_monro")
DEFAULT_FRACTIONS = (0.0, 0.1, 0.2, 0.3, 0.4, 1.0)


class NumericalError(RuntimeError):
    """Non-finite gradient or parameters; ``record`` describes the offending step."""

    def __init__(self, message: str, record: "MetricRecord"):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    env: Env
    seed: int
    algo: str = "grpo"
    curriculum: str = "capo"
    switch_fraction: float = 0.2
    total_steps: int = 200
    group_size: int = 16
    batch_groups: int = 4
    epsilon: float = 0.2
    beta: float = 0.02
    lr: float = 0.5
    lr_schedule: str = "fixed"
    lr_tau: float = 100.0
    gamma: float = 1.0
    lam: float = 1.0
    inner_epochs: int = 1
    eps_std: float = EPS_STD
    standardize_batch: bool = True
    advantage_noise: float = 0.0
    difficulty_k: int = 16
    init_scale: float = 0.0
    warm_start: float = 0.0

    def __post_init__(self):
        problems = []
        if self.algo not in ALGOS:
            problems.append(f"algo must be one of {ALGOS}")
        if self.curriculum not in CURRICULA:
            problems.append(f"curriculum must be one of {CURRICULA}")
        if self.lr_schedule not in LR_SCHEDULES:
            problems.append(f"lr_schedule must be one of {LR_SCHEDULES}")
        if not 0.0 <= self.switch_fraction <= 1.0:
            problems.append("switch_fraction must lie in [0, 1]")
        if self.total_steps < 1:
            problems.append("total_steps must be >= 1")
        if self.group_size < 2:
            problems.append("group_size must be >= 2")
        if self.batch_groups < 1:
            problems.append("batch_groups must be >= 1")
        if self.algo == "reinforcepp" and self.group_size * self.batch_groups < 2:
            problems.append("reinforcepp needs at least 2 trajectories per step")
        if not self.epsilon > 0:
            problems.append("epsilon must be > 0")
        if not self.beta >= 0:
            problems.append("beta must be >= 0")
        if not (self.lr > 0 and self.lr_tau > 0):
            problems.append("lr and lr_tau must be > 0")
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            problems.append("gamma and lam must lie in [0, 1]")
        if self.inner_epochs < 1:
            problems.append("inner_epochs must be >= 1")
        if not all(v >= 0 for v in (self.eps_std, self.advantage_noise, self.init_scale, self.warm_start)):
            problems.append("eps_std, advantage_noise, init_scale and warm_start must be >= 0")
        if self.difficulty_k < 1:
            problems.append("difficulty_k must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_kv(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for f in dataclasses.fields(self):
            if f.name != "env":
                out[f.name] = getattr(self, f.name)
        out.update(env_to_kv(self.env))
        return out


_CONVERTERS = {
    int: int,
    float: float,
    str: str,
    bool: lambda v: {"true": True, "1": True, "false": False, "0": False}[v.lower()],
}


def load_train_config(path: str | Path, seed: Optional[int] = None) -> TrainConfig:
    """Read a ``key=value`` training config.

    Environment keys may be inlined or pulled from ``env_file`` (resolved
    relative to the config).  ``seed`` overrides the file's value.
    """
    path = Path(path)
    entries = read_kv(path)
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name != "env"}
    kwargs: dict[str, object] = {}
    env_entries = {}
    env_file = None
    for key, (value, lineno) in entries.items():
        if key == "env_file":
            env_file = (value, lineno)
        elif is_env_key(key):
            env_entries[key] = (value, lineno)
        elif key in types:
            conv = _CONVERTERS[{"int": int, "float": float, "str": str, "bool": bool}[types[key]]]
            try:
                kwargs[key] = conv(value)
            except (ValueError, KeyError):
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {value!r}") from None
        else:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
    if env_file and env_entries:
        raise ConfigError(f"{path}:{env_file[1]}: give either env_file or inline env keys, not both")
    if env_file:
        kwargs["env"] = load_env(path.parent / env_file[0])
    elif env_entries:
        kwargs["env"] = env_from_kv(env_entries, str(path))
    else:
        raise ConfigError(f"{path}: no environment given (env_file or env=...)")
    if seed is not None:
        kwargs["seed"] = seed
    if "seed" not in kwargs:
        raise ConfigError(f"{path}: missing mandatory key 'seed'")
    return TrainConfig(**kwargs)


@dataclass
class MetricRecord:
    step: int
    phase: str
    mean_reward: float
    policy_entropy: float
    kl_to_ref: float
    frac_positive_advantage: float
    num_contributing: int
    gradient_norm: float
    objective_value: float


METRIC_COLUMNS = [f.name for f in dataclasses.fields(MetricRecord)]


@dataclass
class TrainResult:
    params: PolicyParams
    metrics: list[MetricRecord]
    reference: ReferencePolicy = field(repr=False)

    @property
    def final_reward(self) -> float:
        return self.metrics[-1].mean_reward

    @property
    def final_entropy(self) -> float:
        return self.metrics[-1].policy_entropy


def _initial_params(cfg: TrainConfig) -> PolicyParams:
    """Zero logits, plus an optional random perturbation and warm-start bonus.

    ``warm_start`` adds a fixed logit bonus to the best action of every state,
    standing in for a pretrained policy that already leans the right way.
    """
    params = cfg.env.init_params()
    if cfg.warm_start > 0:
        best = cfg.env.best_actions()
        params.logits[np.arange(len(best)), best] += cfg.warm_start
    if cfg.init_scale > 0:
        # separate stream so the prior does not shift the rollout draws
        prior = np.random.default_rng([cfg.seed, 0x5EED])
        params.logits += cfg.init_scale * prior.standard_normal(params.shape)
    return params


def train(cfg: TrainConfig) -> TrainResult:
    """Run ``total_steps`` updates; one :class:`MetricRecord` per step.

    ``mean_reward``, ``policy_entropy`` and ``kl_to_ref`` describe the policy
    after the step's update (reward is the exact noise-free expectation).
    The remaining fields describe the step's batch on the first inner epoch.
    """
    env = cfg.env
    rng = np.random.default_rng(cfg.seed)
    params = _initial_params(cfg)
    ref = ReferencePolicy.capture(params)
    clip = ClipConfig(cfg.epsilon, cfg.beta)
    fraction = cfg.switch_fraction if cfg.curriculum == "capo" else 0.0
    sched = PhaseSchedule(fraction, cfg.total_steps)
    lr_sched = StepSchedule(cfg.lr, cfg.lr_tau)
    noise = NoiseModel(cfg.advantage_noise)

    order = None
    if cfg.curriculum == "static":
        estimates = [estimate_difficulty(env, params, c, cfg.difficulty_k, rng) for c in range(env.num_contexts)]
        order = static_curriculum_order(estimates)

    metrics: list[MetricRecord] = []
    for step in range(cfg.total_steps):
        phase = current_phase(sched, step)
        if order is not None:
            contexts = static_batch_contexts(order, step, cfg.total_steps, cfg.batch_groups)
        else:
            contexts = rng.integers(env.num_contexts, size=cfg.batch_groups).tolist()
        groups = [rollout_group(env, params, int(c), cfg.group_size, rng) for c in contexts]
        batch = estimate_advantages(
            cfg.algo, groups, eps_std=cfg.eps_std, gamma=cfg.gamma, lam=cfg.lam,
            standardize_batch=cfg.standardize_batch,
        )
        if cfg.advantage_noise > 0:
            batch = [inject_advantage_noise(t, noise, rng) for t in batch]
        scalars = np.array([t.advantage_scalar for t in batch])
        mask = advantage_mask(phase, scalars)
        lr = cfg.lr if cfg.lr_schedule == "fixed" else step_size(lr_sched, step)

        first = None
        for _ in range(cfg.inner_epochs):
            report = gated_objective(batch, mask, params, ref, clip)
            if first is None:
                first = report
            if not np.all(np.isfinite(report.gradient)):
                rec = MetricRecord(step, str(phase), math.nan, math.nan, math.nan,
                                   float(np.mean(scalars > 0)), int(mask.sum()), math.inf,
                                   report.objective_value)
                raise NumericalError(f"non-finite gradient at step {step}", rec)
            params.logits = params.logits + lr * report.gradient

        if not np.all(np.isfinite(params.logits)):
            rec = MetricRecord(step, str(phase), math.nan, math.nan, math.nan,
                               float(np.mean(scalars > 0)), int(mask.sum()),
                               float(np.linalg.norm(first.gradient)), first.objective_value)
            raise NumericalError(f"non-finite parameters after step {step}", rec)

        metrics.append(
            MetricRecord(
                step=step,
                phase=str(phase),
                mean_reward=expected_reward(env, params),
                policy_entropy=mean_entropy(params),
                kl_to_ref=kl_to_reference(params, ref),
                frac_positive_advantage=float(np.mean(scalars > 0)),
                num_contributing=first.num_contributing,
                gradient_norm=float(np.linalg.norm(first.gradient)),
                objective_value=first.objective_value,
            )
        )
    return TrainResult(params, metrics, ref)


def eval_policy(params: PolicyParams, env: Env, episodes: int, rng: np.random.Generator) -> float:
    """Greedy (argmax, lowest index on ties) evaluation against the clean verifier."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env._check_params(params)
    greedy = np.argmax(log_softmax(params.logits), axis=1)
    contexts = rng.integers(env.num_contexts, size=episodes)
    actions = np.stack([greedy[env.states(int(c))] for c in contexts])
    total = 0.0
    for c in range(env.num_contexts):
        sel = contexts == c
        if sel.any():
            total += env.success(c, actions[sel], rng).sum()
    return float(total / episodes)


def write_metrics(records: Sequence[MetricRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([_cell(getattr(r, c)) for c in METRIC_COLUMNS])


def _cell(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


# -- sweeps and comparisons ---------------------------------------------------


@dataclass
class SweepRow:
    fraction: float
    seed: int
    final_reward: float
    mean_entropy: float


@dataclass
class CompareRow:
    algo: str
    curriculum: str
    seed: int
    final_reward: float
    delta: float


def _final(cfg: TrainConfig) -> tuple[float, float]:
    res = train(cfg)
    return res.final_reward, res.final_entropy


def _map(fn, items, workers: int):
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _seeds(cfg: TrainConfig, seeds: Optional[Sequence[int]]) -> list[int]:
    return list(seeds) if seeds is not None else [cfg.seed]


def sweep_switch_points(
    cfg: TrainConfig,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seeds: Optional[Sequence[int]] = None,
    *,
    with_endpoints: bool = False,
    workers: int = 1,
) -> list[SweepRow]:
    """One gated-curriculum run per (fraction, seed); rows ordered by fraction then seed."""
    fracs = [float(f) for f in fractions]
    if any(not 0.0 <= f <= 1.0 for f in fracs):
        raise ValueError("fractions must lie in [0, 1]")
    if with_endpoints:
        fracs = sorted(set(fracs) | {0.0, 1.0})
    jobs = [(f, s) for f in fracs for s in _seeds(cfg, seeds)]
    cfgs = [cfg.replace(curriculum="capo", switch_fraction=f, seed=s) for f, s in jobs]
    finals = _map(_final, cfgs, workers)
    return [SweepRow(f, s, r, e) for (f, s), (r, e) in zip(jobs, finals)]


def compare_algorithms(
    cfg: TrainConfig,
    curricula: Sequence[str] = ("none", "capo"),
    seeds: Optional[Sequence[int]] = None,
    *,
    algos: Sequence[str] = ALGOS,
    workers: int = 1,
) -> list[CompareRow]:
    """Every (algo, curriculum, seed) with matched seeds; ``delta`` is against the ``none`` run."""
    curricula = list(curricula)
    if "none" not in curricula:
        curricula.insert(0, "none")
    jobs = [(a, c, s) for a in algos for c in curricula for s in _seeds(cfg, seeds)]
    cfgs = [cfg.replace(algo=a, curriculum=c, seed=s) for a, c, s in jobs]
    finals = [r for r, _ in _map(_final, cfgs, workers)]
    base = {(a, s): r for (a, c, s), r in zip(jobs, finals) if c == "none"}
    return [CompareRow(a, c, s, r, r - base[(a, s)]) for (a, c, s), r in zip(jobs, finals)]
