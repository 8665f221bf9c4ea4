"""Tree-GRPO objective and its parts.

Conventions: ``tree_grpo_loss_and_grad`` returns the *negated* objective and
its gradient, so callers minimize. Advantages use the population standard
deviation of the group's process rewards.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from seea.env import ConfigError

STD_EPS = 1e-12


class InvalidGroupError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class GroupSource(str, enum.Enum):
    POLICY_TREE = "PolicyTree"
    REWARD_MODEL = "RewardModelGroup"


@dataclass
class ExperienceGroup:
    state: object
    actions: list[tuple[str, ...]]
    pr: list[float]
    old_logprobs: list[np.ndarray]
    source: GroupSource = GroupSource.POLICY_TREE
    tag: int = 0

    def __post_init__(self):
        if len(self.actions) < 2:
            raise InvalidGroupError("a group needs at least 2 actions")
        if not (len(self.actions) == len(self.pr) == len(self.old_logprobs)):
            raise InvalidGroupError("actions, pr and old_logprobs must be aligned")

    def to_json(self) -> dict:
        return {
            "state": self.state.to_json(),
            "actions": [list(a) for a in self.actions],
            "pr": [float(x) for x in self.pr],
            "old_logprobs": [[float(x) for x in lp] for lp in self.old_logprobs],
            "source": self.source.value,
            "tag": self.tag,
        }


@dataclass(frozen=True)
class OptimConfig:
    eps_low: float = 0.2
    eps_high: float = 0.28
    beta: float = 0.0
    lr0: float = 1e-3
    warmup_ratio: float = 0.05
    batch_size: int = 128
    valid_samples_per_iteration: int = 512
    epochs: int = 1
    steps_per_iter: int = 0  # > 0 overrides epochs: that many optimizer steps per iteration
    optimizer: str = "sgd"  # sgd | adam
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    schedule: str = "cosine"  # cosine | constant

    def validate(self) -> None:
        if not 0 < self.eps_low <= self.eps_high < 1:
            raise ConfigError("optim requires 0 < eps_low <= eps_high < 1")
        if self.beta < 0:
            raise ConfigError("optim.beta must be >= 0")
        if self.lr0 <= 0:
            raise ConfigError("optim.lr0 must be > 0")
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigError("optim.warmup_ratio must be in [0, 1)")
        if self.batch_size < 1 or self.valid_samples_per_iteration < 1 or self.epochs < 1:
            raise ConfigError("optim.batch_size, valid_samples_per_iteration and epochs must be >= 1")
        if self.steps_per_iter < 0:
            raise ConfigError("optim.steps_per_iter must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optim.optimizer must be sgd or adam")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("optim.schedule must be cosine or constant")


def population_std(x) -> float:
    return float(np.std(np.asarray(x, dtype=np.float64)))


def is_valid_group(pr) -> bool:
    return population_std(pr) > STD_EPS


def group_advantages(pr) -> np.ndarray:
    pr = np.asarray(pr, dtype=np.float64)
    std = population_std(pr)
    if std <= STD_EPS:
        raise InvalidGroupError("process rewards have zero spread; filter with is_valid_group first")
    return (pr - pr.mean()) / std


def importance_ratio(new_logprob, old_logprob):
    return np.exp(np.asarray(new_logprob) - np.asarray(old_logprob))


def clipped_token_objective(rho, adv, eps_low: float, eps_high: float):
    return np.minimum(rho * adv, np.clip(rho, 1.0 - eps_low, 1.0 + eps_high) * adv)


def k3_kl(logp_current, logp_ref):
    """r - ln r - 1 with r = pi_ref / pi_theta, written to stay >= 0 in floating point."""
    d = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_current, dtype=np.float64)
    return np.expm1(d) - d


@dataclass
class LossStats:
    mean_ratio: float = 1.0
    clip_frac: float = 0.0
    mean_kl: float = 0.0
    tokens: int = 0
    groups: int = 0


def tree_grpo_loss_and_grad(batch, params, ref_params, config: OptimConfig, scorer):
    """Negated Tree-GRPO objective averaged over groups, and its gradient.

    ``scorer`` supplies ``logprob(params, state, action)`` and
    ``grad_logprob(params, state, action, token_weights)``.
    """
    if not batch:
        raise InvalidGroupError("empty batch")
    grad = np.zeros_like(params.values)
    total = 0.0
    ratios, clipped, kls = [], 0, []
    need_ref = config.beta != 0.0
    for group in batch:
        if not is_valid_group(group.pr):
            raise InvalidGroupError("batch contains a group with zero-spread process rewards")
        adv = group_advantages(group.pr)
        n_tok = sum(len(a) for a in group.actions)
        surrogate, kl_sum = 0.0, 0.0
        for action, a_i, old in zip(group.actions, adv, group.old_logprobs):
            lp = scorer.logprob(params, group.state, action)
            rho = importance_ratio(lp, old)
            unclipped = rho * a_i
            clip_val = np.clip(rho, 1.0 - config.eps_low, 1.0 + config.eps_high) * a_i
            surrogate += float(np.minimum(unclipped, clip_val).sum())
            # gradient flows only where the unclipped branch attains the min
            active = unclipped <= clip_val
            weights = np.where(active, unclipped, 0.0) / n_tok
            clipped += int((~active).sum())
            ratios.extend(rho.tolist())
            if need_ref:
                lp_ref = scorer.logprob(ref_params, group.state, action)
                k = k3_kl(lp, lp_ref)
                kl_sum += float(k.sum())
                kls.extend(k.tolist())
                # d/d lp of (r - ln r - 1), r = exp(lp_ref - lp)
                weights = weights - config.beta * (1.0 - np.exp(lp_ref - lp)) / n_tok
            if np.any(weights != 0.0):
                grad += scorer.grad_logprob(params, group.state, action, weights)
        total += surrogate / n_tok - config.beta * kl_sum / n_tok
    n = len(batch)
    stats = LossStats(
        mean_ratio=float(np.mean(ratios)),
        clip_frac=clipped / len(ratios),
        mean_kl=float(np.mean(kls)) if kls else 0.0,
        tokens=len(ratios),
        groups=n,
    )
    return -total / n, -grad / n, stats


def cosine_lr(step: int, total_steps: int, lr0: float, warmup_ratio: float) -> float:
    if total_steps <= 0:
        return lr0
    step = min(max(step, 0), total_steps)
    warmup = warmup_ratio * total_steps
    if warmup > 0 and step < warmup:
        return lr0 * step / warmup
    span = total_steps - warmup
    progress = (step - warmup) / span if span > 0 else 1.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(params, grad, lr: float):
    grad = np.asarray(grad)
    if grad.shape != params.values.shape:
        raise ValueError("gradient shape does not match parameters")
    bad = ~np.isfinite(grad)
    if bad.any():
        raise NumericError(f"non-finite gradient at {int(bad.sum())} coordinates, first index {int(np.argmax(bad))}")
    return params.with_values(params.values - lr * grad)


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def step(self, params, grad, lr: float):
        grad = np.asarray(grad)
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient")
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return params.with_values(params.values - lr * mhat / (np.sqrt(vhat) + self.eps))

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": None if self.m is None else [float(x) for x in self.m],
            "v": None if self.v is None else [float(x) for x in self.v],
        }

    def load_state_dict(self, data: dict) -> None:
        self.t = data["t"]
        self.m = None if data["m"] is None else np.array(data["m"], dtype=np.float64)
        self.v = None if data["v"] is None else np.array(data["v"], dtype=np.float64)


class Optimizer:
    """Applies sgd or adam with a schedule; holds whatever state the rule needs."""

    def __init__(self, config: OptimConfig, total_steps: int):
        self.config = config
        self.total_steps = total_steps
        self.step_count = 0
        self.adam = Adam(config.adam_beta1, config.adam_beta2, config.adam_eps) if config.optimizer == "adam" else None

    def lr(self) -> float:
        if self.config.schedule == "constant":
            return self.config.lr0
        return cosine_lr(self.step_count, self.total_steps, self.config.lr0, self.config.warmup_ratio)

    def step(self, params, grad):
        lr = self.lr()
        new = self.adam.step(params, grad, lr) if self.adam else sgd_step(params, grad, lr)
        self.step_count += 1
        return new, lr

    def state_dict(self) -> dict:
        return {"step_count": self.step_count, "adam": self.adam.state_dict() if self.adam else None}

    def load_state_dict(self, data: dict) -> None:
        self.step_count = data["step_count"]
        if self.adam is not None and data.get("adam") is not None:
            self.adam.load_state_dict(data["adam"])


def grpo_scalar_reward_update(groups, rm_params, config: OptimConfig, scorer, lr: float):
    """One GRPO step on 0/1-rewarded label groups; zero-spread groups are dropped.

    Returns ``(new_params, stats)``.
    """
    kept = [g for g in groups if is_valid_group(g.pr)]
    if not kept:
        raise InvalidGroupError("every reward-model group has identical rewards")
    _, grad, stats = tree_grpo_loss_and_grad(kept, rm_params, rm_params, config, scorer)
    return sgd_step(rm_params, grad, lr), stats
