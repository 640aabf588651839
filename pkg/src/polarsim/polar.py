"""Reinforcement-learning layer selection for the layer-wise backdoor attack.

A policy keeps one real logit per model layer; sigmoid(logit) is the
probability of replacing that layer with its poisoned counterpart. Batches
of binary masks are sampled from the factorized Bernoulli distribution,
scored by the backdoor success rate they achieve relative to the fully
poisoned model, and the logits are moved along the analytic gradient of the
REINFORCE-style loss

    L = - sum_k sum_l [S_kl log p_l + (1 - S_kl) log(1 - p_l)] * r_k
        + penalty * sum_l log p_l

whose closed form is dL/dtheta_l = - sum_k r_k (S_kl - p_l) + penalty * (1 - p_l).
The penalty term pushes every selection probability down, so only layers
whose substitution demonstrably raises the success rate stay selected.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.special import expit as _sigmoid

from .data import LabeledDataset
from .errors import ConfigError, InputError, NumericalError, ShapeError
from .metrics import bsr
from .nn import ModelParams, replace_layers
from .rng import substream

SelectionMask = np.ndarray  # shape (num_layers,), values in {0, 1}


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    # log sigma(x) = -log(1 + exp(-x)), stable for |x| up to hundreds
    return -np.logaddexp(0.0, -x)


@dataclass(frozen=True)
class PolicyState:
    """Per-layer selection logits plus the number of completed attack rounds."""

    logits: np.ndarray
    round: int = 0

    def __post_init__(self):
        logits = np.ascontiguousarray(self.logits, dtype=np.float64)
        if logits.ndim != 1 or logits.size < 1:
            raise ConfigError("logits must be a non-empty 1-D vector")
        if not np.isfinite(logits).all():
            raise NumericalError("non-finite policy logits")
        logits.setflags(write=False)
        object.__setattr__(self, "logits", logits)

    @property
    def probs(self) -> np.ndarray:
        return _sigmoid(self.logits)


@dataclass(frozen=True)
class PolarConfig:
    """Hyperparameters of the selection policy.

    samples_per_step masks are scored in each of `steps` gradient updates;
    eval_subsample caps how many backdoor-test examples each scoring uses
    (0 means the full set). cache_rewards reuses scores for repeated mask
    bit-patterns within one round at the cost of hiding the nominal
    samples*steps evaluation budget.
    """

    samples_per_step: int = 50
    steps: int = 10
    lr: float = 0.01
    penalty: float = 10.0
    threshold: float = 0.5
    init_logit: float = 0.0
    eval_subsample: int = 256
    cache_rewards: bool = False

    def __post_init__(self):
        if self.samples_per_step < 1:
            raise ConfigError("samples_per_step must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.penalty < 0:
            raise ConfigError("penalty must be non-negative")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.eval_subsample < 0:
            raise ConfigError("eval_subsample must be non-negative")


@dataclass(frozen=True)
class RewardBatch:
    """Sampled masks (rows) with their rewards relative to the fully poisoned model."""

    masks: np.ndarray
    rewards: np.ndarray
    baseline_bsr: float

    def __post_init__(self):
        masks = np.ascontiguousarray(self.masks, dtype=np.int8)
        rewards = np.ascontiguousarray(self.rewards, dtype=np.float64)
        if masks.ndim != 2 or rewards.shape != (masks.shape[0],):
            raise ShapeError("need one reward per mask row")
        if rewards.size and (rewards.min() < -1.0 - 1e-12 or rewards.max() > 1.0 + 1e-12):
            raise ConfigError("rewards must lie in [-1, 1]")
        masks.setflags(write=False)
        rewards.setflags(write=False)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "rewards", rewards)


def init_policy(num_layers: int, cfg: PolarConfig) -> PolicyState:
    if num_layers < 1:
        raise ConfigError("need at least one layer")
    return PolicyState(np.full(num_layers, cfg.init_logit, dtype=np.float64), round=0)


def sample_actions(policy: PolicyState, k: int, seed) -> np.ndarray:
    """k masks, one per row; bit l ~ Bernoulli(sigmoid(logit_l)), independent."""
    if k < 1:
        raise ConfigError("need at least one sample")
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed)
    draws = rng.random((k, policy.logits.size))
    return (draws < policy.probs).astype(np.int8)


def selection_log_prob(policy: PolicyState, mask: SelectionMask) -> float:
    """log P(mask) under the factorized Bernoulli policy."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != policy.logits.shape:
        raise ShapeError("mask length does not match policy")
    theta = policy.logits
    return float(np.sum(mask * _log_sigmoid(theta) + (1.0 - mask) * _log_sigmoid(-theta)))


def compute_rewards(
    masks: np.ndarray,
    benign: ModelParams,
    malicious: ModelParams,
    eval_set: LabeledDataset,
    baseline_bsr: float,
    cache: dict | None = None,
) -> RewardBatch:
    """Score each mask by the success rate of the composed candidate model.

    reward = BSR(benign with masked layers from malicious) - baseline_bsr,
    where the baseline is the fully poisoned model's success rate on the
    same evaluation set.
    """
    if eval_set.size == 0:
        raise InputError("empty evaluation set")
    if benign.arch != malicious.arch:
        raise ShapeError("benign and malicious models must share an architecture")
    masks = np.asarray(masks, dtype=np.int8)
    rewards = np.empty(masks.shape[0])
    for i, mask in enumerate(masks):
        key = mask.tobytes() if cache is not None else None
        if key is not None and key in cache:
            candidate_bsr = cache[key]
        else:
            candidate_bsr = bsr(replace_layers(benign, malicious, mask), eval_set)
            if key is not None:
                cache[key] = candidate_bsr
        rewards[i] = candidate_bsr - baseline_bsr
    return RewardBatch(masks, rewards, baseline_bsr)


def policy_loss(policy: PolicyState, batch: RewardBatch, penalty: float) -> float:
    """Reward-weighted negative log-likelihood plus the selection penalty."""
    theta = policy.logits
    logp1 = _log_sigmoid(theta)
    logp0 = _log_sigmoid(-theta)
    masks = batch.masks.astype(np.float64)
    per_sample = masks @ logp1 + (1.0 - masks) @ logp0
    return float(-(per_sample @ batch.rewards) + penalty * logp1.sum())


def policy_gradient(policy: PolicyState, batch: RewardBatch, penalty: float) -> np.ndarray:
    """Closed-form d policy_loss / d logits."""
    p = policy.probs
    masks = batch.masks.astype(np.float64)
    return -(batch.rewards @ (masks - p)) + penalty * (1.0 - p)


def update_policy(policy: PolicyState, grad: np.ndarray, lr: float) -> PolicyState:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != policy.logits.shape:
        raise ShapeError("gradient length does not match policy")
    new_logits = policy.logits - lr * grad
    if not np.isfinite(new_logits).all():
        raise NumericalError("policy update produced non-finite logits")
    return replace(policy, logits=new_logits)


def finalize_selection(policy: PolicyState, threshold: float) -> SelectionMask:
    """Mask with bit l set iff sigmoid(logit_l) strictly exceeds the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError("threshold must lie in (0, 1)")
    return (policy.probs > threshold).astype(np.int8)


def _nonempty_selection(policy: PolicyState, threshold: float) -> SelectionMask:
    # all-zero masks would submit a fully benign update; fall back to the
    # single most probable layer so the attack stays nontrivial
    mask = finalize_selection(policy, threshold)
    if not mask.any():
        mask = np.zeros_like(mask)
        mask[int(np.argmax(policy.logits))] = 1
    return mask


def optimize_policy(
    num_layers: int,
    reward_fn: Callable[[np.ndarray], RewardBatch],
    cfg: PolarConfig,
    init: PolicyState | None,
    seed: int,
) -> PolicyState:
    """Run cfg.steps iterations of sample / score / gradient step.

    reward_fn receives the sampled mask batch and returns the RewardBatch to
    learn from; the same routine therefore serves both the model-backed
    attack and synthetic reward environments.
    """
    policy = init if init is not None else init_policy(num_layers, cfg)
    if policy.logits.size != num_layers:
        raise ShapeError("policy length does not match layer count")
    rng = substream(seed)
    for _ in range(cfg.steps):
        masks = sample_actions(policy, cfg.samples_per_step, rng)
        batch = reward_fn(masks)
        grad = policy_gradient(policy, batch, cfg.penalty)
        policy = update_policy(policy, grad, cfg.lr)
    return policy


def run_polar_round(
    benign: ModelParams,
    malicious: ModelParams,
    eval_set: LabeledDataset,
    cfg: PolarConfig,
    prev: PolicyState | None,
    seed: int,
) -> tuple[SelectionMask, PolicyState]:
    """One attack round of policy training; returns the layer mask to inject.

    Logits carry over from `prev` when given, otherwise start at
    cfg.init_logit. With steps=0 the policy is returned untouched and the
    mask is read directly off the incoming logits.
    """
    if benign.arch != malicious.arch:
        raise ShapeError("benign and malicious models must share an architecture")
    if eval_set.size == 0:
        raise InputError("empty evaluation set")
    num_layers = benign.arch.num_layers
    start = prev if prev is not None else init_policy(num_layers, cfg)
    if cfg.steps == 0:
        return _nonempty_selection(start, cfg.threshold), start

    baseline = bsr(malicious, eval_set)
    cache: dict | None = {} if cfg.cache_rewards else None

    def reward_fn(masks: np.ndarray) -> RewardBatch:
        return compute_rewards(masks, benign, malicious, eval_set, baseline, cache)

    policy = optimize_policy(num_layers, reward_fn, cfg, start, seed)
    policy = replace(policy, round=start.round + 1)
    return _nonempty_selection(policy, cfg.threshold), policy
