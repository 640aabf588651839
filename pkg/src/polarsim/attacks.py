"""Malicious-client behaviors.

Layer-wise strategies train a benign model from the round-start global
model, continue training it on poisoned data, pick a subset of layers to
take from the poisoned model, and submit the composed model's delta. The
selection is either learned (polar), rule-based substitution scoring (lp),
or everything (all_layers). badnets skips composition entirely and submits
a delta trained directly on poisoned data.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import LabeledDataset
from .defenses import ClientUpdate
from .errors import ConfigError, InputError, ShapeError
from .metrics import bsr
from .nn import ModelParams, TrainConfig, model_delta, replace_layers, train_local
from .polar import PolarConfig, PolicyState, SelectionMask, run_polar_round
from .rng import derive_seed, substream

ATTACK_KINDS = ("polar", "lp", "badnets", "all_layers")


@dataclass(frozen=True)
class AttackStrategy:
    kind: str = "polar"
    polar: PolarConfig | None = None
    lp_tau: float = 0.95

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.kind == "polar" and self.polar is None:
            object.__setattr__(self, "polar", PolarConfig())
        if not 0.0 < self.lp_tau <= 1.0:
            raise ConfigError("lp_tau must lie in (0, 1]")


@dataclass(frozen=True)
class AttackerState:
    """Shared state of the coordinating malicious clients.

    The policy only exists for the polar strategy and carries its logits
    from one attack round to the next. last_bsr is the composed candidate's
    success rate on the attacker's evaluation set (logged, never consumed).
    """

    policy: PolicyState | None = None
    last_mask: SelectionMask | None = None
    last_bsr: float | None = None
    rounds_participated: int = 0


def lp_attack_select(
    benign: ModelParams,
    malicious: ModelParams,
    eval_set: LabeledDataset,
    tau: float,
) -> SelectionMask:
    """Substitution-scored greedy layer selection.

    Each layer is scored by how much the poisoned model's success rate drops
    when that layer alone reverts to benign weights; layers are then added
    onto the benign model in descending score order until the composed
    model recovers tau times the poisoned model's success rate.
    """
    if not 0.0 < tau <= 1.0:
        raise ConfigError("tau must lie in (0, 1]")
    if benign.arch != malicious.arch:
        raise ShapeError("benign and malicious models must share an architecture")
    if eval_set.size == 0:
        raise InputError("empty evaluation set")
    n = benign.arch.num_layers
    base = bsr(malicious, eval_set)
    scores = np.empty(n)
    for l in range(n):
        single = np.zeros(n, dtype=np.int8)
        single[l] = 1
        scores[l] = base - bsr(replace_layers(malicious, benign, single), eval_set)
    order = sorted(range(n), key=lambda l: (-scores[l], l))

    mask = np.zeros(n, dtype=np.int8)
    if base == 0.0:
        mask[order[0]] = 1
        return mask
    for l in order:
        mask[l] = 1
        if bsr(replace_layers(benign, malicious, mask), eval_set) >= tau * base:
            break
    return mask


def badnets_update(
    global_model: ModelParams,
    poisoned: LabeledDataset,
    train_cfg: TrainConfig,
    seed: int,
    client_id: int = 0,
) -> ClientUpdate:
    """Delta of a model trained straight on poisoned data, no composition."""
    if poisoned.size == 0:
        raise InputError("empty poisoned dataset")
    model, _ = train_local(
        global_model, poisoned, train_cfg.epochs, train_cfg.lr,
        derive_seed(seed, 1), batch_size=train_cfg.batch_size,
    )
    return ClientUpdate(client_id, True, model_delta(model, global_model))


def _subsample(eval_set: LabeledDataset, limit: int, seed: int) -> LabeledDataset:
    if limit <= 0 or eval_set.size <= limit:
        return eval_set
    rows = np.sort(substream(seed, 3).choice(eval_set.size, size=limit, replace=False))
    return eval_set.subset(rows)


def malicious_client_step(
    global_model: ModelParams,
    clean: LabeledDataset,
    poisoned: LabeledDataset,
    eval_set: LabeledDataset,
    strat: AttackStrategy,
    state: AttackerState,
    train_cfg: TrainConfig,
    seed: int,
    client_id: int = 0,
) -> tuple[ClientUpdate, AttackerState]:
    """One coordinated attacker step; returns the update to submit and new state."""
    if clean.size == 0 or poisoned.size == 0:
        raise InputError("attacker datasets must be non-empty")
    if eval_set.size == 0:
        raise InputError("empty backdoor evaluation set")

    if strat.kind == "badnets":
        update = badnets_update(global_model, poisoned, train_cfg, seed, client_id)
        new_state = replace(
            state, last_mask=None, last_bsr=None,
            rounds_participated=state.rounds_participated + 1,
        )
        return update, new_state

    benign_model, _ = train_local(
        global_model, clean, train_cfg.epochs, train_cfg.lr,
        derive_seed(seed, 0), batch_size=train_cfg.batch_size,
    )
    malicious_model, _ = train_local(
        benign_model, poisoned, train_cfg.epochs, train_cfg.lr,
        derive_seed(seed, 1), batch_size=train_cfg.batch_size,
    )

    policy = state.policy
    if strat.kind == "polar":
        eval_sub = _subsample(eval_set, strat.polar.eval_subsample, seed)
        mask, policy = run_polar_round(
            benign_model, malicious_model, eval_sub, strat.polar,
            state.policy, derive_seed(seed, 2),
        )
    elif strat.kind == "lp":
        eval_sub = eval_set
        mask = lp_attack_select(benign_model, malicious_model, eval_set, strat.lp_tau)
    else:  # all_layers
        eval_sub = eval_set
        mask = np.ones(global_model.arch.num_layers, dtype=np.int8)

    composed = replace_layers(benign_model, malicious_model, mask)
    update = ClientUpdate(client_id, True, model_delta(composed, global_model))
    new_state = AttackerState(
        policy=policy,
        last_mask=mask,
        last_bsr=bsr(composed, eval_sub),
        rounds_participated=state.rounds_participated + 1,
    )
    return update, new_state
