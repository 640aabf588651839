"""Evaluation metrics: accuracy, backdoor success rate, windowed summaries,
and the per-client acceptance rates used to measure attack stealthiness.

Aggregations are plain Python arithmetic over ascending indices so that an
independent loop over the emitted round logs reproduces every value exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import InputError
from .nn import ModelParams, forward


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    absr: float
    bbsr: float
    mar: float | None
    bar: float
    bsr_trajectory: tuple[float, ...]


def accuracy(model: ModelParams, test: LabeledDataset) -> float:
    """Fraction of argmax-correct predictions; argmax ties go to the lowest class id."""
    if test.size == 0:
        raise InputError("empty test set")
    preds = np.argmax(forward(model, test.features), axis=1)
    return int((preds == test.labels).sum()) / test.size


def bsr(model: ModelParams, backdoor_test: LabeledDataset) -> float:
    """Fraction of backdoor-test examples classified as the target label.

    The set must come from build_backdoor_testset, whose labels all equal
    the attack target.
    """
    if backdoor_test.size == 0:
        raise InputError("empty backdoor test set")
    preds = np.argmax(forward(model, backdoor_test.features), axis=1)
    return int((preds == backdoor_test.labels).sum()) / backdoor_test.size


def absr_bbsr(trajectory, window: int = 10) -> tuple[float, float]:
    """(mean, max) of the final min(window, len) trajectory entries."""
    traj = [float(v) for v in trajectory]
    if not traj:
        raise InputError("empty trajectory")
    tail = traj[-window:] if window > 0 else traj
    total = 0.0
    for v in tail:
        total += v
    return total / len(tail), max(tail)


def mar_bar(records) -> tuple[float | None, float]:
    """Acceptance rates from per-round records.

    Records need .benign_ids, .malicious_ids, .accepted_ids. MAR counts the
    rounds where a scheduled malicious client was accepted, over rounds where
    one was scheduled at all (None when no such round exists). BAR averages,
    over benign clients in ascending id order, each client's accepted/scheduled
    round ratio.
    """
    records = list(records)
    if not records:
        raise InputError("no round records")
    attacked = 0
    bypassed = 0
    scheduled: dict[int, int] = {}
    accepted: dict[int, int] = {}
    for rec in records:
        acc_set = set(rec.accepted_ids)
        if rec.malicious_ids:
            attacked += 1
            if any(cid in acc_set for cid in rec.malicious_ids):
                bypassed += 1
        for cid in rec.benign_ids:
            scheduled[cid] = scheduled.get(cid, 0) + 1
            if cid in acc_set:
                accepted[cid] = accepted.get(cid, 0) + 1
    mar = bypassed / attacked if attacked else None
    if scheduled:
        total = 0.0
        for cid in sorted(scheduled):
            total += accepted.get(cid, 0) / scheduled[cid]
        bar = total / len(scheduled)
    else:
        bar = 0.0
    return mar, bar
