"""Synthetic dataset generation, non-IID partitioning, and trigger poisoning.

Features live in [0,1]^d. The trigger is a fixed set of feature indices
written to a constant value (the flat-vector analogue of a pixel patch);
poisoned examples additionally get the attacker's target label.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .rng import substream

TRIGGER_PATCH_SIZE = 25


def round_half_up(x: float) -> int:
    """round() with ties away from banker's rounding, used for all count rounding."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix in [0,1] with integer labels in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise InputError(f"features must be 2-D, got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise InputError("labels must be one per example")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InputError("labels out of range")
        if feats.size and not np.isfinite(feats).all():
            raise InputError("features must be finite")
        if feats.size and (feats.min() < 0.0 or feats.max() > 1.0):
            raise InputError("features must lie in [0, 1]")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)


def concat_datasets(parts: list[LabeledDataset]) -> LabeledDataset:
    if not parts:
        raise InputError("no datasets to concatenate")
    m = parts[0].num_classes
    if any(p.num_classes != m or p.dim != parts[0].dim for p in parts):
        raise InputError("datasets disagree on dimensionality or class count")
    return LabeledDataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        m,
    )


@dataclass(frozen=True)
class TriggerSpec:
    """Feature indices overwritten with patch_value; labels forced to target_label."""

    patch_indices: tuple[int, ...]
    patch_value: float
    target_label: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.patch_indices)
        if len(set(idx)) != len(idx):
            raise ConfigError("trigger indices must be unique")
        if any(i < 0 for i in idx):
            raise ConfigError("trigger indices must be non-negative")
        if not 0.0 <= self.patch_value <= 1.0:
            raise ConfigError("patch_value must lie in [0, 1]")
        if self.target_label < 0:
            raise ConfigError("target_label must be non-negative")
        object.__setattr__(self, "patch_indices", idx)


def tail_trigger(dim: int, target_label: int = 0, patch_size: int = TRIGGER_PATCH_SIZE,
                 patch_value: float = 1.0) -> TriggerSpec:
    """Trigger occupying the last patch_size feature indices."""
    if dim < patch_size + 1:
        raise ConfigError(f"feature dim {dim} too small for a {patch_size}-index trigger")
    return TriggerSpec(tuple(range(dim - patch_size, dim)), patch_value, target_label)


@dataclass(frozen=True)
class PartitionPlan:
    """Disjoint per-client index lists into a parent dataset."""

    client_indices: tuple[tuple[int, ...], ...]
    q: float

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]

    def weights(self) -> list[float]:
        total = sum(self.sizes())
        return [len(ix) / total for ix in self.client_indices]


def generate_synthetic(classes: int, dim: int, per_class: int, spread: float,
                       seed: int) -> LabeledDataset:
    """Gaussian class blobs with uniform-random centers, clipped to [0,1]^d."""
    if classes < 2:
        raise ConfigError("need at least 2 classes")
    if dim < TRIGGER_PATCH_SIZE + 1:
        raise ConfigError(
            f"dim must be at least {TRIGGER_PATCH_SIZE + 1} to leave room for the trigger patch"
        )
    if per_class < 1:
        raise ConfigError("per_class must be positive")
    if spread < 0:
        raise ConfigError("spread must be non-negative")
    rng = substream(seed)
    centers = rng.uniform(0.0, 1.0, size=(classes, dim))
    feats = np.empty((classes * per_class, dim))
    labels = np.empty(classes * per_class, dtype=np.int64)
    for c in range(classes):
        block = slice(c * per_class, (c + 1) * per_class)
        noise = rng.normal(0.0, spread, size=(per_class, dim)) if spread > 0 else 0.0
        feats[block] = np.clip(centers[c] + noise, 0.0, 1.0)
        labels[block] = c
    return LabeledDataset(feats, labels, classes)


def partition_noniid(data: LabeledDataset, clients: int, q: float, seed: int) -> PartitionPlan:
    """Label-skew split: clients form one group per class (round-robin), and an
    example with label l lands in group l with probability q, in each other
    group with probability (1-q)/(M-1), then uniformly within the group.
    """
    m = data.num_classes
    if clients < m:
        raise ConfigError(f"need at least {m} clients to cover {m} classes")
    if not (1.0 / m) <= q <= 1.0:
        raise ConfigError(f"q must lie in [1/{m}, 1], got {q}")
    if data.size < clients:
        raise ConfigError("fewer examples than clients")

    groups = [[c for c in range(clients) if c % m == g] for g in range(m)]
    rng = substream(seed)
    pick_own = rng.random(data.size)
    other_group = rng.integers(0, m - 1, size=data.size)
    within = rng.random(data.size)

    assigned: list[list[int]] = [[] for _ in range(clients)]
    for j in range(data.size):
        l = int(data.labels[j])
        if pick_own[j] < q:
            g = l
        else:
            g = int(other_group[j])
            if g >= l:
                g += 1
        members = groups[g]
        assigned[members[int(within[j] * len(members))]].append(j)

    # label skew can starve a client; donate one example from the largest list
    for c in range(clients):
        if not assigned[c]:
            donor = max(range(clients), key=lambda k: (len(assigned[k]), k))
            assigned[c].append(assigned[donor].pop())
    return PartitionPlan(tuple(tuple(ix) for ix in assigned), q)


def apply_trigger(features: np.ndarray, trig: TriggerSpec) -> np.ndarray:
    """Copy of a single feature vector with the patch written in (idempotent)."""
    out = np.array(features, dtype=np.float64)
    if out.ndim != 1:
        raise InputError("apply_trigger takes a single feature vector")
    if max(trig.patch_indices) >= out.shape[0]:
        raise InputError("trigger index out of range for feature dim")
    out[list(trig.patch_indices)] = trig.patch_value
    return out


def poison_dataset(data: LabeledDataset, trig: TriggerSpec, poison_fraction: float,
                   seed: int) -> LabeledDataset:
    """Trigger + target label applied to a seeded subset of round(fraction*n) examples."""
    if not 0.0 <= poison_fraction <= 1.0:
        raise ConfigError("poison_fraction must lie in [0, 1]")
    if data.size and max(trig.patch_indices) >= data.dim:
        raise InputError("trigger index out of range for feature dim")
    k = round_half_up(poison_fraction * data.size)
    if k == 0:
        return data
    rows = np.sort(substream(seed).choice(data.size, size=k, replace=False))
    feats = data.features.copy()
    labels = data.labels.copy()
    feats[np.ix_(rows, list(trig.patch_indices))] = trig.patch_value
    labels[rows] = trig.target_label
    return LabeledDataset(feats, labels, data.num_classes)


def build_backdoor_testset(test: LabeledDataset, trig: TriggerSpec) -> LabeledDataset:
    """Triggered copies of all non-target-class examples, relabelled to the target.

    True-target examples are dropped so the success rate measures induced
    misclassification only.
    """
    if test.size == 0:
        raise InputError("empty test set")
    if max(trig.patch_indices) >= test.dim:
        raise InputError("trigger index out of range for feature dim")
    keep = test.labels != trig.target_label
    if not keep.any():
        raise InputError("every test example already has the target label")
    feats = test.features[keep].copy()
    feats[:, list(trig.patch_indices)] = trig.patch_value
    labels = np.full(feats.shape[0], trig.target_label, dtype=np.int64)
    return LabeledDataset(feats, labels, test.num_classes)


def load_csv(path: str) -> LabeledDataset:
    """Dataset from a headered CSV: d feature columns then an integer label column."""
    if not os.path.exists(path):
        raise InputError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file, header row required") from None
        if len(header) < 2:
            raise InputError(f"{path}: need at least one feature column and a label column")
        feats, labels = [], []
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{ln}: expected {len(header)} columns, got {len(row)}")
            try:
                feats.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise InputError(f"{path}:{ln}: {exc}") from None
    if not feats:
        raise InputError(f"{path}: no data rows")
    labels_arr = np.asarray(labels, dtype=np.int64)
    return LabeledDataset(np.asarray(feats), labels_arr, max(int(labels_arr.max()) + 1, 2))
