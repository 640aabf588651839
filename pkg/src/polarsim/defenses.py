"""Server-side aggregation rules: FedAvg plus four robust defenses.

Every rule reports which client updates it accepted and with what weight,
which is what the stealthiness metrics (malicious / benign acceptance
rates) are computed from. All math runs on the flattened update vectors.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .errors import ConfigError, InputError
from .nn import UpdateVector
from .rng import substream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClientUpdate:
    """Model delta submitted by one client in one round."""

    client_id: int
    malicious: bool
    delta: UpdateVector


@dataclass
class AggregationResult:
    aggregate: UpdateVector
    accepted_ids: frozenset[int]
    per_client_weight: dict[int, float]


@dataclass(frozen=True)
class DefenseConfig:
    """Aggregation rule and its parameters.

    krum_f / krum_m follow the usual MultiKrum roles (tolerated byzantine
    count, number of accepted updates). flame_min_cluster <= 0 means
    "half the round's participants plus one", resolved at aggregation time.
    """

    kind: str = "fedavg"
    krum_f: int = 2
    krum_m: int = 4
    rlr_threshold: int = 4
    rlr_server_lr: float = 1.0
    flame_noise: float = 0.001
    flame_min_cluster: int = 0
    fltrust_root_size: int = 300

    def __post_init__(self):
        if self.kind not in ("fedavg", "multikrum", "fltrust", "rlr", "flame"):
            raise ConfigError(f"unknown defense kind {self.kind!r}")
        if self.krum_f < 0 or self.krum_m < 1:
            raise ConfigError("krum_f must be >= 0 and krum_m >= 1")
        if self.rlr_threshold < 0:
            raise ConfigError("rlr_threshold must be non-negative")
        if self.rlr_server_lr <= 0:
            raise ConfigError("rlr_server_lr must be positive")
        if self.flame_noise < 0:
            raise ConfigError("flame_noise must be non-negative")
        if self.fltrust_root_size < 1:
            raise ConfigError("fltrust_root_size must be positive")


def _stack(updates: list[ClientUpdate]) -> np.ndarray:
    if not updates:
        raise InputError("no client updates to aggregate")
    arch = updates[0].delta.arch
    if any(u.delta.arch != arch for u in updates):
        raise InputError("client updates disagree on architecture")
    return np.stack([u.delta.flat() for u in updates])


def _result(updates, vec, weights) -> AggregationResult:
    accepted = frozenset(u.client_id for u, w in zip(updates, weights) if w > 0)
    return AggregationResult(
        aggregate=UpdateVector.from_flat(updates[0].delta.arch, vec),
        accepted_ids=accepted,
        per_client_weight={u.client_id: float(w) for u, w in zip(updates, weights)},
    )


def fedavg(updates: list[ClientUpdate], data_weights: list[float]) -> AggregationResult:
    """Data-size-weighted mean of all updates; everyone is accepted."""
    mat = _stack(updates)
    w = np.asarray(data_weights, dtype=np.float64)
    if w.shape != (len(updates),):
        raise ConfigError("need one data weight per update")
    if (w < 0).any() or w.sum() <= 0:
        raise ConfigError("data weights must be non-negative and not all zero")
    w = w / w.sum()
    return _result(updates, w @ mat, w)


def multikrum(updates: list[ClientUpdate], f: int, m: int) -> AggregationResult:
    """Keep the m updates with the smallest Krum scores, average them equally.

    Each update's score sums its squared distances to its n-f-2 nearest
    other updates; outliers score high and are dropped.
    """
    n = len(updates)
    if n < f + 3:
        raise ConfigError(f"multikrum needs at least f+3={f + 3} updates, got {n}")
    if not 1 <= m <= n:
        raise ConfigError(f"multikrum m must lie in [1, {n}], got {m}")
    mat = _stack(updates)
    sq = np.sum((mat[:, None, :] - mat[None, :, :]) ** 2, axis=2)
    closest = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(sq[i], i)
        scores[i] = np.sort(others)[:closest].sum()
    # sort by (score, client id) so ties cannot depend on submission order
    order = sorted(range(n), key=lambda i: (scores[i], updates[i].client_id))
    chosen = order[:m]
    weights = np.zeros(n)
    weights[chosen] = 1.0 / m
    return _result(updates, mat[chosen].mean(axis=0), weights)


def fltrust(updates: list[ClientUpdate], server_update: UpdateVector) -> AggregationResult:
    """Cosine-trust weighting against the server's own root-data update.

    Updates with non-positive cosine similarity to the server update get
    zero trust; the rest are rescaled to the server update's norm and
    averaged with trust-proportional weights.
    """
    mat = _stack(updates)
    ref = server_update.flat()
    ref_norm = float(np.linalg.norm(ref))
    if ref_norm == 0.0:
        raise ConfigError("server update must be non-zero")
    norms = np.linalg.norm(mat, axis=1)
    trust = np.zeros(len(updates))
    nonzero = norms > 0
    trust[nonzero] = np.maximum(mat[nonzero] @ ref / (norms[nonzero] * ref_norm), 0.0)
    if trust.sum() == 0.0:
        weights = np.zeros(len(updates))
        return _result(updates, np.zeros_like(ref), weights)
    rescaled = np.zeros_like(mat)
    rescaled[nonzero] = mat[nonzero] * (ref_norm / norms[nonzero])[:, None]
    weights = trust / trust.sum()
    return _result(updates, weights @ rescaled, weights)


def rlr(updates: list[ClientUpdate], threshold: int, server_lr: float) -> AggregationResult:
    """Sign-agreement learning-rate flipping, per flattened dimension.

    Dimensions where |sum of update signs| falls below the threshold get a
    negated server learning rate; no client is ever excluded, so acceptance
    here means participation.
    """
    if threshold < 0:
        raise ConfigError("rlr threshold must be non-negative")
    mat = _stack(updates)
    agreement = np.abs(np.sign(mat).sum(axis=0))
    lr_vec = np.where(agreement >= threshold, server_lr, -server_lr)
    weights = np.full(len(updates), 1.0 / len(updates))
    return _result(updates, lr_vec * mat.mean(axis=0), weights)


def flame(
    updates: list[ClientUpdate],
    min_cluster: int,
    noise_sigma: float,
    seed: int = 0,
) -> AggregationResult:
    """Cosine clustering, median-norm clipping, and seeded Gaussian noising.

    Average-linkage clustering over pairwise cosine distance is cut into two
    groups; the larger one is retained if it reaches min_cluster, otherwise
    all updates are kept (degenerate fallback, logged). Retained updates are
    clipped to their median norm, averaged, and noised with standard
    deviation noise_sigma * median norm.
    """
    mat = _stack(updates)
    n = len(updates)
    if n < min_cluster:
        log.warning("flame: %d updates below min_cluster=%d, accepting all", n, min_cluster)
        keep = np.arange(n)
    elif n == 1:
        keep = np.arange(n)
    else:
        norms = np.linalg.norm(mat, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        unit = mat / safe[:, None]
        cos = np.clip(unit @ unit.T, -1.0, 1.0)
        dist = 1.0 - cos
        condensed = dist[np.triu_indices(n, k=1)]
        labels = fcluster(linkage(condensed, method="average"), t=2, criterion="maxclust")
        sizes = np.bincount(labels)
        best = int(np.argmax(sizes))
        if sizes[best] >= min_cluster:
            keep = np.flatnonzero(labels == best)
        else:
            log.warning(
                "flame: largest cluster %d below min_cluster=%d, accepting all",
                sizes[best], min_cluster,
            )
            keep = np.arange(n)

    kept = mat[keep]
    kept_norms = np.linalg.norm(kept, axis=1)
    median_norm = float(np.median(kept_norms))
    scale = np.minimum(1.0, median_norm / np.where(kept_norms > 0, kept_norms, 1.0))
    clipped = kept * scale[:, None]
    agg = clipped.mean(axis=0)
    if noise_sigma > 0 and median_norm > 0:
        agg = agg + substream(seed).normal(0.0, noise_sigma * median_norm, size=agg.shape)
    weights = np.zeros(n)
    weights[keep] = 1.0 / len(keep)
    return _result(updates, agg, weights)


def run_defense(
    updates: list[ClientUpdate],
    cfg: DefenseConfig,
    *,
    data_weights: list[float] | None = None,
    server_update: UpdateVector | None = None,
    seed: int = 0,
) -> AggregationResult:
    """Dispatch to the configured rule, filling in round-level context."""
    if cfg.kind == "fedavg":
        if data_weights is None:
            data_weights = [1.0] * len(updates)
        return fedavg(updates, data_weights)
    if cfg.kind == "multikrum":
        return multikrum(updates, cfg.krum_f, min(cfg.krum_m, len(updates)))
    if cfg.kind == "fltrust":
        if server_update is None:
            raise ConfigError("fltrust needs the server's root-data update")
        return fltrust(updates, server_update)
    if cfg.kind == "rlr":
        return rlr(updates, cfg.rlr_threshold, cfg.rlr_server_lr)
    if cfg.kind == "flame":
        min_cluster = cfg.flame_min_cluster
        if min_cluster <= 0:
            min_cluster = len(updates) // 2 + 1
        return flame(updates, min_cluster, cfg.flame_noise, seed=seed)
    raise ConfigError(f"unknown defense kind {cfg.kind!r}")
