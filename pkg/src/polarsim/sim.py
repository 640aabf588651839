"""Round-by-round federated-learning orchestration.

Each round schedules clients, runs benign local training and (on attack
rounds) one coordinated malicious step, aggregates through the configured
defense, applies the aggregate to the global model, and records metrics.
Every random draw comes from a stream keyed by (run seed, purpose, round,
client), so results are identical regardless of execution order.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .attacks import AttackerState, AttackStrategy, malicious_client_step
from .data import (
    LabeledDataset,
    PartitionPlan,
    TriggerSpec,
    build_backdoor_testset,
    concat_datasets,
    generate_synthetic,
    load_csv,
    partition_noniid,
    poison_dataset,
    round_half_up,
    tail_trigger,
)
from .defenses import ClientUpdate, DefenseConfig, run_defense
from .errors import ConfigError
from .metrics import MetricsReport, absr_bbsr, accuracy, bsr, mar_bar
from .nn import (
    ModelParams,
    TrainConfig,
    apply_aggregate,
    init_model,
    mlp_arch,
    model_delta,
    train_local,
)
from .rng import derive_seed, substream

# substream purpose tags
_T_DATA = 0
_T_INIT = 1
_T_SCHED = 2
_T_CLIENT = 3
_T_ATTACK = 4
_T_SERVER = 5
_T_FLAME = 6
_T_POOL = 7
_T_POISON = 8

POOL_MODES = ("per_round", "fixed_pool")


@dataclass(frozen=True)
class SimConfig:
    total_clients: int = 100
    clients_per_round: int = 10
    malicious_fraction: float = 0.1
    rounds: int = 30
    local_epochs: int = 2
    client_lr: float = 0.1
    batch_size: int = 32
    attack_interval: int = 1
    pool_mode: str = "per_round"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.malicious_fraction < 0.5:
            raise ConfigError(
                f"malicious_fraction must lie in [0, 0.5), got {self.malicious_fraction}"
            )
        if self.attack_interval < 1:
            raise ConfigError("attack_interval must be at least 1")
        if self.clients_per_round > self.total_clients:
            raise ConfigError("clients_per_round cannot exceed total_clients")
        if self.clients_per_round < 1 or self.total_clients < 1:
            raise ConfigError("client counts must be positive")
        if self.rounds < 1:
            raise ConfigError("rounds must be at least 1")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs must be non-negative")
        if self.pool_mode not in POOL_MODES:
            raise ConfigError(f"pool_mode must be one of {POOL_MODES}")

    @property
    def pool_size(self) -> int:
        return round_half_up(self.total_clients * self.malicious_fraction)

    def train_cfg(self) -> TrainConfig:
        return TrainConfig(self.local_epochs, self.client_lr, self.batch_size)


@dataclass(frozen=True)
class DataSpec:
    """Task data: synthetic blob parameters or CSV paths, plus the trigger."""

    source: str = "synthetic"
    classes: int = 3
    dim: int = 32
    per_class: int = 400
    test_per_class: int = 100
    spread: float = 0.1
    train_csv: str = ""
    test_csv: str = ""
    noniid_q: float = 0.5
    target_label: int = 0
    patch_size: int = 25
    patch_value: float = 1.0
    poison_fraction: float = 0.5

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigError(f"data source must be synthetic or csv, got {self.source!r}")
        if self.source == "csv" and (not self.train_csv or not self.test_csv):
            raise ConfigError("csv data source needs train_csv and test_csv paths")
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise ConfigError("poison_fraction must lie in [0, 1]")


@dataclass
class RoundRecord:
    round: int
    benign_ids: tuple[int, ...]
    malicious_ids: tuple[int, ...]
    accepted_ids: tuple[int, ...]
    acc: float
    bsr: float
    mask: tuple[int, ...] | None
    policy_logits: tuple[float, ...] | None
    attacker_bsr: float | None
    wall_time: float
    attacker_time: float

    @property
    def selected_count(self) -> int | None:
        return None if self.mask is None else int(sum(self.mask))

    @property
    def accepted_malicious(self) -> int:
        return len(set(self.malicious_ids) & set(self.accepted_ids))


@dataclass
class FederationData:
    """Everything static across rounds: splits, trigger, attacker eval data."""

    train: LabeledDataset
    plan: PartitionPlan
    client_train: tuple[LabeledDataset, ...]
    client_poisoned: dict[int, LabeledDataset]
    test: LabeledDataset
    backdoor_test: LabeledDataset
    attacker_eval: LabeledDataset | None
    trigger: TriggerSpec
    root: LabeledDataset | None

    def client_sizes(self, ids) -> list[float]:
        return [float(self.client_train[cid].size) for cid in ids]


def schedule_clients(round_idx: int, cfg: SimConfig, seed: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """(benign ids, malicious ids) scheduled for one round.

    per_round mode reserves ids [0, pool) as malicious and forces
    round(clients_per_round * malicious_fraction) of them into every
    attack_interval-th round. fixed_pool mode samples all participants
    uniformly and marks whichever of them belong to the fixed pool.
    """
    rng = substream(seed, _T_SCHED, round_idx)
    n, total = cfg.clients_per_round, cfg.total_clients
    pool = cfg.pool_size
    if cfg.pool_mode == "fixed_pool":
        pool_ids = set(substream(seed, _T_POOL).choice(total, size=pool, replace=False).tolist())
        chosen = rng.choice(total, size=n, replace=False).tolist()
        mal = tuple(sorted(c for c in chosen if c in pool_ids))
        ben = tuple(sorted(c for c in chosen if c not in pool_ids))
        return ben, mal

    slots = round_half_up(n * cfg.malicious_fraction) if round_idx % cfg.attack_interval == 0 else 0
    slots = min(slots, pool)
    benign_pop = total - pool
    if n - slots > benign_pop:
        raise ConfigError("not enough benign clients to fill the round")
    mal = tuple(sorted(rng.choice(pool, size=slots, replace=False).tolist())) if slots else ()
    ben = tuple(sorted((pool + rng.choice(benign_pop, size=n - slots, replace=False)).tolist()))
    return ben, mal


def prepare_federation(
    data_spec: DataSpec, cfg: SimConfig, defense: DefenseConfig, seed: int
) -> FederationData:
    if data_spec.source == "synthetic":
        train = generate_synthetic(
            data_spec.classes, data_spec.dim, data_spec.per_class,
            data_spec.spread, derive_seed(seed, _T_DATA, 0),
        )
        test = generate_synthetic(
            data_spec.classes, data_spec.dim, data_spec.test_per_class,
            data_spec.spread, derive_seed(seed, _T_DATA, 1),
        )
    else:
        train = load_csv(data_spec.train_csv)
        test = load_csv(data_spec.test_csv)
    trigger = tail_trigger(
        train.dim, data_spec.target_label, data_spec.patch_size, data_spec.patch_value
    )

    root = None
    pool_data = train
    if defense.kind == "fltrust":
        size = min(defense.fltrust_root_size, train.size // 2)
        rows = substream(seed, _T_DATA, 2).choice(train.size, size=size, replace=False)
        root = train.subset(np.sort(rows))
        rest = np.setdiff1d(np.arange(train.size), rows)
        pool_data = train.subset(rest)

    plan = partition_noniid(
        pool_data, cfg.total_clients, data_spec.noniid_q, derive_seed(seed, _T_DATA, 3)
    )
    client_train = tuple(pool_data.subset(list(ix)) for ix in plan.client_indices)

    pool_ids: list[int]
    if cfg.pool_mode == "fixed_pool":
        pool_ids = sorted(
            substream(seed, _T_POOL).choice(cfg.total_clients, size=cfg.pool_size, replace=False).tolist()
        )
    else:
        pool_ids = list(range(cfg.pool_size))
    client_poisoned = {
        cid: poison_dataset(
            client_train[cid], trigger, data_spec.poison_fraction,
            derive_seed(seed, _T_POISON, cid),
        )
        for cid in pool_ids
    }
    attacker_eval = None
    if pool_ids:
        pooled = concat_datasets([client_train[cid] for cid in pool_ids])
        attacker_eval = build_backdoor_testset(pooled, trigger)

    return FederationData(
        train=train,
        plan=plan,
        client_train=client_train,
        client_poisoned=client_poisoned,
        test=test,
        backdoor_test=build_backdoor_testset(test, trigger),
        attacker_eval=attacker_eval,
        trigger=trigger,
        root=root,
    )


def run_round(
    global_model: ModelParams,
    round_idx: int,
    cfg: SimConfig,
    defense: DefenseConfig,
    strat: AttackStrategy,
    state: AttackerState,
    fed: FederationData,
    seed: int,
) -> tuple[ModelParams, RoundRecord, AttackerState]:
    t0 = time.perf_counter()
    train_cfg = cfg.train_cfg()
    benign_ids, malicious_ids = schedule_clients(round_idx, cfg, seed)

    updates: list[ClientUpdate] = []
    for cid in benign_ids:
        local, _ = train_local(
            global_model, fed.client_train[cid], train_cfg.epochs, train_cfg.lr,
            derive_seed(seed, _T_CLIENT, round_idx, cid), batch_size=train_cfg.batch_size,
        )
        updates.append(ClientUpdate(cid, False, model_delta(local, global_model)))

    attacker_time = 0.0
    if malicious_ids:
        lead = malicious_ids[0]
        t_att = time.perf_counter()
        update, state = malicious_client_step(
            global_model,
            fed.client_train[lead],
            fed.client_poisoned[lead],
            fed.attacker_eval,
            strat,
            state,
            train_cfg,
            derive_seed(seed, _T_ATTACK, round_idx),
            client_id=lead,
        )
        attacker_time = time.perf_counter() - t_att
        updates.append(update)
        for cid in malicious_ids[1:]:
            updates.append(replace(update, client_id=cid))

    server_update = None
    if defense.kind == "fltrust":
        server_model, _ = train_local(
            global_model, fed.root, train_cfg.epochs, train_cfg.lr,
            derive_seed(seed, _T_SERVER, round_idx), batch_size=train_cfg.batch_size,
        )
        server_update = model_delta(server_model, global_model)

    result = run_defense(
        updates,
        defense,
        data_weights=fed.client_sizes([u.client_id for u in updates]),
        server_update=server_update,
        seed=derive_seed(seed, _T_FLAME, round_idx),
    )
    new_global = apply_aggregate(global_model, result.aggregate)

    mask = state.last_mask if malicious_ids else None
    logits = state.policy.logits if (malicious_ids and state.policy is not None) else None
    record = RoundRecord(
        round=round_idx,
        benign_ids=benign_ids,
        malicious_ids=malicious_ids,
        accepted_ids=tuple(sorted(result.accepted_ids)),
        acc=accuracy(new_global, fed.test),
        bsr=bsr(new_global, fed.backdoor_test),
        mask=None if mask is None else tuple(int(b) for b in mask),
        policy_logits=None if logits is None else tuple(float(v) for v in logits),
        attacker_bsr=state.last_bsr if malicious_ids else None,
        wall_time=time.perf_counter() - t0,
        attacker_time=attacker_time,
    )
    return new_global, record, state


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    report: MetricsReport
    wall_time: float
    attacker_time: float


def run_experiment(
    cfg: SimConfig,
    defense: DefenseConfig,
    strat: AttackStrategy,
    data_spec: DataSpec,
    hidden_dims: tuple[int, ...] = (32, 32, 32),
) -> ExperimentResult:
    """Full seeded run: R rounds plus the windowed summary metrics."""
    t0 = time.perf_counter()
    seed = cfg.seed
    fed = prepare_federation(data_spec, cfg, defense, seed)
    arch = mlp_arch(fed.train.dim, tuple(hidden_dims), fed.train.num_classes)
    global_model = init_model(arch, derive_seed(seed, _T_INIT))
    state = AttackerState()

    records: list[RoundRecord] = []
    for r in range(cfg.rounds):
        global_model, record, state = run_round(
            global_model, r, cfg, defense, strat, state, fed, seed
        )
        records.append(record)

    trajectory = [rec.bsr for rec in records]
    absr, bbsr_v = absr_bbsr(trajectory)
    mar, bar = mar_bar(records)
    report = MetricsReport(
        acc=records[-1].acc,
        absr=absr,
        bbsr=bbsr_v,
        mar=mar,
        bar=bar,
        bsr_trajectory=tuple(trajectory),
    )
    return ExperimentResult(
        records=records,
        report=report,
        wall_time=time.perf_counter() - t0,
        attacker_time=sum(rec.attacker_time for rec in records),
    )
