"""Deterministic federated-learning simulator with layer-wise backdoor
attacks, reinforcement-learning layer selection, and robust aggregation
defenses."""

from .attacks import AttackerState, AttackStrategy, badnets_update, lp_attack_select, malicious_client_step
from .data import (
    LabeledDataset,
    PartitionPlan,
    TriggerSpec,
    apply_trigger,
    build_backdoor_testset,
    generate_synthetic,
    load_csv,
    partition_noniid,
    poison_dataset,
    tail_trigger,
)
from .defenses import (
    AggregationResult,
    ClientUpdate,
    DefenseConfig,
    fedavg,
    flame,
    fltrust,
    multikrum,
    rlr,
    run_defense,
)
from .errors import ConfigError, InputError, NumericalError, PolarSimError, ShapeError
from .metrics import MetricsReport, absr_bbsr, accuracy, bsr, mar_bar
from .nn import (
    ArchSpec,
    LayerSpec,
    ModelParams,
    TrainConfig,
    UpdateVector,
    apply_aggregate,
    forward,
    init_model,
    mlp_arch,
    model_delta,
    replace_layers,
    train_local,
)
from .polar import (
    PolarConfig,
    PolicyState,
    RewardBatch,
    compute_rewards,
    finalize_selection,
    init_policy,
    optimize_policy,
    policy_gradient,
    policy_loss,
    run_polar_round,
    sample_actions,
    selection_log_prob,
    update_policy,
)
from .sim import (
    DataSpec,
    ExperimentResult,
    FederationData,
    RoundRecord,
    SimConfig,
    prepare_federation,
    run_experiment,
    run_round,
    schedule_clients,
)

__version__ = "0.1.0"
