"""Expected transaction value modeling and constrained fund allocation.

The library covers the full offline loop: simulate a market, fit a
zero-inflated lognormal three-head model on sparse conversion logs,
score every user-fund pair, and fill exact per-fund demands under risk
eligibility with heuristic, exact, and baseline strategies.
"""

from .core import (
    AllocationPlan,
    ConfigError,
    DataFormatError,
    DivergedError,
    EmptyDataError,
    EmptyDeliveriesError,
    EtvAllocError,
    EtvMatrix,
    FundType,
    InfeasibleError,
    Instance,
    NonFiniteLossError,
    ShapeError,
    UserRecord,
    Violation,
    demand_coverage,
    make_instance,
    objective,
    validate_instance,
    validate_plan,
)
from .etvmodel import (
    LOSS_KINDS,
    EpochStats,
    EsjModel,
    TrainConfig,
    TrainResult,
    ce_mse_loss,
    esj_loss,
    etv_from_params,
    grad_check,
    pair_features,
    predict_etv,
    predict_params,
    train,
    ziln_loss,
)
from .alloc import (
    STRATEGIES,
    HaState,
    allocate_exact,
    allocate_greedy,
    allocate_ha,
    allocate_manual,
    ha_initial_state,
    run_strategy,
)
from .sim import (
    BenchCell,
    GeneratorConfig,
    MetricsReport,
    Observation,
    ObservationSet,
    SimData,
    TrueModel,
    TruthTable,
    bench,
    default_priority,
    generate,
    metrics_delivery,
    metrics_thc_tha,
    run_experiment,
    simulate_outcomes,
    stage_seed,
    stage_seed_int,
)
from .dataio import (
    BENCH_COLUMNS,
    REPORT_COLUMNS,
    load_checkpoint,
    read_etv,
    read_instance,
    read_observations,
    read_plan,
    read_report,
    read_truth,
    save_checkpoint,
    write_bench,
    write_etv,
    write_instance,
    write_observations,
    write_plan,
    write_report,
    write_report_json,
    write_training_log,
    write_truth,
)

__version__ = "0.1.0"

__all__ = [
    "AllocationPlan",
    "BENCH_COLUMNS",
    "BenchCell",
    "ConfigError",
    "DataFormatError",
    "DivergedError",
    "EmptyDataError",
    "EpochStats",
    "EmptyDeliveriesError",
    "EsjModel",
    "EtvAllocError",
    "EtvMatrix",
    "FundType",
    "GeneratorConfig",
    "HaState",
    "InfeasibleError",
    "Instance",
    "LOSS_KINDS",
    "MetricsReport",
    "NonFiniteLossError",
    "REPORT_COLUMNS",
    "Observation",
    "ObservationSet",
    "STRATEGIES",
    "ShapeError",
    "SimData",
    "TrainConfig",
    "TrainResult",
    "TrueModel",
    "TruthTable",
    "UserRecord",
    "Violation",
    "allocate_exact",
    "allocate_greedy",
    "allocate_ha",
    "allocate_manual",
    "bench",
    "ce_mse_loss",
    "default_priority",
    "demand_coverage",
    "esj_loss",
    "etv_from_params",
    "generate",
    "grad_check",
    "ha_initial_state",
    "load_checkpoint",
    "make_instance",
    "metrics_delivery",
    "metrics_thc_tha",
    "objective",
    "pair_features",
    "predict_etv",
    "predict_params",
    "read_etv",
    "read_instance",
    "read_observations",
    "read_plan",
    "read_report",
    "read_truth",
    "run_experiment",
    "run_strategy",
    "save_checkpoint",
    "simulate_outcomes",
    "stage_seed",
    "stage_seed_int",
    "train",
    "validate_instance",
    "validate_plan",
    "write_bench",
    "write_etv",
    "write_instance",
    "write_observations",
    "write_plan",
    "write_report",
    "write_report_json",
    "write_training_log",
    "write_truth",
    "ziln_loss",
]
