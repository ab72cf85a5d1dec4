"""Toolkit for TEE-resident side-branch networks: search, train, attack-test."""

__version__ = "0.1.0"

from .space import (
    BackboneDims,
    BlockSpec,
    Configuration,
    FeatureDims,
    MemoryFootprint,
    OpType,
    SearchFactorRanges,
    decode,
    default_ranges,
    encode,
    estimate_memory,
    sample_random,
    validate,
)
from .latency import (
    CostProfile,
    ScheduleTrace,
    parallel_latency,
    sequential_baseline_latency,
    simulate_schedule,
    tee_block_cost,
    transfer_cost,
)
from .moo import (
    EvaluationRecord,
    ObjectivePoint,
    ParetoFront,
    hypervolume,
    nehvi_acquisition,
    pareto_front,
    score,
    select_optimal,
)
from .gp import GPSurrogate, fit_gp, fit_gp_data, predict
from .search import (
    SearchResult,
    SearchSettings,
    propose_batch,
    resume_search,
    run_random_search,
    run_search,
)
from .datasets import SyntheticDataset, make_dataset
from .models import (
    BackboneArch,
    ModelState,
    adapter_forward,
    build_backbone,
    forward_backbone,
    forward_combined,
    init_subnetwork,
    load_model,
    save_model,
)
from .training import (
    TrainConfig,
    TrainingCurves,
    clip_gradients,
    total_poison_loss,
    train_backbone,
    train_candidate,
    train_poisoned,
)
from .attack import (
    AttackReport,
    AttackScenario,
    Exposure,
    VictimBundle,
    init_shadow,
    query_victim,
    run_attack,
    run_attack_suite,
    train_surrogate,
)
from .experiment import ExperimentSpec, load_experiment_spec, write_default_spec

__all__ = [
    "AttackReport",
    "AttackScenario",
    "BackboneArch",
    "BackboneDims",
    "BlockSpec",
    "Configuration",
    "CostProfile",
    "EvaluationRecord",
    "ExperimentSpec",
    "Exposure",
    "FeatureDims",
    "GPSurrogate",
    "MemoryFootprint",
    "ModelState",
    "ObjectivePoint",
    "OpType",
    "ParetoFront",
    "ScheduleTrace",
    "SearchFactorRanges",
    "SearchResult",
    "SearchSettings",
    "SyntheticDataset",
    "TrainConfig",
    "TrainingCurves",
    "VictimBundle",
    "adapter_forward",
    "build_backbone",
    "clip_gradients",
    "decode",
    "default_ranges",
    "encode",
    "estimate_memory",
    "fit_gp",
    "fit_gp_data",
    "forward_backbone",
    "forward_combined",
    "hypervolume",
    "init_shadow",
    "init_subnetwork",
    "load_experiment_spec",
    "load_model",
    "make_dataset",
    "nehvi_acquisition",
    "parallel_latency",
    "pareto_front",
    "predict",
    "propose_batch",
    "query_victim",
    "resume_search",
    "run_attack",
    "run_attack_suite",
    "run_random_search",
    "run_search",
    "sample_random",
    "save_model",
    "score",
    "select_optimal",
    "sequential_baseline_latency",
    "simulate_schedule",
    "tee_block_cost",
    "total_poison_loss",
    "train_backbone",
    "train_candidate",
    "train_poisoned",
    "train_surrogate",
    "transfer_cost",
    "validate",
    "write_default_spec",
]
