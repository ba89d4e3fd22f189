"""Decentralized dual-adapter learning over gossip graphs, at desk scale."""

from .datagen import (
    AgentDataset,
    generate_federation,
    load_csv_dataset,
    sample_minibatch,
    save_csv_dataset,
)
from .metrics import (
    AssumptionEstimates,
    RoundMetrics,
    accuracy,
    consensus_error,
    estimate_assumptions,
    global_partial_grads,
    lyapunov_m,
    rate_slope_fit,
)
from .model import (
    AdapterParams,
    BackboneSpec,
    DualAdapterModel,
    build_backbone,
    features,
    grad_personalized,
    grad_shared,
    head_logits,
    loss,
    mixed_predict,
    new_model,
    param_counts,
)
from .topology import (
    MixingMatrix,
    Topology,
    build_mixing_matrix,
    build_topology,
    spectral_gap,
)
from .trainer import (
    AdaptiveMu,
    FederationState,
    FixedMu,
    PerAgentMu,
    TrainConfig,
    adapt_mu,
    dropout_gossip,
    gossip_round,
    init_federation,
    local_phase_nested,
    local_phase_parallel,
    run_experiment,
    validate_learning_rates,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterParams",
    "AdaptiveMu",
    "AgentDataset",
    "AssumptionEstimates",
    "BackboneSpec",
    "DualAdapterModel",
    "FederationState",
    "FixedMu",
    "MixingMatrix",
    "PerAgentMu",
    "RoundMetrics",
    "Topology",
    "TrainConfig",
    "accuracy",
    "adapt_mu",
    "build_backbone",
    "build_mixing_matrix",
    "build_topology",
    "consensus_error",
    "dropout_gossip",
    "estimate_assumptions",
    "features",
    "generate_federation",
    "global_partial_grads",
    "gossip_round",
    "grad_personalized",
    "grad_shared",
    "head_logits",
    "init_federation",
    "load_csv_dataset",
    "local_phase_nested",
    "local_phase_parallel",
    "loss",
    "lyapunov_m",
    "mixed_predict",
    "new_model",
    "param_counts",
    "rate_slope_fit",
    "run_experiment",
    "sample_minibatch",
    "save_csv_dataset",
    "spectral_gap",
    "validate_learning_rates",
]
