"""Federated learning simulator with selective self-distillation (FedSSD)."""

from fedssd.data import (
    LabeledDataset,
    PartitionPlan,
    generate_synthetic,
    label_skew_l1,
    load_idx,
    partition_dirichlet,
    partition_iid,
    partition_quantity,
    sample_auxiliary,
)
from fedssd.distill import (
    CompositeLossSpec,
    CredibilityMatrix,
    LossMode,
    backward,
    class_weights,
    credibility_matrix,
    kl_distill_loss,
    mse_distill_loss,
    prox_term,
    sample_weight,
    ssd_loss,
    weight_vector,
)
from fedssd.federation import (
    FederatedData,
    FederationConfig,
    aggregate,
    build_federated_data,
    client_update,
    load_checkpoint,
    run_federation,
    sample_clients,
    save_checkpoint,
)
from fedssd.metrics import emit, evaluate, forgetting_gap, rounds_to_target
from fedssd.nn import (
    Batch,
    ModelParams,
    OptimizerState,
    cross_entropy,
    forward_logits,
    init_mlp,
    sgd_step,
    softmax_probs,
)

__version__ = "0.1.0"
