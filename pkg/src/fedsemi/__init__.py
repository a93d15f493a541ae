"""Federated semi-supervised learning simulator with FedAvg, FedAvg-Semi and SemiAnAgg aggregation."""

from .aggregate import (
    AggregationWeights,
    ClientUpdate,
    FeatureDictionary,
    SimilarityReport,
    aggregate_round,
    build_anchor_dictionary,
    compute_similarity_report,
    fedavg_semi_weights,
    fedavg_weights,
    semianagg_weights,
    weighted_average,
)
from .data_sim import (
    ClientDataset,
    Dataset,
    PartitionSpec,
    augment,
    dirichlet_partition,
    gen_gaussian_mixture,
    make_imbalanced_counts,
)
from .local_train import (
    LocalTrainConfig,
    ThresholdState,
    assign_pseudo_labels,
    logit_adjust_offsets,
    train_local_round,
    update_thresholds,
)
from .orchestrator import (
    ExperimentConfig,
    evaluate,
    leave_one_out,
    load_config,
    run_experiment,
    run_federation,
    run_round,
    run_warmup,
)
from .tensor_net import Architecture, ModelParams, forward, init_params, loss_and_grad, sgd_step

__version__ = "0.1.0"
