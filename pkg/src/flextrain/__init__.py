"""Depth-flexible residual network training and federated simulation."""
from flextrain.data import (Dataset, PartitionPlan, gen_blobs, gen_spiral, load_csv, load_idx,
                            partition_dirichlet, partition_iid, partition_shards)
from flextrain.estimator import FlexTrainClassifier
from flextrain.federated import (DeviceProfile, FederationConfig, aggregate, make_devices,
                                 run_fedclass, run_federated, run_fedsmall)
from flextrain.losses import centralized_distill_loss, federated_distill_loss
from flextrain.nn import ResidualNet, forward_prefix, init_net, load_checkpoint, save_checkpoint
from flextrain.reporting import (CostModel, ReportRecord, expected_training_cost, read_report,
                                 write_report)
from flextrain.sampler import ActivationDistribution, expected_param_ratio, sample_config
from flextrain.trainer import TrainConfig, train_flextrain, train_independents, train_single

__version__ = "0.1.0"

__all__ = [
    "ActivationDistribution", "CostModel", "Dataset", "DeviceProfile", "FederationConfig",
    "FlexTrainClassifier", "PartitionPlan", "ReportRecord", "ResidualNet", "TrainConfig",
    "aggregate", "centralized_distill_loss", "expected_param_ratio", "expected_training_cost",
    "federated_distill_loss", "forward_prefix", "gen_blobs", "gen_spiral", "init_net",
    "load_checkpoint", "load_csv", "load_idx", "make_devices", "partition_dirichlet",
    "partition_iid", "partition_shards", "read_report", "run_fedclass", "run_federated",
    "run_fedsmall", "sample_config", "save_checkpoint", "train_flextrain", "train_independents",
    "train_single", "write_report",
]
