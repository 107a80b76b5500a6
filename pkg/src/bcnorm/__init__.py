"""Normalization layers for NCHW feature maps, with oracles and a training harness."""

from .tensor_ops import (
    BATCH_SPATIAL,
    CHANNEL_SPATIAL,
    SPATIAL,
    AxisSet,
    as_tensor4,
    broadcast_binary,
    group_spatial,
    max_rel_error,
    reduce_mean,
    reduce_var,
)
from .norms import (
    BatchChannelNorm,
    BatchNorm,
    GroupNorm,
    Identity,
    InstanceNorm,
    LayerNorm,
    ema_update,
)
from .gradcheck import GradReport, check_layer, finite_diff
from .nn import (
    ConvLayer,
    DenseLayer,
    GlobalAvgPool,
    ReLU,
    SGD,
    SmallCNN,
    softmax_cross_entropy,
)
from .data import Dataset, SyntheticSpec, batches, gen_synthetic, load_cifar10, save_cifar10
from .checkpoint import load_checkpoint, save_checkpoint
from .experiments import (
    ExperimentConfig,
    RunRecord,
    ablate_batch,
    equivalence_suite,
    gradcheck_suite,
    train_run,
)

__version__ = "0.1.0"

__all__ = [
    "AxisSet", "BATCH_SPATIAL", "CHANNEL_SPATIAL", "SPATIAL", "group_spatial",
    "as_tensor4", "reduce_mean", "reduce_var", "broadcast_binary", "max_rel_error",
    "BatchNorm", "LayerNorm", "InstanceNorm", "GroupNorm", "BatchChannelNorm",
    "Identity", "ema_update",
    "finite_diff", "check_layer", "GradReport",
    "ConvLayer", "DenseLayer", "ReLU", "GlobalAvgPool", "SGD", "SmallCNN",
    "softmax_cross_entropy",
    "Dataset", "SyntheticSpec", "gen_synthetic", "load_cifar10", "save_cifar10",
    "batches",
    "save_checkpoint", "load_checkpoint",
    "ExperimentConfig", "RunRecord", "train_run", "ablate_batch",
    "gradcheck_suite", "equivalence_suite",
]
