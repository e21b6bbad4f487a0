"""Multi-dataset pose training on a shared keypoint-embedding space.

Heatmap heads stay per-dataset; a nonparametric prototype bank over a
unified embedding space ties the datasets together. Prototypes are learned
by balanced optimal-transport assignment and momentum updates, embeddings
by pixel-prototype contrastive losses, and datasets teach each other
through filtered cross-type pseudo labels. Everything trains with
hand-derived gradients on top of numpy; the hot kernels have an optional
compiled core with a pure-python fallback.
"""

from ._kernels import BACKEND as KERNEL_BACKEND
from .css import CssConfig, filter_predictions, fuse_predictions
from .errors import (
    CheckpointError,
    ConfigError,
    DuplicateSkeleton,
    InvalidSpec,
    MissingLabel,
    NumericalError,
    ProtoPoseError,
    ShapeError,
    UndefinedMetric,
)
from .losses import LossWeights, joint_mse, ppc_loss, ppd_loss, proto_loss
from .metrics import average_precision, oks, pck
from .protobank import (
    PrototypeBank,
    init_bank,
    kmeans_clusters,
    load_bank,
    match_embeddings,
    momentum_update,
    save_bank,
    sinkhorn_assign,
)
from .skeletons import (
    Keypoint,
    KeypointSet,
    SkeletonRegistry,
    SkeletonSpec,
    decode_heatmap,
    encode_heatmap,
)
from .trainer import TrainConfig, TransferConfig, grad_check, train, transfer

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "CssConfig",
    "filter_predictions",
    "fuse_predictions",
    "CheckpointError",
    "ConfigError",
    "DuplicateSkeleton",
    "InvalidSpec",
    "MissingLabel",
    "NumericalError",
    "ProtoPoseError",
    "ShapeError",
    "UndefinedMetric",
    "LossWeights",
    "joint_mse",
    "ppc_loss",
    "ppd_loss",
    "proto_loss",
    "average_precision",
    "oks",
    "pck",
    "PrototypeBank",
    "init_bank",
    "kmeans_clusters",
    "load_bank",
    "match_embeddings",
    "momentum_update",
    "save_bank",
    "sinkhorn_assign",
    "Keypoint",
    "KeypointSet",
    "SkeletonRegistry",
    "SkeletonSpec",
    "decode_heatmap",
    "encode_heatmap",
    "TrainConfig",
    "TransferConfig",
    "grad_check",
    "train",
    "transfer",
    "__version__",
]
