"""Multi-rate magnitude pruning for skeleton-based graph convolutional networks.

One training run optimizes a shared set of latent weights at several pruning
rates at once; networks at other rates are then carved out by thresholding the
latents, with no retraining.
"""

from .autodiff import Tensor, backward, no_grad
from .bandstop import BandStopConfig, SigmaSchedule, band_stop, extract_mask, reparametrize, sigma_at
from .data import SkeletonSequence, TrajectoryGraph, build_graph, normalize, synth_dataset, temporal_chunk
from .distribution import TargetPrior, discretize_prior, kld, make_grid, quantile_threshold, soft_histogram
from .errors import (
    ContractError,
    DimensionError,
    DomainError,
    GeometryError,
    ParseError,
    TrainingError,
    ValidationError,
)
from .gcn import GcnConfig, GcnModel, build_model, forward, load_model, save_model, sbu_config
from .training import (
    DEFAULT_RATES,
    TrainConfig,
    TrainReport,
    dense_train,
    extrapolate,
    l1_train,
    mp_baseline,
    mrmp_train,
    srmp_train,
)

__version__ = "0.1.0"

__all__ = [
    "backward",
    "band_stop",
    "BandStopConfig",
    "build_graph",
    "build_model",
    "ContractError",
    "DEFAULT_RATES",
    "dense_train",
    "DimensionError",
    "discretize_prior",
    "DomainError",
    "extract_mask",
    "extrapolate",
    "forward",
    "GcnConfig",
    "GcnModel",
    "GeometryError",
    "kld",
    "l1_train",
    "load_model",
    "make_grid",
    "mp_baseline",
    "mrmp_train",
    "no_grad",
    "normalize",
    "ParseError",
    "quantile_threshold",
    "reparametrize",
    "save_model",
    "sbu_config",
    "sigma_at",
    "SigmaSchedule",
    "SkeletonSequence",
    "soft_histogram",
    "srmp_train",
    "synth_dataset",
    "TargetPrior",
    "temporal_chunk",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "TrainReport",
    "TrajectoryGraph",
    "ValidationError",
]
