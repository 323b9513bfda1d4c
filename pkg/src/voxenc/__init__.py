"""voxenc: train and evaluate voxel-wise fMRI response predictors from
precomputed image features, and analyze the trained model's attention maps."""

__version__ = "0.1.0"

from .data_io import (
    RoiAtlas,
    SplitAssignment,
    StimulusSet,
    load_atlas,
    load_tensor,
    make_split,
    save_tensor,
)
from .encoder import (
    EncoderConfig,
    EncoderParams,
    backward,
    condensed_feature,
    forward,
    gelu,
    init_params,
    load_params,
    save_params,
)
from .extractor import ToyExtractor, reshape_to_queries
from .hypersearch import run_search, suggest
from .metrics import accuracy, noise_ceiling, paired_ttest, pearson, region_accuracy
from .optimize import AdamState, TrainConfig, adam_step, mse_loss, train
from .saliency import functional_probability, kl_divergence, region_similarity, scorecam
from .embedviz import pca2, silhouette

__all__ = [
    "RoiAtlas",
    "SplitAssignment",
    "StimulusSet",
    "load_atlas",
    "load_tensor",
    "make_split",
    "save_tensor",
    "EncoderConfig",
    "EncoderParams",
    "backward",
    "condensed_feature",
    "forward",
    "gelu",
    "init_params",
    "load_params",
    "save_params",
    "ToyExtractor",
    "reshape_to_queries",
    "run_search",
    "suggest",
    "accuracy",
    "noise_ceiling",
    "paired_ttest",
    "pearson",
    "region_accuracy",
    "AdamState",
    "TrainConfig",
    "adam_step",
    "mse_loss",
    "train",
    "functional_probability",
    "kl_divergence",
    "region_similarity",
    "scorecam",
    "pca2",
    "silhouette",
]
