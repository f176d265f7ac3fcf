"""Anatomical landmark detection by coarse-to-fine Gaussian heatmap regression.

A multi-scale feature aggregation network over pretrained backbone taps
regresses half-resolution heatmaps, and a refinement stage fuses raw-image
features with the aggregated features and coarse heatmaps to regress
full-resolution heatmaps; landmarks are read off each channel's global
maximum with sub-pixel refinement.
"""

from .exceptions import (
    CheckpointError,
    ComparisonError,
    ConfigError,
    DataError,
    FarnetError,
    FrameError,
    GenerationError,
    NumericsError,
    ParameterError,
    ResourceError,
    ShapeError,
)
from .heatmaps import (
    Frame,
    FrameTransform,
    HeatmapGrid,
    HeatmapStack,
    LandmarkSet,
    decode_landmarks,
    encode_heatmap_stack,
    map_coordinates,
    read_heatmap_stack,
    read_landmark_file,
    subpixel_refine,
    top_peaks,
    write_heatmap_stack,
    write_landmark_file,
)
from .losses import (
    CoarseFineLoss,
    LossConfig,
    coarse_fine_loss,
    ewc_loss,
    ewc_loss_grad,
    l2_heatmap_loss,
)
from .metrics import (
    EvalReport,
    PixelSpacing,
    SpacingMode,
    mre,
    pearson,
    radial_errors,
    sdr,
    spine_metrics,
)
from .backbones import (
    BACKBONE_CHANNELS,
    Backbone,
    BackboneTaps,
    build_backbone,
    extract_backbone_taps,
)
from .model import (
    FARNet,
    ChannelSchedule,
    ForwardOutput,
    Fusion,
    ModelConfig,
    Refinement,
    build_model,
)
from .datasets import (
    AugmentConfig,
    DatasetKind,
    DatasetSpec,
    Sample,
    load_cephalometric,
    load_dataset,
    load_hand,
    load_spine,
)
from .synthetic import generate_synthetic
from .transforms import PreparedSample, augment, prepare_input
from .config import (
    OptimizerConfig,
    RunConfig,
    load_dataset_spec,
    load_run_config,
    run_config_from_dict,
    run_config_to_dict,
    save_run_config,
)
from .engine import (
    Checkpoint,
    TrainResult,
    evaluate,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # errors
    "FarnetError", "ParameterError", "FrameError", "ShapeError", "ConfigError",
    "ComparisonError", "DataError", "GenerationError", "ResourceError",
    "NumericsError", "CheckpointError",
    # heatmaps
    "Frame", "LandmarkSet", "HeatmapGrid", "HeatmapStack", "FrameTransform",
    "encode_heatmap_stack", "decode_landmarks", "subpixel_refine", "map_coordinates",
    "top_peaks", "read_heatmap_stack", "write_heatmap_stack",
    "read_landmark_file", "write_landmark_file",
    # losses
    "LossConfig", "CoarseFineLoss", "l2_heatmap_loss", "ewc_loss", "ewc_loss_grad",
    "coarse_fine_loss",
    # metrics
    "SpacingMode", "PixelSpacing", "EvalReport", "radial_errors", "mre", "sdr",
    "spine_metrics", "pearson",
    # model
    "BACKBONE_CHANNELS", "Backbone", "BackboneTaps", "build_backbone",
    "extract_backbone_taps", "FARNet", "ChannelSchedule", "ModelConfig",
    "ForwardOutput", "Fusion", "Refinement", "build_model",
    # data
    "DatasetKind", "DatasetSpec", "AugmentConfig", "Sample", "load_dataset",
    "load_cephalometric", "load_hand", "load_spine", "generate_synthetic",
    "PreparedSample", "prepare_input", "augment",
    # engine
    "OptimizerConfig", "RunConfig", "run_config_to_dict", "run_config_from_dict",
    "load_run_config", "save_run_config", "load_dataset_spec",
    "Checkpoint", "TrainResult", "train", "evaluate", "predict",
    "save_checkpoint", "load_checkpoint",
]
