"""Desk-scale shadow removal core.

Selective state-space scanning with cross-region gate modulation and a
color-shift contrastive regularizer, on a minimal float64 autodiff
substrate. See the README for the CLI and the acceptance suite.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, finite_diff_check
from .colorshift import (
    FeatureExtractor,
    NegativeSet,
    build_negative_set,
    colorshift_loss,
    lab_rmse,
    srgb_to_lab,
)
from .crossgate import GateMaps, crossgate_maps
from .data import ShadowSample, synth_dataset, synth_shadow_sample
from .errors import (
    ConfigError,
    ContractViolation,
    GradCheckError,
    NoShadowRegion,
    TrainingError,
)
from .metrics import MetricsReport, psnr, region_metrics, ssim
from .model import (
    ModelConfig,
    ShadowRemovalModel,
    charbonnier,
    load_checkpoint,
    save_checkpoint,
    total_loss,
    train_stage1,
    train_stage2,
    train_two_stage,
)
from .ssm import (
    ContinuousParams,
    ScanParams,
    discretize_zoh,
    scan_image_4dir,
    scan_matrix_oracle,
    selective_params,
    selective_scan,
)

__all__ = [
    "ConfigError",
    "ContinuousParams",
    "ContractViolation",
    "FeatureExtractor",
    "GateMaps",
    "GradCheckError",
    "MetricsReport",
    "ModelConfig",
    "NegativeSet",
    "NoShadowRegion",
    "ScanParams",
    "ShadowRemovalModel",
    "ShadowSample",
    "Tape",
    "Tensor",
    "TrainingError",
    "__version__",
    "backward",
    "build_negative_set",
    "charbonnier",
    "colorshift_loss",
    "crossgate_maps",
    "discretize_zoh",
    "finite_diff_check",
    "lab_rmse",
    "load_checkpoint",
    "psnr",
    "region_metrics",
    "save_checkpoint",
    "scan_image_4dir",
    "scan_matrix_oracle",
    "selective_params",
    "selective_scan",
    "srgb_to_lab",
    "ssim",
    "synth_dataset",
    "synth_shadow_sample",
    "total_loss",
    "train_stage1",
    "train_stage2",
    "train_two_stage",
]
