"""Gated-scan adapter segmentation toolkit.

A self-contained research implementation: a reverse-mode autodiff core, a
selective state-space scan with a parallel associative engine, gated
multi-scale adapters for a frozen transformer encoder, a boundary-region
cross-attention distillation module, a two-stage trainer over synthetic
weak-boundary data, and a standard saliency/segmentation metric suite.
"""

from .adapter import MaGuPAdapter, MaGuPConfig
from .bdc import BDCConfig, BoundaryDistiller, distill_loss, downsample_mask, masked_split
from .checkpoint import load_checkpoint, save_checkpoint, strip_bdc
from .config import (RunConfig, apply_ablations, default_run_config,
                     load_run_config, model_config_from_run, save_run_config)
from .data import SynthConfig, augment, fit_to_size, gen_synthetic, list_dataset, load_pair
from .errors import (CheckpointError, ConfigError, ContractError, DataError,
                     MaGuPError, NumericsError, ShapeError)
from .metrics import (MetricReport, bce_loss, combined_loss, dice_loss,
                      e_measure_max, evaluate_dataset, evaluate_pair, mae,
                      mdice_miou, s_measure, weighted_fmeasure)
from .model import (EncoderConfig, ModelConfig, SegModel, TrainConfig,
                    evaluate_model, train_stage)
from .optim import Parameter, adam_step
from .rng import Rng
from .ssm import (MambaBlock1D, MambaConfig, SS2DBlock, cross_merge_2d,
                  cross_scan_2d, selective_scan, selective_scan_naive)
from .tensor import GradientMap, Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "MaGuPAdapter", "MaGuPConfig",
    "BDCConfig", "BoundaryDistiller", "distill_loss", "downsample_mask", "masked_split",
    "load_checkpoint", "save_checkpoint", "strip_bdc",
    "RunConfig", "apply_ablations", "default_run_config", "load_run_config",
    "model_config_from_run", "save_run_config",
    "SynthConfig", "augment", "fit_to_size", "gen_synthetic", "list_dataset", "load_pair",
    "CheckpointError", "ConfigError", "ContractError", "DataError",
    "MaGuPError", "NumericsError", "ShapeError",
    "MetricReport", "bce_loss", "combined_loss", "dice_loss", "e_measure_max",
    "evaluate_dataset", "evaluate_pair", "mae", "mdice_miou", "s_measure",
    "weighted_fmeasure",
    "EncoderConfig", "ModelConfig", "SegModel", "TrainConfig",
    "evaluate_model", "train_stage",
    "Parameter", "adam_step",
    "Rng",
    "MambaBlock1D", "MambaConfig", "SS2DBlock", "cross_merge_2d",
    "cross_scan_2d", "selective_scan", "selective_scan_naive",
    "GradientMap", "Tape", "Tensor",
    "__version__",
]
