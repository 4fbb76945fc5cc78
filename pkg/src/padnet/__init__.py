"""Blind stereo image quality prediction from rivalry-weighted reconstruction errors.

The network reconstructs each view with a shared auto-encoder, turns the
reconstruction errors and learned prior maps into cross-view normalised
maps, fuses them with both views and regresses a quality score with a
residual backbone. Everything runs on the bundled numpy autodiff core.
"""
from .autoencoder import Autoencoder, Decoder, Encoder, reconstruction_loss
from .data_io import (
    StereoSample,
    export_map,
    load_image,
    load_manifest,
    load_weights,
    save_image,
    save_weights,
    synthesize_distortions,
)
from .errors import (
    DegenerateInputError,
    DimensionError,
    FormatError,
    NumericError,
    PadNetError,
    UsageError,
)
from .layers import GDN, BasicBlock, gdn, igdn, softplus
from .metrics import EvalReport, fit_logistic5, krasula_analysis, plcc_rmse, rmse_raw, srocc, ttest_runs
from .network import GROUP_PREFIXES, PADNet
from .pipeline import (
    PatchGrid,
    TrainConfig,
    augment,
    evaluate,
    extract_patches,
    joint_lrs,
    predict_quality,
    pretrain_autoencoder,
    pretrain_lr,
    pretrain_regressor_2d,
    train_joint,
)
from .regressor import Fusion, Regressor, fuse, regress_quality, score_loss
from .rivalry import PriorGenerator, RivalryBundle, build_bundle, normalize_likelihoods, normalize_priors

__version__ = "0.1.0"

__all__ = [
    "Autoencoder", "BasicBlock", "DegenerateInputError", "DimensionError", "Decoder", "Encoder",
    "EvalReport", "FormatError", "Fusion", "GDN", "GROUP_PREFIXES", "NumericError", "PADNet",
    "PadNetError", "PatchGrid", "PriorGenerator", "Regressor", "RivalryBundle", "StereoSample",
    "TrainConfig", "UsageError", "augment", "build_bundle", "evaluate", "export_map",
    "extract_patches", "fit_logistic5", "fuse", "gdn", "igdn", "joint_lrs", "krasula_analysis",
    "load_image", "load_manifest", "load_weights", "normalize_likelihoods", "normalize_priors",
    "plcc_rmse", "predict_quality", "pretrain_autoencoder", "pretrain_lr", "pretrain_regressor_2d",
    "reconstruction_loss", "regress_quality", "rmse_raw", "save_image", "save_weights", "score_loss",
    "softplus", "srocc", "synthesize_distortions", "train_joint", "ttest_runs",
]
