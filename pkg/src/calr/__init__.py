"""Corrective adaptive low-rank compression of gated feed-forward layers."""

from .compress import (
    CompressedFfn,
    CorrectiveModule,
    FactorPair,
    SparseCorrective,
    TransformationProfile,
    build_calr_model,
    calr_forward,
    compress_ffn,
    finetune_calr,
    functional_objective,
    functional_residual,
    profile_transformation,
    select_targets,
)
from .linalg import LowRankPair, SvdResult, low_rank_approx, svd, truncate
from .model import GatedFfn, ModelConfig, TransformerModel, ffn_forward, forward, init_model
from .reports import CompressionReport, SpectrumReport

__version__ = "0.1.0"

__all__ = [
    "CompressedFfn",
    "CompressionReport",
    "CorrectiveModule",
    "FactorPair",
    "GatedFfn",
    "LowRankPair",
    "ModelConfig",
    "SparseCorrective",
    "SpectrumReport",
    "SvdResult",
    "TransformationProfile",
    "TransformerModel",
    "build_calr_model",
    "calr_forward",
    "compress_ffn",
    "ffn_forward",
    "finetune_calr",
    "forward",
    "functional_objective",
    "functional_residual",
    "init_model",
    "low_rank_approx",
    "profile_transformation",
    "select_targets",
    "svd",
    "truncate",
]
