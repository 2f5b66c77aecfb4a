"""Mixture-of-experts layers whose experts are learned butterfly rotations of
one shared ternary substrate, with a small autodiff engine, desk-scale
training on synthetic sequence tasks and closed-form memory analysis."""
from .errors import ConfigError, DimensionError, NumericError
from .butterfly import ButterflyParams, init_butterfly
from .ternary import TernaryMatrix, quantize, ternary_matmul
from .moe import ButterflyMoELayer, StandardMoELayer, moe_forward, load_balance_loss, diversity_score
from .model import Model, ModelConfig, build_model, train, evaluate
from .estimator import ButterflyMoESequenceModel
from .analysis import (asymptotic_compression, butterfly_memory_bytes, compression_ratio,
                       dram_energy_joules, flops_per_token, standard_moe_memory_bytes)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "NumericError",
    "ButterflyParams", "init_butterfly",
    "TernaryMatrix", "quantize", "ternary_matmul",
    "ButterflyMoELayer", "StandardMoELayer", "moe_forward", "load_balance_loss", "diversity_score",
    "ButterflyMoESequenceModel",
    "Model", "ModelConfig", "build_model", "train", "evaluate",
    "asymptotic_compression", "butterfly_memory_bytes", "compression_ratio",
    "dram_energy_joules", "flops_per_token", "standard_moe_memory_bytes",
]
