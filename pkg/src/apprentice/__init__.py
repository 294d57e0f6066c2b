"""Low-precision networks trained by knowledge distillation from a full-precision teacher."""

from .config import ConfigError, RunConfig, parse_config
from .data import ChannelNormalizer, Dataset, load_dataset
from .distill import DistillConfig, Prediction, apprentice_loss, loss_terms
from .models import ModelSpec, Network, build_model
from .quant import FULL_PRECISION, QuantSpec, apply_policy
from .schemes import (SchemeResult, cache_teacher_logits, evaluate, run, run_baseline, run_scheme_a,
                      run_scheme_b, run_scheme_c)
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ChannelNormalizer", "ConfigError", "Dataset", "DistillConfig", "FULL_PRECISION", "ModelSpec",
    "Network", "Prediction", "QuantSpec", "RunConfig", "SchemeResult", "Tensor", "apply_policy",
    "apprentice_loss", "build_model", "cache_teacher_logits", "evaluate", "load_dataset", "loss_terms",
    "no_grad", "parse_config", "run", "run_baseline", "run_scheme_a", "run_scheme_b", "run_scheme_c",
]
