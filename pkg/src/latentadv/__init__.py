"""Latent-space adversarial image editing toolkit.

Deterministic diffusion inversion and denoising over a learned latent,
an attack loop that composes transform / loss / ensemble / gradient
strategies, and similarity-scored evaluation with report emission.
"""

from .attack import (
    AttackConfig,
    AttackModels,
    AttackResult,
    pixel_space_mifgsm,
    run_attack,
)
from .autodiff import DiffProgram, Tensor, grad_check
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DEFAULT_CONFIG, load_config, resolve_config
from .data import gen_dataset, render_image
from .diffusion import (
    GaussianAnalyticModel,
    NoiseSchedule,
    cfg_predict,
    ddim_invert_step,
    ddim_step,
    denoise_chain,
    invert_chain,
    make_schedule,
)
from .metrics import EvalRecord, ScoreBreakdown, asr, competition_score, ssim
from .models import ClassifierNet, Codec, EmbeddingTable, ScoreNet
from .report import write_report
from .training import TrainConfig, run_admission, train_classifier, train_codec, train_score_net

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackModels",
    "AttackResult",
    "ClassifierNet",
    "Codec",
    "DEFAULT_CONFIG",
    "DiffProgram",
    "EmbeddingTable",
    "EvalRecord",
    "GaussianAnalyticModel",
    "NoiseSchedule",
    "ScoreBreakdown",
    "ScoreNet",
    "Tensor",
    "TrainConfig",
    "asr",
    "cfg_predict",
    "competition_score",
    "ddim_invert_step",
    "ddim_step",
    "denoise_chain",
    "gen_dataset",
    "grad_check",
    "invert_chain",
    "load_checkpoint",
    "load_config",
    "make_schedule",
    "pixel_space_mifgsm",
    "render_image",
    "resolve_config",
    "run_admission",
    "run_attack",
    "save_checkpoint",
    "ssim",
    "train_classifier",
    "train_codec",
    "train_score_net",
    "write_report",
]
