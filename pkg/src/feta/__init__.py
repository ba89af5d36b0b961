"""Desk-scale differentially private image synthesis with training shortcuts.

A diffusion synthesizer is warmed up on two cheaply privatised summaries of the
sensitive images (noisy per-class central images and noisy mean random-Fourier
embeddings) before DP-SGD fine-tuning. A Renyi-DP ledger tracks every release.

Submodules: :mod:`~feta.numerics`, :mod:`~feta.accountant`, :mod:`~feta.features`,
:mod:`~feta.models`, :mod:`~feta.dpsgd`, :mod:`~feta.pipeline`,
:mod:`~feta.data_eval` and :mod:`~feta.cli`.
"""

from .accountant import (RdpLedger, SgmSpec, budget_ratios, calibrate_sigma_d, compose, ledger_for, sgm_rdp_step,
                         to_dp)
from .data_eval import EvalReport, evaluate, load_idx, load_toy_digits, rff_mmd, save_idx
from .dataset import LabeledDataset
from .dpsgd import DpSgdConfig, finetune
from .errors import (ConfigError, DataError, FetaError, InfeasibleBudgetError, MissingArtifactError,
                     PrivacyBoundaryError, TrainingDivergenceError)
from .features import FeatureConfig, extract_features, load_features, rff_embed, sample_projection, save_features
from .models import DiffusionModel, Generator, load_checkpoint, sample_images, save_checkpoint
from .pipeline import CurriculumConfig, RunReport, allocation_sweep, plan_budget, run_curriculum, synthesize

__version__ = "0.1.0"

__all__ = [
    "RdpLedger", "SgmSpec", "budget_ratios", "calibrate_sigma_d", "compose", "ledger_for", "sgm_rdp_step", "to_dp",
    "EvalReport", "evaluate", "load_idx", "load_toy_digits", "rff_mmd", "save_idx",
    "LabeledDataset",
    "DpSgdConfig", "finetune",
    "ConfigError", "DataError", "FetaError", "InfeasibleBudgetError", "MissingArtifactError",
    "PrivacyBoundaryError", "TrainingDivergenceError",
    "FeatureConfig", "extract_features", "load_features", "rff_embed", "sample_projection", "save_features",
    "DiffusionModel", "Generator", "load_checkpoint", "sample_images", "save_checkpoint",
    "CurriculumConfig", "RunReport", "allocation_sweep", "plan_budget", "run_curriculum", "synthesize",
]
