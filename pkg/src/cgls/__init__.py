"""Curriculum-guided layer scaling: staged depth growth paired with a difficulty curriculum,
in plain numpy."""

from .budget import allocate, flops_for, tokens_for
from .curriculum import MixtureWeights, StageSchedule, TierCorpus, load_preset, sample_batch, validate_schedule
from .growth import GrowthPlan, expand_copy_stack, expand_random, freeze_mask
from .model import ModelConfig, ParameterSet, loss_and_grad, new_model
from .trainer import PipelineConfig, RunReport, config_from_dict, load_config, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "GrowthPlan", "MixtureWeights", "ModelConfig", "ParameterSet", "PipelineConfig", "RunReport",
    "StageSchedule", "TierCorpus", "allocate", "config_from_dict", "expand_copy_stack",
    "expand_random", "flops_for", "freeze_mask", "load_config", "load_preset", "loss_and_grad",
    "new_model", "run_pipeline", "sample_batch", "tokens_for", "validate_schedule",
]
