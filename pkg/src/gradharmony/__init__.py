"""Cross-modality gradient harmonization for two-loss contrastive pretraining."""

from .harmonizer import GammaSchedule, HarmonizerConfig, combine, realign
from .model import ModelDims, ModelParams, init_params
from .synth import SynthConfig, generate
from .trainer import TrainConfig, train

__all__ = ["GammaSchedule", "HarmonizerConfig", "ModelDims", "ModelParams", "SynthConfig",
           "TrainConfig", "combine", "generate", "init_params", "realign", "train"]
