"""Learned face anonymization trained against a face identifier, jointly with an action detector."""

from .baselines import AnonymizerSpec, apply_anonymizer
from .core_data import Box, load_manifest
from .modifier import ModifierConfig, ModifierNetwork
from .trainer import TrainingConfig, run_training

__all__ = [
    "AnonymizerSpec",
    "Box",
    "ModifierConfig",
    "ModifierNetwork",
    "TrainingConfig",
    "apply_anonymizer",
    "load_manifest",
    "run_training",
]
