"""Prompt-conditioned counting with discriminative query refinement.

The package trains a small query-based counter on synthetic scenes that
contain two confusable variants of the same object category.  A positive
prompt names the variant to count and an optional negative prompt names
the variant to suppress; the refinement stage subtracts the feature span
shared by both prompts from the negative queries and lets the positive
queries attend to what remains.
"""

from .autograd import RngStream, Tensor, backward
from .config import ABLATION_MASKS, TAU_GRID, CountexConfig, load_config, parse_mask
from .errors import (
    CapacityError,
    ConfigError,
    ContractError,
    CountexError,
    NonFiniteLossError,
    SceneFormatError,
    ShapeError,
)
from .model import CountModel
from .scenes import CategoryUniverse, PromptSpec, SyntheticScene, generate_scene
from .training import EvalReport, TrainResult, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ABLATION_MASKS",
    "TAU_GRID",
    "CapacityError",
    "CategoryUniverse",
    "ConfigError",
    "ContractError",
    "CountModel",
    "CountexConfig",
    "CountexError",
    "EvalReport",
    "NonFiniteLossError",
    "PromptSpec",
    "RngStream",
    "SceneFormatError",
    "ShapeError",
    "SyntheticScene",
    "Tensor",
    "TrainResult",
    "backward",
    "evaluate",
    "generate_scene",
    "load_config",
    "parse_mask",
    "train",
]
