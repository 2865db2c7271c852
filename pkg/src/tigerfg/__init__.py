"""tigerfg: text-guided fine-grained item retrieval at desk scale.

A dual-encoder retrieval model where item candidates (full scene image +
structured title) are fused into target-focused embeddings, trained with
contrastive, anchor, and distillation objectives on a synthetic
shape-product benchmark with clean and cluttered (mosaic) evaluation splits.
"""

from .config import Config, ConfigError, load_config, parse_config
from .model import ModelConfig, TigerFG
from .numerics import Box
from .objectives import LossBundle, LossToggles, LossWeights
from .retrieval import build_index, evaluate, heatmap_export
from .scenegen import WorldConfig, build_splits
from .trainer import (TrainConfig, TrainData, grad_check, make_teachers,
                      run_ablation_ladder, train)

__version__ = "0.1.0"

__all__ = [
    "Box", "Config", "ConfigError", "load_config", "parse_config",
    "ModelConfig", "TigerFG", "LossBundle", "LossToggles", "LossWeights",
    "WorldConfig", "build_splits", "build_index", "evaluate", "heatmap_export",
    "TrainConfig", "TrainData", "grad_check", "make_teachers",
    "run_ablation_ladder", "train",
    "__version__",
]
