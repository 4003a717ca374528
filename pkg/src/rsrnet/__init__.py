"""Inharmonious region localization with recurrent self-reasoning."""

from .core import ModelConfig, desk_config, paper_config
from .pipeline import RSRNet, build_model, evaluate, train

__all__ = ["ModelConfig", "RSRNet", "build_model", "desk_config", "evaluate", "paper_config", "train"]
