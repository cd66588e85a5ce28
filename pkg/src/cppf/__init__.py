"""Self-supervised class-incremental training with prototype clustering,
embedding-space reserving and multi-teacher distillation."""
from .config import TrainConfig, load_config
from .sweep import sweep
from .trainer import RunResult, load_encoder, run_experiment

__all__ = ["TrainConfig", "load_config", "run_experiment", "RunResult", "load_encoder", "sweep"]
__version__ = "0.1.0"
