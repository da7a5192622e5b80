"""Global-memory guided retrieval: memory model, retriever, pipeline, training and evaluation."""
from .model import ModelConfig, Parameters, init_params, load_checkpoint, save_checkpoint
from .pipeline import Pipeline, PipelineConfig, TaskResult
from .text import Vocab

__version__ = "0.1.0"
__all__ = [
    "ModelConfig",
    "Parameters",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "Pipeline",
    "PipelineConfig",
    "TaskResult",
    "Vocab",
]
