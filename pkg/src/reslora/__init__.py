"""LoRA adapters with cross-layer residual shortcuts, their merges, and a desk-scale harness."""
from reslora.autodiff import backward, gradient_check, value_and_grad
from reslora.merge import MergedModel, MergeReport, merge
from reslora.model import (
    STRUCTURES,
    AdapterBlock,
    BaseLayer,
    Layer,
    ResLoRAModel,
    build_model,
    forward,
    forward_bs,
    forward_is,
    forward_ms,
    forward_plain,
)
from reslora.tensor import Matrix, SeededRng, ShapeError
from reslora.train import NormWindow, TrainConfig, make_task, train

__version__ = "0.1.0"

__all__ = [
    "STRUCTURES", "AdapterBlock", "BaseLayer", "Layer", "Matrix", "MergeReport", "MergedModel", "NormWindow",
    "ResLoRAModel", "SeededRng", "ShapeError", "TrainConfig", "backward", "build_model", "forward",
    "forward_bs", "forward_is", "forward_ms", "forward_plain", "gradient_check", "make_task", "merge",
    "train", "value_and_grad",
]
