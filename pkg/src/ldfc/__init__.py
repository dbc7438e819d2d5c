"""Data-free CNN compression: layer-wise quantization and pruning driven
by recorded BatchNorm statistics, with buffer-recorded cross-layer
equalization as the shared preconditioning step."""

from .errors import DivergenceError, FormatError, LdfcError, ShapeError
from .graph import (BatchNormParams, Block, NetworkGraph, QuantParams,
                    STRState, run_forward)
from .serialize import (load_data, load_model, save_dataset, save_model,
                        save_refpack)
from .tensor import ConvSpec

__version__ = "0.1.0"

__all__ = [
    "BatchNormParams", "Block", "ConvSpec", "DivergenceError", "FormatError",
    "LdfcError", "NetworkGraph", "QuantParams", "STRState", "ShapeError",
    "load_data", "load_model", "run_forward", "save_dataset", "save_model",
    "save_refpack", "__version__",
]
