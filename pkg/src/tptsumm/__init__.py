"""TP-Transformer summarisation toolkit: role/filler binding cells, training,
decoding, ROUGE evaluation and representation probing on a small numpy
autodiff engine."""

from .model import ModelConfig, TPTransformer, count_parameters
from .rng import Rng
from .tensor import Tensor

__all__ = ["ModelConfig", "TPTransformer", "count_parameters", "Rng", "Tensor"]
__version__ = "0.1.0"
