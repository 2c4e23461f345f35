"""Sparse, ReLU-fied, integer-quantized diagonal linear RNNs for streaming audio denoising."""
from .s5 import ModelSpec, S5Model, init_random, relufy

__version__ = "0.1.0"

__all__ = ["ModelSpec", "S5Model", "init_random", "relufy", "__version__"]
