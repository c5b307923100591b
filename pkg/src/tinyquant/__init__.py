"""Toy-scale integer-only transformer inference and compression toolkit."""

from tinyquant.qtensor import (
    IntTensor,
    QuantParams,
    RequantMultiplier,
    compute_qparams,
    dequantize,
    encode_multiplier,
    quantize,
    requantize,
)

__version__ = "0.1.0"

__all__ = [
    "IntTensor",
    "QuantParams",
    "RequantMultiplier",
    "compute_qparams",
    "dequantize",
    "encode_multiplier",
    "quantize",
    "requantize",
    "__version__",
]
