"""int8 inference micro-runtime and benchmark harness for the TinyissimoYOLO family."""

from .tensor import QParams, QuantTensor, dequantize, quantize

__version__ = "0.1.0"

__all__ = ["QParams", "QuantTensor", "dequantize", "quantize", "__version__"]
