"""NVFP4/MXFP4 weight quantization with closed-form joint scale optimization
and decoupled scale search."""

from soarq.block import QuantConfig, QuantizedTensor, quantize_tensor_baseline, reconstruct_tensor
from soarq.soar import MethodResult, cjso_only_quantize, dss_only_quantize, quantize, soar_quantize
from soarq.tensor_io import load_checkpoint, read_packed, write_packed

__all__ = [
    "QuantConfig",
    "QuantizedTensor",
    "MethodResult",
    "quantize",
    "quantize_tensor_baseline",
    "reconstruct_tensor",
    "soar_quantize",
    "cjso_only_quantize",
    "dss_only_quantize",
    "load_checkpoint",
    "read_packed",
    "write_packed",
]

__version__ = "0.1.0"
