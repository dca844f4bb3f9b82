"""Max-based microscaling block quantization (NVFP4 and MXFP4).

Tensors are flattened in row-major order and cut into contiguous blocks of
``block_size`` elements; a ragged tail is zero-padded.  For weights whose
last dimension is a multiple of the block size this is the usual
per-output-channel blocking.

NVFP4 uses a float32 global scale ``alpha`` and E4M3 block scales.  MXFP4
uses E8M0 (power-of-two) block scales and no global scale; internally its
``alpha`` is fixed at 1.0.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from soarq import codecs
from soarq.codecs import E2M1_MAX, E4M3_MAX, E4M3_MIN_NORMAL, E4M3_MIN_SUBNORMAL

FORMATS = ("nvfp4", "mxfp4")
METHODS = ("baseline", "cjso", "dss", "soar")
DEFAULT_BLOCK_SIZE = {"nvfp4": 16, "mxfp4": 32}


class ScaleFormat:
    """Positive block-scale codebook plus its byte encoding."""

    def __init__(self, name: str, values: np.ndarray, zero_block_scale: float):
        self.name = name
        self.values = values
        self.min = float(values[0])
        self.max = float(values[-1])
        self.zero_block_scale = zero_block_scale

    def project(self, x):
        """Nearest representable positive scale, clipped into [min, max]."""
        x = np.asarray(x, dtype=np.float64)
        if self.name == "e4m3":
            out = np.clip(codecs.round_e4m3(x), self.min, self.max)
        else:
            mid = (self.values[:-1] + self.values[1:]) / 2.0
            out = self.values[np.searchsorted(mid, x, side="right")]
        return out.item() if out.ndim == 0 else out

    def neighbors(self, x: float, count: int) -> list[float]:
        if self.name == "e4m3":
            return codecs.e4m3_neighbors(x, count)
        return codecs.e8m0_neighbors(x, count)

    def neighbors_many(self, x: np.ndarray, count: int) -> np.ndarray:
        """Row ``i`` holds the ``count`` scales nearest ``x[i]`` (nearest first, ties to the smaller)."""
        x = np.asarray(x, dtype=np.float64)
        n = len(self.values)
        pos = np.searchsorted(self.values, x)
        idx = pos[:, None] + np.arange(-count, count)
        valid = (idx >= 0) & (idx < n)
        vals = self.values[np.clip(idx, 0, n - 1)]
        dist = np.where(valid, np.abs(vals - x[:, None]), np.inf)
        order = np.lexsort((vals, dist), axis=-1)[:, :count]
        return np.take_along_axis(vals, order, axis=-1)

    def next_up(self, values: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.values, values, side="right")
        return self.values[np.minimum(idx, len(self.values) - 1)]

    def encode(self, values: np.ndarray) -> np.ndarray:
        """Raw scale bytes: E4M3 bit patterns, or E8M0 biased exponents."""
        values = np.asarray(values, dtype=np.float64)
        if self.name == "e4m3":
            bits = codecs.quantize_e4m3(values)
            if not np.array_equal(codecs.decode_e4m3(bits), values):
                raise ValueError("block scale is not E4M3-representable")
            return np.asarray(bits, dtype=np.uint8)
        mant, exp = np.frexp(values)
        if np.any(mant != 0.5):
            raise ValueError("block scale is not a power of two")
        return (exp - 1 - codecs.E8M0_MIN_EXP).astype(np.uint8)

    def decode(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.uint8)
        if self.name == "e4m3":
            if np.any(raw & 0x80):
                raise ValueError("negative E4M3 block scale")
            vals = np.asarray(codecs.decode_e4m3(raw), dtype=np.float64)
            if np.any(vals <= 0):
                raise ValueError("zero E4M3 block scale")
            return vals
        if np.any(raw == 0xFF):
            raise ValueError("E8M0 byte 0xFF is not a valid scale")
        return np.asarray(codecs.decode_e8m0(raw.astype(np.int64) + codecs.E8M0_MIN_EXP), dtype=np.float64)


E4M3_SCALES = ScaleFormat("e4m3", codecs.e4m3_values(positive_only=True), E4M3_MIN_NORMAL)
E8M0_SCALES = ScaleFormat("e8m0", codecs.e8m0_values(), 1.0)


def scale_format(fmt: str) -> ScaleFormat:
    if fmt == "nvfp4":
        return E4M3_SCALES
    if fmt == "mxfp4":
        return E8M0_SCALES
    raise ValueError(f"unknown format {fmt!r}")


@dataclass(frozen=True)
class QuantConfig:
    format: str = "nvfp4"
    method: str = "soar"
    block_size: int | None = None
    max_iters: int = 15
    early_stop_tol: float = 1e-3
    grid_lo: float = 0.5
    grid_hi: float = 1.5
    grid_step: float = 0.01
    dequant_neighbor_count: int = 2

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ValueError(f"format must be one of {FORMATS}, got {self.format!r}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.format == "mxfp4" and self.method not in ("baseline", "dss"):
            raise ValueError("mxfp4 supports only the baseline and dss methods")
        if self.block_size is None:
            object.__setattr__(self, "block_size", DEFAULT_BLOCK_SIZE[self.format])
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.early_stop_tol >= 0 and math.isfinite(self.early_stop_tol)):
            raise ValueError("early_stop_tol must be a finite non-negative number")
        if not (0 < self.grid_lo <= 1 <= self.grid_hi):
            raise ValueError("grid bounds must satisfy 0 < grid_lo <= 1 <= grid_hi")
        if not self.grid_step > 0:
            raise ValueError("grid_step must be positive")
        if self.dequant_neighbor_count < 1:
            raise ValueError("dequant_neighbor_count must be >= 1")

    def replace(self, **changes) -> "QuantConfig":
        if "format" in changes and "block_size" not in changes:
            changes["block_size"] = None
        return dataclasses.replace(self, **changes)


@dataclass
class QuantizedTensor:
    """The storable artifact: global scale, block-scale bytes and FP4 codes.

    ``codes`` holds one unpacked E2M1 code per padded element; the padding
    codes are always zero and are not stored, and nibble packing happens at
    serialization time.
    """

    name: str
    shape: tuple[int, ...]
    format: str
    global_scale: float | None
    block_scales: np.ndarray  # uint8 raw scale bytes
    codes: np.ndarray  # uint8, one code per padded element
    block_size: int = field(default=0)

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        if not self.block_size:
            self.block_size = DEFAULT_BLOCK_SIZE[self.format]
        self.block_scales = np.ascontiguousarray(self.block_scales, dtype=np.uint8)
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint8)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def num_blocks(self) -> int:
        return -(-self.numel // self.block_size)

    def scale_values(self) -> np.ndarray:
        return scale_format(self.format).decode(self.block_scales)

    def validate(self) -> None:
        if self.format not in FORMATS:
            raise ValueError(f"unknown format {self.format!r}")
        if self.block_scales.shape != (self.num_blocks,):
            raise ValueError("block scale count does not match the tensor shape")
        if self.codes.shape != (self.num_blocks * self.block_size,):
            raise ValueError("code count does not match the padded tensor size")
        if np.any(self.codes > 15) or np.any(self.codes == 0x8):
            raise ValueError("invalid E2M1 code")
        if np.any(self.codes[self.numel :]):
            raise ValueError("padding codes must be zero")
        self.scale_values()
        if self.format == "nvfp4":
            a = self.global_scale
            if a is None or not (math.isfinite(a) and a > 0) or float(np.float32(a)) != a:
                raise ValueError("global scale must be a positive finite float32")
        elif self.global_scale is not None:
            raise ValueError("mxfp4 tensors carry no global scale")

    def payload_nbytes(self) -> int:
        return (self.numel + 1) // 2 + self.block_scales.size + (4 if self.format == "nvfp4" else 0)

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.format == other.format
            and self.block_size == other.block_size
            and self.global_scale == other.global_scale
            and np.array_equal(self.block_scales, other.block_scales)
            and np.array_equal(self.codes, other.codes)
        )


def to_blocks(tensor, block_size: int) -> np.ndarray:
    """Flatten row-major, zero-pad the tail and reshape to ``(num_blocks, block_size)``."""
    flat = np.asarray(tensor, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ValueError("empty tensor")
    if not np.all(np.isfinite(flat)):
        raise ValueError("non-finite input")
    nb = -(-flat.size // block_size)
    out = np.zeros(nb * block_size)
    out[: flat.size] = flat
    return out.reshape(nb, block_size)


def float32_scale(x: float) -> float:
    """Round a positive global scale to float32, never below the exact value."""
    a = np.float32(x)
    if float(a) < x:
        a = np.nextafter(a, np.float32(np.inf))
    return float(max(a, np.finfo(np.float32).smallest_subnormal))


def init_scales_nvfp4(tensor, block_size: int = 16) -> tuple[float, np.ndarray]:
    """Max-based NVFP4 scales: ``alpha = max|X| / (6 * 448)`` and E4M3 block scales.

    Returns ``alpha`` (float32-representable) and the per-block scale values.
    All-zero blocks get the smallest normal E4M3 scale; an all-zero tensor
    gets ``alpha = 1``.  A block scale that rounded down far enough to push
    the block maximum past 6 is bumped to the next E4M3 value.
    """
    blocks = to_blocks(tensor, block_size)
    bmax = np.max(np.abs(blocks), axis=1)
    amax = float(np.max(bmax))
    if amax == 0.0:
        return 1.0, np.full(len(bmax), E4M3_MIN_NORMAL)
    alpha = float32_scale(amax / (E2M1_MAX * E4M3_MAX))
    delta = np.asarray(codecs.round_e4m3(bmax / (alpha * E2M1_MAX)), dtype=np.float64)
    delta = np.maximum(delta, E4M3_MIN_SUBNORMAL)
    over = (bmax / (alpha * delta) > E2M1_MAX) & (delta < E4M3_MAX)
    delta = np.where(over, E4M3_SCALES.next_up(delta), delta)
    delta = np.where(bmax == 0.0, E4M3_MIN_NORMAL, delta)
    return alpha, delta


def init_scales_mxfp4(tensor, block_size: int = 32) -> np.ndarray:
    """Power-of-two block scales: floor to a power of two, bumped once if the block max would exceed 6."""
    blocks = to_blocks(tensor, block_size)
    bmax = np.max(np.abs(blocks), axis=1)
    delta = np.empty(len(bmax))
    for i, m in enumerate(bmax):
        if m == 0.0:
            delta[i] = E8M0_SCALES.zero_block_scale
            continue
        e = codecs.quantize_e8m0(m / E2M1_MAX)
        if m / math.ldexp(1.0, e) > E2M1_MAX and e < codecs.E8M0_MAX_EXP:
            e += 1
        delta[i] = math.ldexp(1.0, e)
    return delta


def init_scales(tensor, fmt: str, block_size: int) -> tuple[float, np.ndarray]:
    if fmt == "nvfp4":
        return init_scales_nvfp4(tensor, block_size)
    return 1.0, init_scales_mxfp4(tensor, block_size)


def _check_scales(*scales) -> None:
    for s in scales:
        s = np.asarray(s, dtype=np.float64)
        if not (np.all(np.isfinite(s)) and np.all(s > 0)):
            raise ValueError("scales must be positive and finite")


def assign(blocks: np.ndarray, alpha: float, delta_q) -> np.ndarray:
    """Decoded FP4 assignments ``round_fp4(W / (alpha * delta_q))``; an array ``delta_q`` is per block."""
    scale = alpha * np.asarray(delta_q, dtype=np.float64)
    if scale.ndim:
        scale = scale[..., None]
    return codecs.piecewise_round(blocks / scale)


def reconstruct(q: np.ndarray, alpha: float, delta_d) -> np.ndarray:
    scale = alpha * np.asarray(delta_d, dtype=np.float64)
    if scale.ndim:
        scale = scale[..., None]
    return q * scale


def sse(blocks: np.ndarray, recon: np.ndarray) -> np.ndarray:
    """Per-block sum of squared errors over the last axis."""
    d = blocks - recon
    return np.sum(d * d, axis=-1)


def quantize_block(block, alpha: float, delta_q: float) -> np.ndarray:
    """E2M1 codes for ``block / (alpha * delta_q)``."""
    _check_scales(alpha, delta_q)
    block = np.asarray(block, dtype=np.float64)
    return np.asarray(codecs.quantize_e2m1(block / (alpha * delta_q)), dtype=np.uint8)


def dequantize_block(codes, alpha: float, delta_d: float) -> np.ndarray:
    _check_scales(alpha, delta_d)
    return np.asarray(codecs.decode_e2m1(codes), dtype=np.float64) * (alpha * delta_d)


def block_loss(block, alpha: float, delta_q: float, delta_d: float) -> float:
    """Squared reconstruction error of one block with decoupled quantize/dequantize scales."""
    _check_scales(alpha, delta_q, delta_d)
    block = np.asarray(block, dtype=np.float64)
    q = assign(block, alpha, delta_q)
    return float(sse(block, reconstruct(q, alpha, delta_d)))


def pack_tensor(name: str, shape, fmt: str, block_size: int, alpha: float, delta_d, q) -> QuantizedTensor:
    """Build the artifact from decoded assignments and dequantization scales."""
    sf = scale_format(fmt)
    return QuantizedTensor(
        name=name,
        shape=tuple(shape),
        format=fmt,
        global_scale=float(alpha) if fmt == "nvfp4" else None,
        block_scales=sf.encode(delta_d),
        codes=codecs._encode_e2m1_values(np.asarray(q).reshape(-1)),
        block_size=block_size,
    )


def quantize_tensor_baseline(tensor, config: QuantConfig, name: str = "") -> QuantizedTensor:
    """Standard max-based quantization with one shared scale per block."""
    tensor = np.asarray(tensor, dtype=np.float64)
    blocks = to_blocks(tensor, config.block_size)
    alpha, delta = init_scales(tensor, config.format, config.block_size)
    q = assign(blocks, alpha, delta)
    return pack_tensor(name, tensor.shape, config.format, config.block_size, alpha, delta, q)


def reconstruct_tensor(qt: QuantizedTensor) -> np.ndarray:
    """Dequantize every block, drop the padding and restore the original shape."""
    qt.validate()
    alpha = 1.0 if qt.global_scale is None else qt.global_scale
    q = np.asarray(codecs.decode_e2m1(qt.codes), dtype=np.float64).reshape(qt.num_blocks, qt.block_size)
    recon = reconstruct(q, alpha, qt.scale_values())
    return recon.reshape(-1)[: qt.numel].reshape(qt.shape)


def mse(tensor, qt: QuantizedTensor) -> float:
    tensor = np.asarray(tensor, dtype=np.float64)
    d = tensor.reshape(-1) - reconstruct_tensor(qt).reshape(-1)
    return float(np.mean(d * d))
