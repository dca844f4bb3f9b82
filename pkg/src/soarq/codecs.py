"""Software codecs for the element and scale formats used by microscaling FP4.

E2M1 (FP4) elements, E4M3 (FP8) block scales and E8M0 power-of-two scales.
Every value of every format is exactly representable as a float64, so all
decoding happens in float64 and all rounding is done against explicit value
tables.  Rounding is round-to-nearest, ties-to-even (even code / even
mantissa bit), with saturation at the largest finite magnitude.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "E2M1_MAX",
    "E4M3_MAX",
    "E4M3_MIN_NORMAL",
    "E4M3_MIN_SUBNORMAL",
    "E8M0_MIN_EXP",
    "E8M0_MAX_EXP",
    "decode_e2m1",
    "e2m1_codebook",
    "quantize_e2m1",
    "piecewise_round",
    "decode_e4m3",
    "quantize_e4m3",
    "round_e4m3",
    "e4m3_values",
    "e4m3_neighbors",
    "decode_e8m0",
    "quantize_e8m0",
    "e8m0_values",
    "e8m0_neighbors",
]

E2M1_MAX = 6.0
E4M3_MAX = 448.0
E4M3_MIN_NORMAL = 2.0**-6
E4M3_MIN_SUBNORMAL = 2.0**-9
E8M0_MIN_EXP = -127
E8M0_MAX_EXP = 127


def _decode_e2m1_bits(bits: int) -> float:
    sign = -1.0 if bits & 0x8 else 1.0
    exp = (bits >> 1) & 0x3
    mant = bits & 0x1
    if exp == 0:
        return sign * mant * 0.5
    return sign * 2.0 ** (exp - 1) * (1.0 + mant / 2.0)


def _decode_e4m3_bits(bits: int) -> float:
    sign = -1.0 if bits & 0x80 else 1.0
    exp = (bits >> 3) & 0xF
    mant = bits & 0x7
    if exp == 0xF and mant == 0x7:
        raise ValueError(f"E4M3 NaN encoding 0x{bits:02x}")
    if exp == 0:
        return sign * mant * 2.0**-9
    return sign * 2.0 ** (exp - 7) * (1.0 + mant / 8.0)


# Lookup tables indexed by code.  Positive codes are monotone in value, which
# lets nearest-value rounding work on magnitudes with a sorted table.
_E2M1_TABLE = np.array([_decode_e2m1_bits(b) for b in range(16)])
_E2M1_POS = _E2M1_TABLE[:8].copy()
_E4M3_POS = np.array([_decode_e4m3_bits(b) for b in range(0x7F)])
_E4M3_TABLE = np.concatenate([_E4M3_POS, [np.nan], -_E4M3_POS, [np.nan]])
_E8M0_TABLE = np.array([math.ldexp(1.0, e) for e in range(E8M0_MIN_EXP, E8M0_MAX_EXP + 1)])


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")


def _nearest_index(mag: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Index of the nearest entry of a sorted non-negative table, ties to even index.

    Magnitudes above the last entry saturate to it.
    """
    mid = (table[:-1] + table[1:]) / 2.0
    lo = np.searchsorted(mid, mag, side="left")
    hi = np.searchsorted(mid, mag, side="right")
    # lo != hi exactly when mag sits on a midpoint; pick whichever index is even
    return np.where((lo != hi) & (lo % 2 == 1), hi, lo)


def _sign_bits(x: np.ndarray, nonzero: np.ndarray, bit: int) -> np.ndarray:
    return np.where((x < 0) & nonzero, bit, 0)


def _scalar_or_array(out: np.ndarray, like: np.ndarray):
    return out.item() if like.ndim == 0 else out


# ---------------------------------------------------------------------------
# E2M1


def decode_e2m1(codes):
    """Decode E2M1 code(s) to float64 value(s)."""
    codes = np.asarray(codes)
    if np.any((codes < 0) | (codes > 15)):
        raise ValueError("E2M1 code out of range")
    return _scalar_or_array(_E2M1_TABLE[codes.astype(np.intp)], codes)


def e2m1_codebook() -> list[tuple[int, float]]:
    """All encodable (code, value) pairs sorted by value.

    Negative zero (0b1000) is never produced by the encoder and is omitted.
    """
    pairs = [(code, float(_E2M1_TABLE[code])) for code in range(16) if code != 0x8]
    return sorted(pairs, key=lambda p: p[1])


def quantize_e2m1(x):
    """Round to the nearest E2M1 code, ties to even, saturating at +-6.

    Accepts a scalar (returns ``int``) or an array (returns ``uint8`` codes).
    """
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    idx = _nearest_index(np.abs(x), _E2M1_POS)
    codes = (idx | _sign_bits(x, idx != 0, 0x8)).astype(np.uint8)
    return _scalar_or_array(codes, x)


def piecewise_round(t):
    """Three-branch FP4 rounding of an already-scaled value.

    Half steps below 2, unit steps in [2, 4), steps of two in [4, 6], clipped
    to 6 beyond.  Returns the decoded FP4 value, not a code.  Vectorized;
    this is the fast path used by the optimizers.
    """
    t = np.asarray(t, dtype=np.float64)
    _check_finite(t)
    m = np.abs(t)
    r = np.where(m < 2.0, 0.5 * np.rint(2.0 * m), np.where(m < 4.0, np.rint(m), 2.0 * np.rint(0.5 * m)))
    r = np.minimum(r, E2M1_MAX)
    out = np.copysign(r, t)
    out = out + 0.0  # canonicalize -0.0
    return _scalar_or_array(out, t)


def _encode_e2m1_values(values: np.ndarray) -> np.ndarray:
    """Codes for values already on the E2M1 grid (no rounding performed)."""
    idx = np.searchsorted(_E2M1_POS, np.abs(values))
    if np.any(_E2M1_POS[np.minimum(idx, 7)] != np.abs(values)):
        raise ValueError("value not on the E2M1 grid")
    return (idx | _sign_bits(values, idx != 0, 0x8)).astype(np.uint8)


# ---------------------------------------------------------------------------
# E4M3


def decode_e4m3(bits):
    """Decode E4M3 byte(s); NaN encodings (0x7F, 0xFF) raise."""
    bits = np.asarray(bits)
    if np.any((bits < 0) | (bits > 0xFF)):
        raise ValueError("E4M3 byte out of range")
    if np.any((bits & 0x7F) == 0x7F):
        raise ValueError("E4M3 NaN encoding")
    return _scalar_or_array(_E4M3_TABLE[bits.astype(np.intp)], bits)


def quantize_e4m3(x):
    """Round to the nearest finite E4M3 encoding, ties to even, saturating at +-448."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    idx = _nearest_index(np.abs(x), _E4M3_POS)
    bits = (idx | _sign_bits(x, idx != 0, 0x80)).astype(np.uint8)
    return _scalar_or_array(bits, x)


def round_e4m3(x):
    """``decode_e4m3(quantize_e4m3(x))`` with -0 canonicalized to +0."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    v = _E4M3_POS[_nearest_index(np.abs(x), _E4M3_POS)]
    return _scalar_or_array(np.copysign(v, x) + 0.0, x)


def e4m3_values(positive_only: bool = False) -> np.ndarray:
    """Sorted finite E4M3 values (254 including both zeros, or the 126 positive ones)."""
    if positive_only:
        return _E4M3_POS[1:].copy()
    return np.concatenate([-_E4M3_POS[::-1], _E4M3_POS])


def _nearest_values(x: float, table: np.ndarray, count: int) -> list[float]:
    if not math.isfinite(x):
        raise ValueError("non-finite input")
    if x <= 0:
        raise ValueError("scale must be positive")
    if count < 1:
        raise ValueError("count must be >= 1")
    order = np.lexsort((table, np.abs(table - x)))
    return [float(v) for v in table[order[:count]]]


def e4m3_neighbors(x: float, count: int = 2) -> list[float]:
    """The ``count`` positive E4M3 values closest to ``x``, nearest first (ties: smaller value)."""
    return _nearest_values(x, _E4M3_POS[1:], count)


# ---------------------------------------------------------------------------
# E8M0


def decode_e8m0(exponent):
    exponent = np.asarray(exponent)
    if np.any((exponent < E8M0_MIN_EXP) | (exponent > E8M0_MAX_EXP)):
        raise ValueError("E8M0 exponent out of range")
    return _scalar_or_array(_E8M0_TABLE[(exponent - E8M0_MIN_EXP).astype(np.intp)], exponent)


def quantize_e8m0(x: float) -> int:
    """Exponent of the largest power of two not above ``x``, clamped to [-127, 127]."""
    if not math.isfinite(x):
        raise ValueError("non-finite input")
    if x <= 0:
        raise ValueError("scale must be positive")
    _, e = math.frexp(x)
    return min(max(e - 1, E8M0_MIN_EXP), E8M0_MAX_EXP)


def e8m0_values() -> np.ndarray:
    return _E8M0_TABLE.copy()


def e8m0_neighbors(x: float, count: int = 2) -> list[float]:
    """The ``count`` powers of two closest to ``x``."""
    return _nearest_values(x, _E8M0_TABLE, count)
