"""Storage dtypes and their conversion to and from 32-bit working precision.

Upcasts from F16/BF16 are exact. Downcasts round to nearest, ties to even,
and collapse every NaN to one quiet pattern per dtype.
"""

from __future__ import annotations

import enum

import numpy as np

F16_CANONICAL_NAN = 0x7E00
BF16_CANONICAL_NAN = 0x7FC0


class DType(enum.Enum):
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"

    @property
    def width(self) -> int:
        return 4 if self is DType.F32 else 2

    @classmethod
    def parse(cls, text: str) -> "DType":
        try:
            return cls(text.upper())
        except ValueError:
            raise ValueError(f"unknown dtype {text!r}") from None


def bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.uint32) << np.uint32(16)).view(np.float32)


def f32_to_bf16_bits(values: np.ndarray) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=np.float32)
    bits = values.view(np.uint32)
    # round half to even: add 0x7FFF plus the lowest kept bit, then truncate
    lsb = (bits >> np.uint32(16)) & np.uint32(1)
    rounded = ((bits + np.uint32(0x7FFF) + lsb) >> np.uint32(16)).astype(np.uint16)
    nan = np.isnan(values)
    if nan.any():
        rounded[nan] = BF16_CANONICAL_NAN
    return rounded


def f16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    return bits.view(np.float16).astype(np.float32)


def f32_to_f16_bits(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float32)
    with np.errstate(over="ignore"):
        out = values.astype(np.float16).view(np.uint16)
    nan = np.isnan(values)
    if nan.any():
        out = out.copy()
        out[nan] = F16_CANONICAL_NAN
    return out


def decode(raw: bytes | bytearray | memoryview | np.ndarray, dtype: DType) -> np.ndarray:
    """Decode little-endian storage bytes into a flat float32 array."""
    buf = np.frombuffer(raw, dtype=np.uint8) if not isinstance(raw, np.ndarray) else raw.view(np.uint8)
    if dtype is DType.F32:
        return buf.view("<f4").astype(np.float32, copy=True)
    bits = buf.view("<u2")
    if dtype is DType.BF16:
        return bf16_bits_to_f32(bits)
    return f16_bits_to_f32(bits)


def encode(values: np.ndarray, dtype: DType) -> bytes:
    """Encode float32 working values as little-endian storage bytes."""
    values = np.ascontiguousarray(values, dtype=np.float32).reshape(-1)
    if dtype is DType.F32:
        return values.astype("<f4", copy=False).tobytes()
    if dtype is DType.BF16:
        return f32_to_bf16_bits(values).astype("<u2", copy=False).tobytes()
    return f32_to_f16_bits(values).astype("<u2", copy=False).tobytes()


def ulp32(values: np.ndarray) -> np.ndarray:
    """Spacing of float32 at each magnitude in ``values``."""
    mag = np.abs(np.asarray(values, dtype=np.float32))
    return np.spacing(mag).astype(np.float64)
