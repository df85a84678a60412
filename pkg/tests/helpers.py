"""Small utilities shared by the test modules."""

import numpy as np

from paramdelta.checkpoint import read_tensor, write_checkpoint
from paramdelta.dtypes import DType


def write_values(path, values: dict, dtype=DType.F32, metadata=None):
    """Write a checkpoint from a name -> array-like mapping."""
    values = {k: np.asarray(v, dtype=np.float32) for k, v in sorted(values.items())}
    return write_checkpoint(path, {k: v.shape for k, v in values.items()}, values.items(), dtype, metadata)


def values_of(ck):
    return {n: read_tensor(ck, n)[0] for n in ck.names()}


def bits_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[n].view(np.uint32), b[n].view(np.uint32)) for n in a)


def max_ulp_error(got, want, *scales):
    """Largest |got - want| in units of float32 spacing at the largest given magnitude."""
    mag = np.maximum.reduce([np.abs(np.asarray(s, dtype=np.float64)) for s in scales])
    spacing = np.spacing(mag.astype(np.float32)).astype(np.float64)
    spacing = np.maximum(spacing, np.finfo(np.float32).smallest_subnormal)
    return float(np.max(np.abs(got.astype(np.float64) - want.astype(np.float64)) / spacing, initial=0.0))


def difference_fits_f32(post, base):
    """Elementwise: is the exact value of post - base representable in float32?

    The float64 difference is checked for exactness with the TwoSum error
    term (it rounds when the exponents are more than ~50 apart), then for
    being a float32 value.
    """
    p, b = np.asarray(post, np.float64), -np.asarray(base, np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        s = p + b
        bb = s - p
        err = (p - (s - bb)) + (b - bb)
        return (err == 0) & (s.astype(np.float32).astype(np.float64) == s)
