"""Deterministic miniature decoder checkpoints for tests and demos.

Values come from a counter-based Philox stream keyed by (seed, tensor name),
so each tensor's data is independent of generation order, and are turned
into floats with integer arithmetic and a single multiply. Identical specs
therefore give byte-identical files on every platform.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .analysis import LayerClass, classify_tensor
from .checkpoint import IO_CHUNK, KIND_KEY, Checkpoint, Kind, write_checkpoint
from . import dtypes as dt
from .dtypes import DType
from .errors import InvalidSpec

PLANT_SCHEMA = "paramdelta.plant/1"
GENERATOR_KEY = "paramdelta.generator"
WEIGHT_SCALE = 0.02
_SQRT3 = math.sqrt(3.0)


@dataclass
class PlantSpec:
    """A structured perturbation added on top of the generated weights.

    Each tensor receives ``scale * class_scales[class] * noise + offsets[name]``
    where ``noise`` is unit-variance and seeded by ``seed`` (independent of
    the base weights' seed).
    """

    seed: int = 1
    scale: float = 0.01
    class_scales: dict[LayerClass, float] = field(default_factory=dict)
    offsets: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "PlantSpec":
        try:
            scales = {LayerClass(k): float(v) for k, v in doc.get("class_scales", {}).items()}
            offsets = {str(k): float(v) for k, v in doc.get("offsets", {}).items()}
            return cls(int(doc.get("seed", 1)), float(doc.get("scale", 0.01)), scales, offsets)
        except (ValueError, TypeError, AttributeError) as exc:
            raise InvalidSpec(f"bad plant description: {exc}") from None

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "scale": self.scale,
            "class_scales": {k.value: v for k, v in self.class_scales.items()},
            "offsets": dict(sorted(self.offsets.items())),
        }

    def tensor_scale(self, name: str) -> float:
        klass, _ = classify_tensor(name)
        return self.scale * self.class_scales.get(klass, 1.0)


@dataclass
class GenSpec:
    seed: int = 0
    layers: int = 2
    hidden_dim: int = 32
    ffn_dim: int = 64
    vocab_size: int = 64
    dtype: DType = DType.BF16
    plant: PlantSpec | None = None

    def validate(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise InvalidSpec("seed must be an unsigned 64-bit integer")
        for field_name in ("layers", "hidden_dim", "ffn_dim", "vocab_size"):
            if getattr(self, field_name) < 1:
                raise InvalidSpec(f"{field_name} must be positive")
        if self.plant is not None:
            unknown = set(self.plant.offsets) - set(tensor_shapes(self))
            if unknown:
                raise InvalidSpec(f"plant offsets name unknown tensors: {sorted(unknown)}")
            values = [self.plant.scale, *self.plant.class_scales.values(), *self.plant.offsets.values()]
            if not all(math.isfinite(v) for v in values):
                raise InvalidSpec("plant values must be finite")


def tensor_shapes(spec: GenSpec) -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes of the miniature decoder, in lexicographic order."""
    h, f, v = spec.hidden_dim, spec.ffn_dim, spec.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "lm_head.weight": (v, h),
        "model.embed_tokens.weight": (v, h),
        "model.norm.weight": (h,),
    }
    for i in range(spec.layers):
        p = f"model.layers.{i}"
        shapes[f"{p}.input_layernorm.weight"] = (h,)
        shapes[f"{p}.post_attention_layernorm.weight"] = (h,)
        for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
            shapes[f"{p}.self_attn.{proj}.weight"] = (h, h)
        shapes[f"{p}.mlp.gate_proj.weight"] = (f, h)
        shapes[f"{p}.mlp.up_proj.weight"] = (f, h)
        shapes[f"{p}.mlp.down_proj.weight"] = (h, f)
    return dict(sorted(shapes.items()))


def _stream_key(seed: int, stream: str) -> int:
    digest = hashlib.sha256(f"{seed}\x00{stream}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def unit_noise(seed: int, stream: str, n: int, chunk: int = IO_CHUNK) -> Iterator[np.ndarray]:
    """Unit-variance uniform noise in float64, streamed in chunks.

    Each raw 64-bit draw keeps its top 24 bits ``k`` and maps to
    ``(2k + 1 - 2^24) / 2^24 * sqrt(3)``: symmetric around zero, exact in
    float64, no transcendental functions.
    """
    bitgen = np.random.Philox(key=_stream_key(seed, stream))
    done = 0
    while done < n:
        m = min(chunk, n - done)
        k = (bitgen.random_raw(m) >> np.uint64(40)).astype(np.int64)
        yield (2 * k + 1 - (1 << 24)).astype(np.float64) * (_SQRT3 / (1 << 24))
        done += m


def _stored(values: np.ndarray, dtype: DType) -> np.ndarray:
    """Round to the storage dtype and turn negative zeros into positive ones.

    A weight that underflows to zero has no meaningful sign, and a -0.0 in a
    post-trained fixture cannot be rebuilt as base + delta (x + -x is +0.0).
    """
    out = dt.decode(dt.encode(values.astype(np.float32), dtype), dtype)
    out += np.float32(0.0)
    return out


def _tensor_values(spec: GenSpec, name: str, numel: int) -> Iterator[np.ndarray]:
    klass, _ = classify_tensor(name)
    center = 1.0 if klass is LayerClass.NORM else 0.0
    base = unit_noise(spec.seed, name, numel)
    if spec.plant is None:
        for chunk in base:
            yield _stored(center + WEIGHT_SCALE * chunk, spec.dtype)
        return
    scale = spec.plant.tensor_scale(name)
    offset = spec.plant.offsets.get(name, 0.0)
    planted = unit_noise(spec.plant.seed, "plant\x00" + name, numel)
    for chunk, noise in zip(base, planted):
        yield _stored(center + WEIGHT_SCALE * chunk + (scale * noise + offset), spec.dtype)


def plant_truth(spec: GenSpec) -> dict[str, Any]:
    """Ground truth of a planted perturbation, as recorded next to the checkpoint."""
    assert spec.plant is not None
    tensors = {}
    for name in tensor_shapes(spec):
        klass, _ = classify_tensor(name)
        tensors[name] = {
            "class": klass.value,
            "scale": spec.plant.tensor_scale(name),
            "offset": spec.plant.offsets.get(name, 0.0),
        }
    return {"schema": PLANT_SCHEMA, "base_seed": spec.seed, "plant": spec.plant.to_dict(), "tensors": tensors}


def plant_path(out: str | os.PathLike) -> Path:
    return Path(os.fspath(out) + ".plant.json")


def generate(spec: GenSpec, out: str | os.PathLike) -> Checkpoint:
    """Write the checkpoint described by ``spec`` (and its plant record, if any)."""
    spec.validate()
    shapes = tensor_shapes(spec)
    desc = {
        "seed": spec.seed,
        "layers": spec.layers,
        "hidden_dim": spec.hidden_dim,
        "ffn_dim": spec.ffn_dim,
        "vocab_size": spec.vocab_size,
        "dtype": spec.dtype.value,
    }
    if spec.plant is not None:
        desc["plant"] = spec.plant.to_dict()
    meta = {
        KIND_KEY: (Kind.POST if spec.plant is not None else Kind.BASE).value,
        GENERATOR_KEY: json.dumps(desc, sort_keys=True, separators=(",", ":")),
    }

    def producer():
        for name, shape in shapes.items():
            yield name, _tensor_values(spec, name, math.prod(shape))

    ckpt = write_checkpoint(out, shapes, producer(), spec.dtype, meta)
    if spec.plant is not None:
        plant_path(out).write_text(json.dumps(plant_truth(spec), indent=1) + "\n", encoding="utf-8")
    return ckpt
