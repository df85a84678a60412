"""Streaming linear combinations of homologous checkpoints.

Every ParamDelta recipe is one call to ``linear_combine``:

* ``extract_delta``: post - base
* ``apply_delta``:   anchor + alpha * delta
* ``fuse``:          anchor + sum_k c_k * delta_k

Tensors are processed one at a time in name order and each tensor is
streamed in fixed-size chunks, so memory stays bounded by a few chunks per
input regardless of checkpoint size. Within a chunk the terms are summed
with an error-free product/sum cascade in float32 (compensated dot product),
which is as accurate as a double-width sum rounded once.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .checkpoint import (
    IO_CHUNK,
    KIND_KEY,
    MINUEND_KEY,
    RECIPE_KEY,
    SUBTRAHEND_KEY,
    Checkpoint,
    Kind,
    validate_homologous,
    write_checkpoint,
)
from .dtypes import DType
from .errors import EmptyIntersection, InvalidSpec, NonFiniteCoefficient, NotHomologous, ShapeConflict
from .memory import track
from .reduction import ordered_map

log = logging.getLogger(__name__)

SCENARIO_KEY = "paramdelta.scenario"
RECIPE_SCHEMA = "paramdelta.recipe/1"


class MissingPolicy(enum.Enum):
    STRICT = "strict"
    INTERSECT = "intersect"
    ANCHOR_PASSTHROUGH = "anchor"


class OutDTypePolicy(enum.Enum):
    MATCH_ANCHOR = "match_anchor"
    FORCE_F32 = "force_f32"


@dataclass(frozen=True)
class CombineTerm:
    checkpoint: Checkpoint
    coefficient: float

    def __post_init__(self) -> None:
        try:
            value = float(self.coefficient)
        except (TypeError, ValueError):
            raise NonFiniteCoefficient(f"coefficient {self.coefficient!r} is not a number") from None
        if not math.isfinite(value):
            raise NonFiniteCoefficient(f"coefficient {value!r} for {self.checkpoint.identifier} is not finite")
        object.__setattr__(self, "coefficient", value)


@dataclass
class CombineSpec:
    terms: list[CombineTerm]
    missing_policy: MissingPolicy = MissingPolicy.STRICT
    anchor_index: int = 0
    out_dtype_policy: OutDTypePolicy = OutDTypePolicy.MATCH_ANCHOR

    def __post_init__(self) -> None:
        self.terms = list(self.terms)
        if not self.terms:
            raise InvalidSpec("a combination needs at least one term")
        if not 0 <= self.anchor_index < len(self.terms):
            raise InvalidSpec(f"anchor_index {self.anchor_index} out of range for {len(self.terms)} terms")
        if self.missing_policy is MissingPolicy.ANCHOR_PASSTHROUGH and self.anchor.coefficient != 1.0:
            raise InvalidSpec("anchor passthrough requires the anchor coefficient to be 1")

    @property
    def anchor(self) -> CombineTerm:
        return self.terms[self.anchor_index]

    def recipe(self) -> str:
        """Canonical text rendering of the spec, stored as provenance."""
        doc = {
            "schema": RECIPE_SCHEMA,
            "terms": [
                {"id": t.checkpoint.identifier, "coeff": format(t.coefficient, ".16e")} for t in self.terms
            ],
            "anchor": self.anchor_index,
            "missing": self.missing_policy.value,
            "out_dtype": self.out_dtype_policy.value,
        }
        return json.dumps(doc, separators=(",", ":"), sort_keys=True)


@dataclass
class OutputPlan:
    name: str
    shape: tuple[int, ...]
    dtype: DType
    contributors: list[int] = field(default_factory=list)


def plan_outputs(spec: CombineSpec) -> list[OutputPlan]:
    """Resolve the output manifest, contributing terms and dtypes per tensor."""
    ckpts = [t.checkpoint for t in spec.terms]
    anchor = spec.anchor.checkpoint

    shapes: dict[str, tuple[int, ...]] = {}
    owner: dict[str, str] = {}
    for ck in ckpts:
        for name, meta in ck.manifest.items():
            if name in shapes and shapes[name] != meta.shape:
                raise ShapeConflict(
                    f"{name!r}: shape {shapes[name]} in {owner[name]} vs {meta.shape} in {ck.identifier}"
                )
            shapes.setdefault(name, meta.shape)
            owner.setdefault(name, ck.identifier)

    policy = spec.missing_policy
    if policy is MissingPolicy.STRICT:
        for ck in ckpts:
            report = validate_homologous(anchor, ck)
            if not report.homologous:
                raise NotHomologous(
                    f"{anchor.identifier} vs {ck.identifier}: "
                    f"{len(report.only_in_a)} tensors only in the first, {len(report.only_in_b)} only in the second"
                )
        names = anchor.names()
    elif policy is MissingPolicy.INTERSECT:
        common = set(anchor.manifest)
        for ck in ckpts:
            common &= set(ck.manifest)
        names = sorted(common)
        skipped = len(shapes) - len(names)
        if skipped:
            log.warning("intersect policy: skipping %d tensors not present in every input", skipped)
        if not names:
            raise EmptyIntersection("no tensor name is shared by every input")
    else:
        names = anchor.names()
        extra = sorted(set(shapes) - set(anchor.manifest))
        if extra:
            log.warning("anchor passthrough: ignoring %d tensors absent from the anchor", len(extra))
        if not names:
            raise EmptyIntersection("anchor checkpoint has no tensors")

    plans = []
    for name in names:
        if spec.out_dtype_policy is OutDTypePolicy.FORCE_F32:
            dtype = DType.F32
        else:
            dtype = anchor.manifest[name].dtype
        contributors = [i for i, ck in enumerate(ckpts) if name in ck.manifest]
        plans.append(OutputPlan(name, shapes[name], dtype, contributors))
    return plans


_SPLITTER = np.float32(4097.0)  # 2**12 + 1 splits a float32 significand in halves


def _split(a):
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


def _two_prod(coeff: np.float32, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Product ``coeff * x`` and its exact rounding error (Dekker)."""
    p = coeff * x
    c_hi, c_lo = _split(coeff)
    x_hi, x_lo = _split(x)
    err = ((c_hi * x_hi - p) + c_hi * x_lo + c_lo * x_hi) + c_lo * x_lo
    return p, err


def _two_sum(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def compensated_combine(coefficients: Sequence[float], chunks: Sequence[np.ndarray]) -> np.ndarray:
    """sum_i coefficients[i] * chunks[i] in float32 with compensated accumulation.

    Products and partial sums are split into value and exact rounding error;
    the errors are accumulated separately and folded in once at the end.
    """
    n = chunks[0].size
    s = track(np.zeros(n, dtype=np.float32))
    comp = track(np.zeros(n, dtype=np.float32))
    with np.errstate(over="ignore", invalid="ignore"):
        for coeff, x in zip(coefficients, chunks):
            p, p_err = _two_prod(np.float32(coeff), x)
            s, s_err = _two_sum(s, p)
            comp += p_err + s_err
        out = s + comp
        bad = ~np.isfinite(out)
        if bad.any():
            # error terms are meaningless once a value overflows or is NaN
            naive = np.zeros(n, dtype=np.float32)
            for coeff, x in zip(coefficients, chunks):
                naive += np.float32(coeff) * x
            out[bad] = naive[bad]
    return track(out)


def _tensor_chunks(
    plan: OutputPlan, terms: Sequence[CombineTerm], threads: int | None
) -> Iterator[np.ndarray]:
    numel = math.prod(plan.shape)
    active = [terms[i] for i in plan.contributors]
    coeffs = [t.coefficient for t in active]

    def compute(start: int) -> np.ndarray:
        stop = min(start + IO_CHUNK, numel)
        chunks = [t.checkpoint.read_range(plan.name, start, stop) for t in active]
        return compensated_combine(coeffs, chunks)

    return ordered_map(compute, range(0, numel, IO_CHUNK), threads)


def linear_combine(
    spec: CombineSpec,
    out: str | os.PathLike,
    *,
    kind: Kind = Kind.FUSED,
    metadata: dict[str, str] | None = None,
    threads: int | None = None,
) -> Checkpoint:
    """Write ``sum_i coeff_i * term_i`` for every output tensor to ``out``.

    Args:
        spec: terms, missing-tensor policy, anchor and output dtype policy.
        out: destination file; written atomically.
        kind: checkpoint kind recorded in the output metadata.
        metadata: extra ``paramdelta.*`` entries to record.
        threads: worker threads per tensor; never changes the output bytes.
    """
    plans = plan_outputs(spec)
    anchor = spec.anchor.checkpoint

    meta = {k: v for k, v in (anchor.metadata or {}).items() if not k.startswith("paramdelta.")}
    meta[KIND_KEY] = kind.value
    meta[RECIPE_KEY] = spec.recipe()
    meta.update(metadata or {})

    def producer():
        for plan in plans:
            yield plan.name, _tensor_chunks(plan, spec.terms, threads)

    return write_checkpoint(
        out,
        {p.name: p.shape for p in plans},
        producer(),
        {p.name: p.dtype for p in plans},
        meta,
    )


def _scenario_meta(scenario: int | None) -> dict[str, str]:
    if scenario is None:
        return {}
    if scenario not in (1, 2, 3, 4):
        raise InvalidSpec(f"scenario must be 1-4, got {scenario}")
    return {SCENARIO_KEY: str(scenario)}


def extract_delta(
    post: Checkpoint, base: Checkpoint, out: str | os.PathLike, *, threads: int | None = None
) -> Checkpoint:
    """Parameter delta ``post - base``, always stored as float32."""
    spec = CombineSpec(
        [CombineTerm(post, 1.0), CombineTerm(base, -1.0)],
        MissingPolicy.STRICT,
        0,
        OutDTypePolicy.FORCE_F32,
    )
    extra = {MINUEND_KEY: post.identifier, SUBTRAHEND_KEY: base.identifier}
    return linear_combine(spec, out, kind=Kind.DELTA, metadata=extra, threads=threads)


def apply_delta(
    anchor: Checkpoint,
    delta: Checkpoint,
    alpha: float,
    out: str | os.PathLike,
    *,
    policy: MissingPolicy = MissingPolicy.STRICT,
    out_dtype_policy: OutDTypePolicy = OutDTypePolicy.MATCH_ANCHOR,
    scenario: int | None = None,
    threads: int | None = None,
) -> Checkpoint:
    """``anchor + alpha * delta``, stored in the anchor's dtypes by default."""
    spec = CombineSpec([CombineTerm(anchor, 1.0), CombineTerm(delta, alpha)], policy, 0, out_dtype_policy)
    return linear_combine(spec, out, kind=Kind.FUSED, metadata=_scenario_meta(scenario), threads=threads)


def fuse(
    anchor: Checkpoint,
    deltas: Sequence[tuple[Checkpoint, float]],
    out: str | os.PathLike,
    *,
    policy: MissingPolicy = MissingPolicy.STRICT,
    out_dtype_policy: OutDTypePolicy = OutDTypePolicy.MATCH_ANCHOR,
    scenario: int | None = None,
    threads: int | None = None,
) -> Checkpoint:
    """``anchor + sum_k c_k * delta_k``.

    The medical-transfer recipe with a general and a domain delta mixed half
    and half is ``fuse(base, [(general, 0.5), (domain, 0.5)], out)``.
    """
    if not deltas:
        raise InvalidSpec("fuse needs at least one delta")
    terms = [CombineTerm(anchor, 1.0)] + [CombineTerm(d, c) for d, c in deltas]
    spec = CombineSpec(terms, policy, 0, out_dtype_policy)
    return linear_combine(spec, out, kind=Kind.FUSED, metadata=_scenario_meta(scenario), threads=threads)
