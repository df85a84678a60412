"""Delta-space diagnostics: per-tensor cosine similarity and norms.

Tensors are classified by name into layer classes (attention, feed-forward,
...) and each report carries per-class summaries and histograms. Reports
serialize to JSON under the ``paramdelta.report/1`` schema.
"""

from __future__ import annotations

import enum
import json
import math
import re
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .checkpoint import IO_CHUNK, Checkpoint
from .errors import EmptyInput, InvalidSpec, NoSharedTensors, ShapeConflict
from .reduction import chunk_partials, ordered_map, pairwise_sum

REPORT_SCHEMA = "paramdelta.report/1"
DEFAULT_BINS = 50


class LayerClass(enum.Enum):
    ATTENTION = "Attention"
    FEED_FORWARD = "FeedForward"
    EMBEDDING = "Embedding"
    NORM = "Norm"
    OUTPUT = "Output"
    OTHER = "Other"


class ReportKind(enum.Enum):
    COSINE_MAP = "CosineMap"
    NORM_MAP = "NormMap"


_LAYER_INDEX = re.compile(r"(?:^|\.)(?:layers|layer|h|blocks|block)\.(\d+)(?:\.|$)")
_ANY_INDEX = re.compile(r"(?:^|\.)(\d+)(?:\.|$)")


@dataclass
class ClassificationRules:
    """Ordered (regex, class) pairs; the first regex that matches wins."""

    rules: list[tuple[re.Pattern, LayerClass]]

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str | LayerClass]]) -> "ClassificationRules":
        compiled = []
        for pattern, klass in pairs:
            if not isinstance(klass, LayerClass):
                try:
                    klass = LayerClass(klass)
                except ValueError:
                    raise InvalidSpec(f"unknown layer class {klass!r}") from None
            try:
                compiled.append((re.compile(pattern), klass))
            except re.error as exc:
                raise InvalidSpec(f"bad pattern {pattern!r}: {exc}") from None
        return cls(compiled)

    @classmethod
    def from_file(cls, path: str | Path) -> "ClassificationRules":
        """Load rules from JSON: ``{"rules": [{"pattern": ..., "class": ...}, ...]}``."""
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
            pairs = [(r["pattern"], r["class"]) for r in doc["rules"]]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise InvalidSpec(f"cannot read rules file {path}: {exc}") from None
        return cls.from_pairs(pairs)

    def classify(self, name: str) -> LayerClass:
        for pattern, klass in self.rules:
            if pattern.search(name):
                return klass
        return LayerClass.OTHER


# Common decoder naming (q_proj / gate_proj style), plus the c_attn / c_fc and
# wq / w1 spellings used by other code bases.
# Norms and biases come before the projection rules so that
# "post_attention_layernorm" or "q_proj.bias" do not count as attention.
DEFAULT_RULES = ClassificationRules.from_pairs(
    [
        (r"(?:norm|^ln_|\.ln_\w*|layernorm)", LayerClass.NORM),
        (r"\.bias$", LayerClass.OTHER),
        (r"(?:embed_tokens|tok_embeddings|word_embeddings|\bwte\b|\bwpe\b|embeddings?\.weight)", LayerClass.EMBEDDING),
        (r"(?:^lm_head\b|\.lm_head\b|^output\.weight$|embed_out)", LayerClass.OUTPUT),
        (
            r"(?:\b[qkvo]_proj\b|self_attn|\battn\b|\battention\b|c_attn|c_proj_attn|\bwq\b|\bwk\b|\bwv\b|\bwo\b|query_key_value)",
            LayerClass.ATTENTION,
        ),
        (r"(?:gate_proj|up_proj|down_proj|\bmlp\b|feed_forward|\bffn\b|\bw[123]\b|c_fc)", LayerClass.FEED_FORWARD),
    ]
)


def layer_index(name: str) -> int | None:
    m = _LAYER_INDEX.search(name) or _ANY_INDEX.search(name)
    return int(m.group(1)) if m else None


def classify_tensor(name: str, rules: ClassificationRules | None = None) -> tuple[LayerClass, int | None]:
    """Layer class and (when the name carries one) layer number."""
    rules = rules or DEFAULT_RULES
    return rules.classify(name), layer_index(name)


@dataclass
class Histogram:
    edges: list[float]
    counts: list[int]

    def to_dict(self) -> dict[str, Any]:
        return {"edges": self.edges, "counts": self.counts}


def histogram(
    values: Sequence[float], bin_count: int = DEFAULT_BINS, range: tuple[float, float] | None = None
) -> Histogram:
    """Equal-width histogram; the last bin includes its right edge.

    Without ``range`` the bins span the data. A degenerate span (all values
    equal) is widened by machine epsilon on both sides. Values outside an
    explicit range are not counted.
    """
    if bin_count < 1:
        raise InvalidSpec("bin_count must be at least 1")
    x = np.asarray([v for v in values if v is not None and math.isfinite(v)], dtype=np.float64)
    if x.size == 0:
        raise EmptyInput("histogram of no defined values")
    if range is None:
        lo, hi = float(x.min()), float(x.max())
    else:
        lo, hi = float(range[0]), float(range[1])
        if not lo <= hi:
            raise InvalidSpec(f"histogram range ({lo}, {hi}) is inverted")
    if lo == hi:
        pad = np.finfo(np.float64).eps * max(1.0, abs(lo))
        lo, hi = lo - pad, hi + pad
    edges = np.linspace(lo, hi, bin_count + 1)
    inside = x[(x >= lo) & (x <= hi)]
    idx = np.searchsorted(edges, inside, side="right") - 1
    idx = np.clip(idx, 0, bin_count - 1)
    counts = np.bincount(idx, minlength=bin_count)
    return Histogram([float(e) for e in edges], [int(c) for c in counts])


@dataclass
class CosineRecord:
    tensor_name: str
    layer_class: LayerClass
    layer_index: int | None
    cosine: float | None  # None means undefined: one of the tensors is zero
    norm_a: float
    norm_b: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.tensor_name,
            "class": self.layer_class.value,
            "layer": self.layer_index,
            "cosine": self.cosine,
            "norm_a": self.norm_a,
            "norm_b": self.norm_b,
        }


@dataclass
class NormRecord:
    tensor_name: str
    layer_class: LayerClass
    layer_index: int | None
    norm: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.tensor_name,
            "class": self.layer_class.value,
            "layer": self.layer_index,
            "norm": self.norm,
        }


@dataclass
class ClassSummary:
    count: int
    defined: int
    mean: float | None
    median: float | None
    min: float | None
    max: float | None

    def to_dict(self) -> dict[str, Any]:
        return {
            "count": self.count,
            "defined": self.defined,
            "mean": self.mean,
            "median": self.median,
            "min": self.min,
            "max": self.max,
        }


@dataclass
class AnalysisReport:
    kind: ReportKind
    inputs: list[str]
    records: list[CosineRecord] | list[NormRecord]
    class_summary: dict[LayerClass, ClassSummary] = field(default_factory=dict)
    histograms: dict[LayerClass, Histogram] = field(default_factory=dict)

    def value_of(self, record) -> float | None:
        return record.cosine if self.kind is ReportKind.COSINE_MAP else record.norm

    def by_name(self) -> dict[str, CosineRecord | NormRecord]:
        return {r.tensor_name: r for r in self.records}

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": REPORT_SCHEMA,
            "kind": self.kind.value,
            "inputs": list(self.inputs),
            "records": [r.to_dict() for r in self.records],
            "class_summary": {k.value: s.to_dict() for k, s in self.class_summary.items()},
            "histograms": {k.value: h.to_dict() for k, h in self.histograms.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def _summarize(report: AnalysisReport, bins: int, hist_range: tuple[float, float] | None) -> None:
    grouped: dict[LayerClass, list] = {}
    for rec in report.records:
        grouped.setdefault(rec.layer_class, []).append(rec)
    for klass in LayerClass:  # fixed class order keeps reports stable
        recs = grouped.get(klass)
        if not recs:
            continue
        vals = [v for v in (report.value_of(r) for r in recs) if v is not None]
        if vals:
            summary = ClassSummary(
                len(recs), len(vals), math.fsum(vals) / len(vals), float(statistics.median(vals)), min(vals), max(vals)
            )
            report.histograms[klass] = histogram(vals, bins, hist_range)
        else:
            summary = ClassSummary(len(recs), 0, None, None, None, None)
        report.class_summary[klass] = summary


def _reduce(
    ckpts: Sequence[Checkpoint], name: str, numel: int, fn, nout: int, threads: int | None
) -> list[np.float32]:
    """Deterministic pairwise reductions of elementwise quantities.

    ``fn`` maps the chunks of each checkpoint to ``nout`` float32 arrays
    whose sums are wanted. Chunk partial sums depend only on absolute
    element positions, never on the thread split.
    """

    def block(start: int) -> list[np.ndarray]:
        stop = min(start + IO_CHUNK, numel)
        chunks = [ck.read_range(name, start, stop) for ck in ckpts]
        return [chunk_partials(q) for q in fn(*chunks)]

    partials: list[list[np.ndarray]] = [[] for _ in range(nout)]
    for parts in ordered_map(block, range(0, numel, IO_CHUNK), threads):
        for acc, part in zip(partials, parts):
            acc.append(part)
    return [pairwise_sum(np.concatenate(p)) if p else np.float32(0.0) for p in partials]


def tensor_norm(ckpt: Checkpoint, name: str, threads: int | None = None) -> float:
    (sq,) = _reduce([ckpt], name, ckpt.meta(name).numel, lambda x: (x * x,), 1, threads)
    return math.sqrt(float(sq))


def tensor_cosine(
    a: Checkpoint, b: Checkpoint, name: str, threads: int | None = None
) -> tuple[float | None, float, float]:
    """(cosine, norm_a, norm_b) of one tensor shared by two checkpoints."""
    numel = a.meta(name).numel
    dot, sa, sb = _reduce([a, b], name, numel, lambda x, y: (x * y, x * x, y * y), 3, threads)
    norm_a, norm_b = math.sqrt(float(sa)), math.sqrt(float(sb))
    if norm_a == 0.0 or norm_b == 0.0:
        return None, norm_a, norm_b
    cos = float(dot) / (norm_a * norm_b)
    return max(-1.0, min(1.0, cos)), norm_a, norm_b


def cosine_map(
    delta_a: Checkpoint,
    delta_b: Checkpoint,
    rules: ClassificationRules | None = None,
    *,
    bins: int = DEFAULT_BINS,
    threads: int | None = None,
) -> AnalysisReport:
    """Per-tensor cosine similarity between two deltas over their shared names.

    Histograms span the fixed range [-1, 1] so reports from different pairs
    are directly comparable.
    """
    shared = sorted(set(delta_a.manifest) & set(delta_b.manifest))
    if not shared:
        raise NoSharedTensors(f"{delta_a.identifier} and {delta_b.identifier} share no tensor names")
    for name in shared:
        sa, sb = delta_a.manifest[name].shape, delta_b.manifest[name].shape
        if sa != sb:
            raise ShapeConflict(f"{name!r}: shape {sa} vs {sb}")
    records = []
    for name in shared:
        klass, idx = classify_tensor(name, rules)
        cos, na, nb = tensor_cosine(delta_a, delta_b, name, threads)
        records.append(CosineRecord(name, klass, idx, cos, na, nb))
    report = AnalysisReport(ReportKind.COSINE_MAP, [delta_a.identifier, delta_b.identifier], records)
    _summarize(report, bins, (-1.0, 1.0))
    return report


def norm_map(
    delta: Checkpoint,
    rules: ClassificationRules | None = None,
    *,
    bins: int = DEFAULT_BINS,
    threads: int | None = None,
) -> AnalysisReport:
    """Per-tensor Euclidean norm of a delta, grouped by layer class."""
    records = []
    for name in delta.names():
        klass, idx = classify_tensor(name, rules)
        records.append(NormRecord(name, klass, idx, tensor_norm(delta, name, threads)))
    report = AnalysisReport(ReportKind.NORM_MAP, [delta.identifier], records)
    _summarize(report, bins, None)
    return report


def check_report(doc: dict[str, Any]) -> list[str]:
    """Conservation checks on a serialized report; returns a list of problems."""
    problems = []
    if doc.get("schema") != REPORT_SCHEMA:
        problems.append(f"schema is {doc.get('schema')!r}")
    key = "cosine" if doc.get("kind") == ReportKind.COSINE_MAP.value else "norm"
    total = sum(s["count"] for s in doc["class_summary"].values())
    if total != len(doc["records"]):
        problems.append(f"class counts sum to {total}, {len(doc['records'])} records")
    for klass, summary in doc["class_summary"].items():
        defined = sum(1 for r in doc["records"] if r["class"] == klass and r[key] is not None)
        if defined != summary["defined"]:
            problems.append(f"{klass}: {summary['defined']} defined in summary, {defined} in records")
        mass = sum(doc["histograms"].get(klass, {}).get("counts", []))
        if mass != defined:
            problems.append(f"{klass}: histogram holds {mass} of {defined} defined values")
    return problems
