"""Transfer-efficiency metrics and alpha-sweep planning.

The hypothetical score of a ParamDelta model built from base ``i`` and the
delta of family ``j`` is ``f(base_i) + f(post_j) - f(base_j)``. Regressing
real scores on hypothetical ones gives the transfer-efficiency slope gamma.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import os
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import (
    DegenerateInput,
    DuplicateAlpha,
    InvalidSpec,
    IoFailure,
    MalformedScoreTable,
    NoCompleteTriples,
    NonFiniteAlpha,
    SchemaMismatch,
)

GAMMA_SCHEMA = "paramdelta.gamma/1"
SWEEP_SCHEMA = "paramdelta.sweep/1"
SCORE_HEADER = ["model_id", "benchmark", "metric", "value"]


@dataclass(frozen=True)
class ScoreRow:
    model_id: str
    benchmark: str
    metric: str
    value: float


class ScoreTable:
    """Benchmark scores keyed by (model_id, benchmark, metric)."""

    def __init__(self, rows: Iterable[ScoreRow]) -> None:
        self.rows: list[ScoreRow] = []
        self._index: dict[tuple[str, str, str], float] = {}
        for row in rows:
            key = (row.model_id, row.benchmark, row.metric)
            if key in self._index:
                raise MalformedScoreTable(f"duplicate score for {key}")
            if not math.isfinite(row.value):
                raise MalformedScoreTable(f"non-finite score for {key}")
            self._index[key] = row.value
            self.rows.append(row)

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "ScoreTable":
        try:
            with open(path, newline="", encoding="utf-8") as f:
                reader = csv.reader(f)
                header = next(reader, None)
                if header is None or [h.strip() for h in header] != SCORE_HEADER:
                    raise MalformedScoreTable(f"{path}: header must be {','.join(SCORE_HEADER)}")
                rows = []
                for lineno, rec in enumerate(reader, start=2):
                    if not rec or all(not c.strip() for c in rec):
                        continue
                    if len(rec) != 4:
                        raise MalformedScoreTable(f"{path}:{lineno}: expected 4 fields, got {len(rec)}")
                    try:
                        value = float(rec[3])
                    except ValueError:
                        raise MalformedScoreTable(f"{path}:{lineno}: bad value {rec[3]!r}") from None
                    rows.append(ScoreRow(rec[0].strip(), rec[1].strip(), rec[2].strip(), value))
        except OSError as exc:
            raise IoFailure(f"{path}: {exc}") from exc
        return cls(rows)

    def get(self, model_id: str, benchmark: str, metric: str) -> float | None:
        return self._index.get((model_id, benchmark, metric))

    def keys_for(self, model_id: str) -> list[tuple[str, str]]:
        return [(r.benchmark, r.metric) for r in self.rows if r.model_id == model_id]

    def measures(self) -> list[tuple[str, str]]:
        """Every (benchmark, metric) pair, in first-appearance order."""
        seen: dict[tuple[str, str], None] = {}
        for r in self.rows:
            seen.setdefault((r.benchmark, r.metric), None)
        return list(seen)


def _dec(x: float) -> Decimal:
    # shortest round-trip decimal: a score typed as 61.6 is treated as 61.6
    return Decimal(repr(float(x)))


def hypothetical_value(f_base_i: float, f_post_j: float, f_base_j: float) -> float:
    """f(base_i) + f(post_j) - f(base_j), evaluated exactly on the decimal scores."""
    return float(_dec(f_base_i) + _dec(f_post_j) - _dec(f_base_j))


@dataclass(frozen=True)
class HypotheticalScore:
    benchmark: str
    metric: str
    value: float


def hypothetical_scores(
    table: ScoreTable, base_i: str, post_j: str, base_j: str
) -> tuple[list[HypotheticalScore], list[tuple[str, str]]]:
    """Hypothetical scores per (benchmark, metric), plus the pairs skipped.

    A pair is skipped when any of the three models lacks a score for it.
    """
    scores, skipped = [], []
    for bench, metric in table.measures():
        vals = [table.get(m, bench, metric) for m in (base_i, post_j, base_j)]
        if any(v is None for v in vals):
            skipped.append((bench, metric))
            continue
        scores.append(HypotheticalScore(bench, metric, hypothetical_value(*vals)))
    if not scores:
        raise NoCompleteTriples(f"no benchmark has scores for all of {base_i}, {post_j}, {base_j}")
    return scores, skipped


def transfer_pairs(
    table: ScoreTable, base_i: str, post_j: str, base_j: str, real: str
) -> tuple[list[tuple[float, float]], list[tuple[str, str]]]:
    """(hypothetical, real) points for the gamma regression, plus skipped pairs."""
    hyps, skipped = hypothetical_scores(table, base_i, post_j, base_j)
    pairs = []
    for h in hyps:
        r = table.get(real, h.benchmark, h.metric)
        if r is None:
            skipped.append((h.benchmark, h.metric))
        else:
            pairs.append((h.value, r))
    if not pairs:
        raise NoCompleteTriples(f"model {real} has no score matching any hypothetical score")
    return pairs, skipped


class FitMode(enum.Enum):
    THROUGH_ORIGIN = "origin"
    WITH_INTERCEPT = "intercept"


@dataclass
class RegressionResult:
    gamma: float
    intercept: float
    r_squared: float
    n_points: int
    residuals: list[float]
    fit_mode: FitMode
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": GAMMA_SCHEMA,
            "fit_mode": self.fit_mode.value,
            "gamma": self.gamma,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "n_points": self.n_points,
            "residuals": self.residuals,
            "skipped": [{"benchmark": b, "metric": m} for b, m in self.skipped],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n"


def fit_gamma(
    pairs: Sequence[tuple[float, float]], mode: FitMode = FitMode.THROUGH_ORIGIN
) -> RegressionResult:
    """Least-squares fit of real = gamma * hypothetical (+ intercept).

    R^2 is ``1 - SS_res / SS_tot`` with SS_tot taken about the mean of the real
    values in both modes, so the two modes report comparable numbers. When
    every real value is identical SS_tot is zero and R^2 is 1 for a perfect
    fit, 0 otherwise.
    """
    if len(pairs) < 2:
        raise DegenerateInput(f"need at least 2 points, got {len(pairs)}")
    xs = [float(x) for x, _ in pairs]
    ys = [float(y) for _, y in pairs]
    if not all(math.isfinite(v) for v in xs + ys):
        raise DegenerateInput("non-finite value among regression points")
    n = len(xs)

    if mode is FitMode.THROUGH_ORIGIN:
        sxx = math.fsum(x * x for x in xs)
        if sxx == 0.0:
            raise DegenerateInput("all hypothetical values are zero")
        gamma = math.fsum(x * y for x, y in zip(xs, ys)) / sxx
        intercept = 0.0
    else:
        x_mean = math.fsum(xs) / n
        y_mean = math.fsum(ys) / n
        sxx = math.fsum((x - x_mean) ** 2 for x in xs)
        if sxx == 0.0:
            raise DegenerateInput("all hypothetical values are identical")
        gamma = math.fsum((x - x_mean) * (y - y_mean) for x, y in zip(xs, ys)) / sxx
        intercept = y_mean - gamma * x_mean

    residuals = [y - (gamma * x + intercept) for x, y in zip(xs, ys)]
    ss_res = math.fsum(r * r for r in residuals)
    y_mean = math.fsum(ys) / n
    ss_tot = math.fsum((y - y_mean) ** 2 for y in ys)
    if ss_tot == 0.0:
        r_squared = 1.0 if ss_res == 0.0 else 0.0
    else:
        r_squared = 1.0 - ss_res / ss_tot
    return RegressionResult(gamma, intercept, r_squared, n, residuals, mode)


@dataclass
class SweepEntry:
    alpha: float
    path: str


@dataclass
class SweepManifest:
    anchor: str
    delta: str
    template: str
    entries: list[SweepEntry]

    @property
    def alphas(self) -> list[float]:
        return [e.alpha for e in self.entries]

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": SWEEP_SCHEMA,
            "anchor": self.anchor,
            "delta": self.delta,
            "template": self.template,
            "entries": [{"alpha": e.alpha, "path": e.path} for e in self.entries],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "SweepManifest":
        if doc.get("schema") != SWEEP_SCHEMA:
            raise SchemaMismatch(f"expected {SWEEP_SCHEMA}, got {doc.get('schema')!r}")
        entries = [SweepEntry(float(e["alpha"]), e["path"]) for e in doc["entries"]]
        return cls(doc["anchor"], doc["delta"], doc["template"], entries)


def format_alpha(alpha: float) -> str:
    return repr(float(alpha))


def plan_sweep(anchor: str, delta: str, alphas: Sequence[float], template: str) -> SweepManifest:
    """One output per alpha, sorted ascending.

    ``template`` is a ``str.format`` pattern; ``{alpha}`` expands to the
    shortest decimal form of the scale and ``{index}`` to its rank.
    """
    if not alphas:
        raise InvalidSpec("alpha list is empty")
    values = []
    for a in alphas:
        a = float(a)
        if not math.isfinite(a):
            raise NonFiniteAlpha(f"alpha {a!r} is not finite")
        values.append(a)
    if len(set(values)) != len(values):
        dupes = sorted({a for a in values if values.count(a) > 1})
        raise DuplicateAlpha(f"duplicate alphas: {dupes}")
    values.sort()
    entries = []
    for i, a in enumerate(values):
        try:
            path = template.format(alpha=format_alpha(a), index=i)
        except (KeyError, IndexError, ValueError) as exc:
            raise InvalidSpec(f"bad sweep template {template!r}: {exc}") from None
        entries.append(SweepEntry(a, path))
    if len({e.path for e in entries}) != len(entries):
        raise InvalidSpec(f"template {template!r} maps several alphas to the same path")
    return SweepManifest(str(anchor), str(delta), template, entries)


def execute_sweep(manifest: SweepManifest, *, threads: int | None = None, **apply_kwargs) -> list:
    """Run ``apply_delta`` once per alpha; returns the opened outputs."""
    from .checkpoint import open_checkpoint
    from .combine import apply_delta

    anchor = open_checkpoint(manifest.anchor)
    delta = open_checkpoint(manifest.delta)
    outputs = []
    for entry in manifest.entries:
        Path(entry.path).parent.mkdir(parents=True, exist_ok=True)
        outputs.append(apply_delta(anchor, delta, entry.alpha, entry.path, threads=threads, **apply_kwargs))
    return outputs
