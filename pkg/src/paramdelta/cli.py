"""``paramdelta`` command-line entry point.

Exit status: 0 on success, 1 when an operation fails (stderr carries a
single line ``error: <ErrorClass>: <message>``), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .analysis import DEFAULT_BINS, ClassificationRules, cosine_map, norm_map
from .checkpoint import open_checkpoint, validate_homologous
from .combine import MissingPolicy, OutDTypePolicy, apply_delta, extract_delta, fuse
from .dtypes import DType
from .errors import NotHomologous, ParamDeltaError
from .generate import GenSpec, PlantSpec, generate
from .reduction import default_threads
from .transfer import FitMode, ScoreTable, execute_sweep, fit_gamma, plan_sweep, transfer_pairs

log = logging.getLogger("paramdelta")

POLICIES = {
    "strict": MissingPolicy.STRICT,
    "intersect": MissingPolicy.INTERSECT,
    "anchor": MissingPolicy.ANCHOR_PASSTHROUGH,
}


class UsageError(Exception):
    pass


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _rules(args) -> ClassificationRules | None:
    return ClassificationRules.from_file(args.rules) if args.rules else None


def cmd_gen(args) -> int:
    plant = None
    if args.plant:
        try:
            text = Path(args.plant).read_text(encoding="utf-8")
        except OSError:
            text = args.plant  # inline JSON
        try:
            plant = PlantSpec.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise UsageError(f"--plant is neither a readable file nor JSON: {exc}") from None
    spec = GenSpec(
        seed=args.seed,
        layers=args.layers,
        hidden_dim=args.hidden,
        ffn_dim=args.ffn,
        vocab_size=args.vocab,
        dtype=DType.parse(args.dtype),
        plant=plant,
    )
    ckpt = generate(spec, args.out)
    print(f"wrote {ckpt.path}: {len(ckpt)} tensors, {spec.dtype.value}")
    return 0


def cmd_diff(args) -> int:
    post, base = open_checkpoint(args.post), open_checkpoint(args.base)
    out = extract_delta(post, base, args.out, threads=args.threads)
    print(f"wrote {out.path}: delta of {len(out)} tensors")
    return 0


def cmd_apply(args) -> int:
    anchor, delta = open_checkpoint(args.anchor), open_checkpoint(args.delta)
    out = apply_delta(
        anchor,
        delta,
        args.alpha,
        args.out,
        policy=POLICIES[args.policy],
        out_dtype_policy=OutDTypePolicy.FORCE_F32 if args.force_f32 else OutDTypePolicy.MATCH_ANCHOR,
        scenario=args.scenario,
        threads=args.threads,
    )
    print(f"wrote {out.path}: anchor + {args.alpha!r} * delta over {len(out)} tensors")
    return 0


def _parse_coeffs(items: Sequence[str], deltas: Sequence[str]) -> list[float]:
    coeffs = [1.0] * len(deltas)
    assigned: set[int] = set()
    for item in items:
        name, sep, raw = item.rpartition("=")
        if not sep or not name:
            raise UsageError(f"--coeff expects NAME=VALUE, got {item!r}")
        try:
            value = float(raw)
        except ValueError:
            raise UsageError(f"--coeff {item!r}: {raw!r} is not a number") from None
        matches = [i for i, d in enumerate(deltas) if d == name]
        if not matches:
            matches = [i for i, d in enumerate(deltas) if os.path.basename(d) == name]
        if not matches:
            matches = [i for i, d in enumerate(deltas) if Path(d).stem == name]
        if len(matches) != 1:
            raise UsageError(f"--coeff {item!r} matches {len(matches)} deltas")
        if matches[0] in assigned:
            raise UsageError(f"--coeff given twice for {deltas[matches[0]]!r}")
        assigned.add(matches[0])
        coeffs[matches[0]] = value
    return coeffs


def cmd_fuse(args) -> int:
    coeffs = _parse_coeffs(args.coeff or [], args.deltas)
    anchor = open_checkpoint(args.anchor)
    deltas = [(open_checkpoint(p), c) for p, c in zip(args.deltas, coeffs)]
    out = fuse(
        anchor,
        deltas,
        args.out,
        policy=POLICIES[args.policy],
        out_dtype_policy=OutDTypePolicy.FORCE_F32 if args.force_f32 else OutDTypePolicy.MATCH_ANCHOR,
        scenario=args.scenario,
        threads=args.threads,
    )
    print(f"wrote {out.path}: anchor + {len(deltas)} deltas over {len(out)} tensors")
    return 0


def cmd_cosine(args) -> int:
    a, b = open_checkpoint(args.a), open_checkpoint(args.b)
    report = cosine_map(a, b, _rules(args), bins=args.bins, threads=args.threads)
    _emit(report.to_json(), args.out)
    return 0


def cmd_norms(args) -> int:
    delta = open_checkpoint(args.delta)
    report = norm_map(delta, _rules(args), bins=args.bins, threads=args.threads)
    _emit(report.to_json(), args.out)
    return 0


def cmd_gamma(args) -> int:
    table = ScoreTable.from_csv(args.scores)
    pairs, skipped = transfer_pairs(table, args.base_i, args.post_j, args.base_j, args.real)
    mode = FitMode.THROUGH_ORIGIN if args.mode == "origin" else FitMode.WITH_INTERCEPT
    result = fit_gamma(pairs, mode)
    result.skipped = skipped
    _emit(result.to_json(), args.out)
    if args.out:
        print(f"gamma={result.gamma!r} r2={result.r_squared!r} n={result.n_points}")
    return 0


def _parse_alphas(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--alphas must be comma-separated numbers, got {text!r}") from None


def cmd_sweep(args) -> int:
    manifest = plan_sweep(args.anchor, args.delta, _parse_alphas(args.alphas), args.template)
    if args.execute:
        execute_sweep(manifest, threads=args.threads, policy=POLICIES[args.policy])
    _emit(manifest.to_json(), args.out)
    return 0


def cmd_validate(args) -> int:
    report = validate_homologous(open_checkpoint(args.a), open_checkpoint(args.b))
    _emit(json.dumps(report.to_dict(), indent=1) + "\n", args.out)
    if not report.homologous:
        raise NotHomologous(
            f"{len(report.only_in_a)} only in {args.a}, {len(report.only_in_b)} only in {args.b}, "
            f"{len(report.shape_mismatches)} shape mismatches"
        )
    return 0


def cmd_inspect(args) -> int:
    ckpt = open_checkpoint(args.checkpoint)
    doc = {
        "schema": "paramdelta.inspect/1",
        "path": ckpt.path,
        "kind": ckpt.kind.value,
        "metadata": ckpt.metadata or {},
        "tensors": [
            {"name": m.name, "dtype": m.dtype.value, "shape": list(m.shape), "numel": m.numel}
            for m in (ckpt.manifest[n] for n in ckpt.names())
        ],
        "total_bytes": sum(m.nbytes for m in ckpt.manifest.values()),
    }
    _emit(json.dumps(doc, indent=1) + "\n", args.out)
    return 0


def _positive_int(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if n < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=None, help="worker threads (default: $PARAMDELTA_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="paramdelta", description="Checkpoint arithmetic with parameter deltas.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic decoder checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--ffn", type=int, default=64)
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--dtype", choices=["f32", "f16", "bf16", "F32", "F16", "BF16"], default="bf16")
    p.add_argument("--plant", help="perturbation description: JSON file or inline JSON")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("diff", parents=[common], help="delta = post - base")
    p.add_argument("post")
    p.add_argument("base")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_diff)

    for name, helptext in (("apply", "anchor + alpha * delta"), ("fuse", "anchor + sum of weighted deltas")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("anchor")
        if name == "apply":
            p.add_argument("delta")
            p.add_argument("--alpha", type=float, default=1.0)
            p.set_defaults(func=cmd_apply)
        else:
            p.add_argument("deltas", nargs="+")
            p.add_argument("--coeff", action="append", metavar="NAME=VALUE", help="coefficient for one delta (default 1)")
            p.set_defaults(func=cmd_fuse)
        p.add_argument("--policy", choices=sorted(POLICIES), default="strict")
        p.add_argument("--scenario", type=int, choices=[1, 2, 3, 4], help="recorded in provenance only")
        p.add_argument("--force-f32", action="store_true", help="store the result as float32")
        p.add_argument("-o", "--out", required=True)

    for name, func in (("cosine", cmd_cosine), ("norms", cmd_norms)):
        p = sub.add_parser(name, parents=[common], help=f"per-tensor {name} report")
        if name == "cosine":
            p.add_argument("a")
            p.add_argument("b")
        else:
            p.add_argument("delta")
        p.add_argument("--rules", help="JSON classification rules")
        p.add_argument("--bins", type=_positive_int, default=DEFAULT_BINS)
        p.add_argument("-o", "--out")
        p.set_defaults(func=func)

    p = sub.add_parser("gamma", parents=[common], help="transfer-efficiency regression")
    p.add_argument("scores")
    p.add_argument("--base-i", required=True)
    p.add_argument("--post-j", required=True)
    p.add_argument("--base-j", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--mode", choices=["origin", "intercept"], default="origin")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_gamma)

    p = sub.add_parser("sweep", parents=[common], help="plan (and optionally run) an alpha sweep")
    p.add_argument("anchor")
    p.add_argument("delta")
    p.add_argument("--alphas", required=True, help="comma-separated scales")
    p.add_argument("--template", required=True, help="output path pattern with {alpha} and/or {index}")
    p.add_argument("--execute", action="store_true")
    p.add_argument("--policy", choices=sorted(POLICIES), default="strict")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", parents=[common], help="check two checkpoints are homologous")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("inspect", parents=[common], help="print a checkpoint's manifest")
    p.add_argument("checkpoint")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s"
    )
    try:
        if args.threads is None:
            args.threads = default_threads()
        return args.func(args)
    except ParamDeltaError as exc:
        message = " ".join(str(exc).split())
        print(f"error: {exc.error_class}: {message}", file=sys.stderr)
        return 1
    except (UsageError, ValueError) as exc:
        parser.error(str(exc))
    return 0  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
