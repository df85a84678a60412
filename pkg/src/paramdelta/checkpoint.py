"""Single-file tensor checkpoints: parsing, streaming reads and writes, homology.

Layout: an unsigned 64-bit little-endian header length N, then N bytes of
UTF-8 JSON mapping tensor names to ``{"dtype", "shape", "data_offsets"}``
(plus an optional ``__metadata__`` string map), then raw little-endian
tensor data. Offsets are relative to the first byte after the header.
"""

from __future__ import annotations

import enum
import json
import math
import os
import struct
import tempfile
import weakref
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import dtypes as dt
from .dtypes import DType
from .errors import (
    DuplicateTensorName,
    InvalidSpec,
    IoFailure,
    MalformedHeader,
    OverlappingRegions,
    ShapeMismatch,
    TruncatedFile,
    UnknownTensor,
    UnsupportedDType,
)
from .memory import track

# Elements per streamed chunk. A multiple of the 4096-element reduction chunk
# so that chunk-level partial sums line up with absolute tensor positions.
IO_CHUNK = 1 << 16

METADATA_KEY = "__metadata__"
KIND_KEY = "paramdelta.kind"
MINUEND_KEY = "paramdelta.minuend"
SUBTRAHEND_KEY = "paramdelta.subtrahend"
RECIPE_KEY = "paramdelta.recipe"

# refuse absurd header lengths before attempting to allocate them
MAX_HEADER_BYTES = 100 * 1024 * 1024


class Kind(enum.Enum):
    BASE = "base"
    POST = "post"
    DELTA = "delta"
    FUSED = "fused"


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: DType
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.data_offsets[1] - self.data_offsets[0]

    def header_entry(self) -> dict[str, Any]:
        return {
            "dtype": self.dtype.value,
            "shape": list(self.shape),
            "data_offsets": list(self.data_offsets),
        }


class Checkpoint:
    """An opened checkpoint: parsed manifest plus a read-only file handle.

    Handles are immutable after opening; reads go through ``os.pread`` and
    are safe to issue from several threads at once.
    """

    def __init__(
        self,
        path: str | os.PathLike,
        manifest: dict[str, TensorMeta],
        metadata: dict[str, str] | None,
        data_start: int,
    ) -> None:
        self.path = os.fspath(path)
        self.manifest = manifest
        self.metadata = metadata
        self.data_start = data_start
        self._names = sorted(manifest)
        self._fd = os.open(self.path, os.O_RDONLY | getattr(os, "O_BINARY", 0))
        self._finalizer = weakref.finalize(self, os.close, self._fd)

    def __repr__(self) -> str:
        return f"Checkpoint({self.path!r}, kind={self.kind.value}, tensors={len(self.manifest)})"

    def __len__(self) -> int:
        return len(self.manifest)

    def __contains__(self, name: object) -> bool:
        return name in self.manifest

    def __enter__(self) -> "Checkpoint":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        self._finalizer()

    @property
    def kind(self) -> Kind:
        raw = (self.metadata or {}).get(KIND_KEY)
        try:
            return Kind(raw) if raw else Kind.BASE
        except ValueError:
            return Kind.BASE

    @property
    def identifier(self) -> str:
        return self.path

    def names(self) -> list[str]:
        """Tensor names in lexicographic order."""
        return list(self._names)

    def file_order(self) -> list[str]:
        return sorted(self.manifest, key=lambda n: (self.manifest[n].data_offsets, n))

    def meta(self, name: str) -> TensorMeta:
        try:
            return self.manifest[name]
        except KeyError:
            raise UnknownTensor(f"{name!r} not in {self.path}") from None

    def _pread(self, length: int, offset: int) -> bytes:
        try:
            if hasattr(os, "pread"):
                data = os.pread(self._fd, length, offset)
            else:  # pragma: no cover - platforms without pread
                with open(self.path, "rb") as f:
                    f.seek(offset)
                    data = f.read(length)
        except OSError as exc:
            raise IoFailure(f"{self.path}: {exc}") from exc
        if len(data) != length:
            raise TruncatedFile(f"{self.path}: short read at byte {offset}")
        return data

    def read_range(self, name: str, start: int, stop: int) -> np.ndarray:
        """Decode elements ``[start, stop)`` of the flattened tensor to float32."""
        meta = self.meta(name)
        stop = min(stop, meta.numel)
        if start >= stop:
            return np.zeros(0, dtype=np.float32)
        width = meta.dtype.width
        offset = self.data_start + meta.data_offsets[0] + start * width
        raw = self._pread((stop - start) * width, offset)
        return track(dt.decode(raw, meta.dtype))

    def iter_chunks(self, name: str, chunk: int = IO_CHUNK) -> Iterator[np.ndarray]:
        n = self.meta(name).numel
        for start in range(0, n, chunk):
            yield self.read_range(name, start, start + chunk)


class _Pairs(list):
    """A JSON object kept as its ordered key/value pairs, duplicates included."""


def _keep_pairs(pairs: list[tuple[str, Any]]) -> _Pairs:
    return _Pairs(pairs)


def _as_object(value: Any, what: str) -> dict[str, Any]:
    if not isinstance(value, _Pairs):
        raise MalformedHeader(f"{what} must be an object")
    keys = [k for k, _ in value]
    if len(set(keys)) != len(keys):
        raise MalformedHeader(f"duplicate key in {what}")
    return dict(value)


def _int_list(value: Any, what: str) -> list[int]:
    if not isinstance(value, list) or not all(
        isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in value
    ):
        raise MalformedHeader(f"{what} must be a list of nonnegative integers")
    return value


def _parse_header(text: str, path: str) -> tuple[dict[str, TensorMeta], dict[str, str] | None]:
    try:
        top = json.loads(text, object_pairs_hook=_keep_pairs)
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(top, _Pairs):
        raise MalformedHeader(f"{path}: header must be a JSON object")

    seen: set[str] = set()
    metadata: dict[str, str] | None = None
    manifest: dict[str, TensorMeta] = {}
    for name, value in top:
        if name in seen:
            if name == METADATA_KEY:
                raise MalformedHeader(f"{path}: duplicate {METADATA_KEY}")
            raise DuplicateTensorName(f"{path}: tensor {name!r} appears twice")
        seen.add(name)
        if name == METADATA_KEY:
            raw_meta = _as_object(value, METADATA_KEY)
            if not all(isinstance(v, str) for v in raw_meta.values()):
                raise MalformedHeader(f"{path}: {METADATA_KEY} values must be strings")
            metadata = raw_meta
            continue
        if not name:
            raise MalformedHeader(f"{path}: empty tensor name")
        entry = _as_object(value, f"entry {name!r}")
        missing = {"dtype", "shape", "data_offsets"} - set(entry)
        if missing:
            raise MalformedHeader(f"{path}: entry {name!r} lacks {sorted(missing)}")
        if not isinstance(entry["dtype"], str):
            raise MalformedHeader(f"{path}: entry {name!r} dtype must be a string")
        try:
            dtype = DType(entry["dtype"])
        except ValueError:
            raise UnsupportedDType(f"{path}: tensor {name!r} has unsupported dtype {entry['dtype']!r}") from None
        shape = tuple(_int_list(entry["shape"], f"shape of {name!r}"))
        offsets = _int_list(entry["data_offsets"], f"data_offsets of {name!r}")
        if len(offsets) != 2 or offsets[0] > offsets[1]:
            raise MalformedHeader(f"{path}: bad data_offsets for {name!r}")
        meta = TensorMeta(name, dtype, shape, (offsets[0], offsets[1]))
        if meta.nbytes != meta.numel * dtype.width:
            raise MalformedHeader(
                f"{path}: {name!r} spans {meta.nbytes} bytes, expected {meta.numel * dtype.width}"
            )
        manifest[name] = meta
    return manifest, metadata


def open_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Parse and validate a checkpoint header. No tensor data is read."""
    path = os.fspath(path)
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as f:
            prefix = f.read(8)
            if len(prefix) < 8:
                raise MalformedHeader(f"{path}: file shorter than the 8-byte length prefix")
            (n,) = struct.unpack("<Q", prefix)
            if n == 0 or n > MAX_HEADER_BYTES or 8 + n > size:
                raise MalformedHeader(f"{path}: header length {n} inconsistent with file size {size}")
            raw = f.read(n)
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedHeader(f"{path}: header is not UTF-8") from None
    manifest, metadata = _parse_header(text, path)

    regions = sorted(manifest.values(), key=lambda m: m.data_offsets)
    prev = None
    for meta in regions:
        if meta.nbytes == 0:
            continue
        if prev is not None and meta.data_offsets[0] < prev.data_offsets[1]:
            raise OverlappingRegions(f"{path}: {prev.name!r} and {meta.name!r} overlap")
        prev = meta
    data_len = size - 8 - n
    max_end = max((m.data_offsets[1] for m in regions), default=0)
    if max_end > data_len:
        raise TruncatedFile(f"{path}: data section has {data_len} bytes, manifest needs {max_end}")
    return Checkpoint(path, manifest, metadata, 8 + n)


def read_tensor(ckpt: Checkpoint, name: str) -> tuple[np.ndarray, DType]:
    """Whole tensor in float32 (row-major, original shape) and its stored dtype."""
    meta = ckpt.meta(name)
    out = track(np.empty(meta.numel, dtype=np.float32))
    for start in range(0, meta.numel, IO_CHUNK):
        chunk = ckpt.read_range(name, start, start + IO_CHUNK)
        out[start : start + chunk.size] = chunk
        del chunk
    return out.reshape(meta.shape), meta.dtype


def _chunks_of(name: str, data: Any, shape: tuple[int, ...]) -> Iterator[np.ndarray]:
    if isinstance(data, np.ndarray):
        if tuple(data.shape) != shape:
            raise ShapeMismatch(f"{name!r}: producer gave shape {tuple(data.shape)}, declared {shape}")
        flat = data.reshape(-1)
        for start in range(0, flat.size, IO_CHUNK):
            yield flat[start : start + IO_CHUNK]
        return
    yield from data


def write_checkpoint(
    path: str | os.PathLike,
    shapes: Mapping[str, Sequence[int]],
    producer: Iterable[tuple[str, Any]],
    out_dtypes: Mapping[str, DType] | DType,
    metadata: Mapping[str, str] | None = None,
) -> Checkpoint:
    """Stream tensors into a canonical checkpoint file and reopen it.

    ``shapes`` fixes the manifest order and every tensor's shape up front so
    the header can be written before any data. ``producer`` yields
    ``(name, data)`` in exactly that order, where ``data`` is either an array
    of the declared shape or an iterable of flat chunks. Values are rounded
    to each tensor's output dtype (nearest, ties to even).
    """
    path = os.fspath(path)
    order = list(shapes)
    metas: dict[str, TensorMeta] = {}
    cursor = 0
    for name in order:
        dtype = out_dtypes if isinstance(out_dtypes, DType) else out_dtypes[name]
        shape = tuple(int(s) for s in shapes[name])
        if any(s < 0 for s in shape):
            raise ShapeMismatch(f"{name!r}: negative dimension in {shape}")
        nbytes = math.prod(shape) * dtype.width
        metas[name] = TensorMeta(name, dtype, shape, (cursor, cursor + nbytes))
        cursor += nbytes

    header: dict[str, Any] = {}
    if metadata:
        header[METADATA_KEY] = {k: str(metadata[k]) for k in sorted(metadata)}
    for name in order:
        header[name] = metas[name].header_entry()
    blob = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    blob += b" " * (-len(blob) % 8)

    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(prefix=".paramdelta-", dir=directory)
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            expected = iter(order)
            for name, data in producer:
                want = next(expected, None)
                if name != want:
                    raise InvalidSpec(f"producer yielded {name!r}, expected {want!r}")
                meta = metas[name]
                written = 0
                for chunk in _chunks_of(name, data, meta.shape):
                    chunk = np.asarray(chunk, dtype=np.float32).reshape(-1)
                    written += chunk.size
                    if written > meta.numel:
                        break
                    encoded = track(np.frombuffer(dt.encode(chunk, meta.dtype), dtype=np.uint8))
                    f.write(encoded.data)
                    del encoded
                if written != meta.numel:
                    raise ShapeMismatch(
                        f"{name!r}: producer gave {written} elements, shape {meta.shape} needs {meta.numel}"
                    )
            leftover = next(expected, None)
            if leftover is not None:
                raise InvalidSpec(f"producer ended before {leftover!r}")
        os.replace(tmp, path)
    except OSError as exc:
        _unlink_quietly(tmp)
        raise IoFailure(f"{path}: {exc}") from exc
    except BaseException:
        _unlink_quietly(tmp)
        raise
    return open_checkpoint(path)


def _unlink_quietly(path: str) -> None:
    try:
        os.unlink(path)
    except OSError:
        pass


def copy_tensors(ckpt: Checkpoint) -> Iterator[tuple[str, Iterator[np.ndarray]]]:
    """Producer that streams every tensor of ``ckpt`` in lexicographic order."""
    for name in ckpt.names():
        yield name, ckpt.iter_chunks(name)


@dataclass
class CompatReport:
    homologous: bool
    shared: list[str] = field(default_factory=list)
    only_in_a: list[str] = field(default_factory=list)
    only_in_b: list[str] = field(default_factory=list)
    shape_mismatches: list[tuple[str, tuple[int, ...], tuple[int, ...]]] = field(default_factory=list)
    dtype_mismatches: list[tuple[str, DType, DType]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": "paramdelta.compat/1",
            "homologous": self.homologous,
            "shared": len(self.shared),
            "only_in_a": self.only_in_a,
            "only_in_b": self.only_in_b,
            "shape_mismatches": [
                {"name": n, "shape_a": list(sa), "shape_b": list(sb)} for n, sa, sb in self.shape_mismatches
            ],
            "dtype_mismatches": [
                {"name": n, "dtype_a": da.value, "dtype_b": db.value} for n, da, db in self.dtype_mismatches
            ],
        }


def validate_homologous(a: Checkpoint, b: Checkpoint) -> CompatReport:
    """Structural comparison of two manifests. Reads no tensor data.

    Homology requires identical name sets and shapes; differing dtypes are
    reported but allowed (a float32 delta is homologous with a bf16 base).
    """
    names_a, names_b = set(a.manifest), set(b.manifest)
    shared = sorted(names_a & names_b)
    shapes = [
        (n, a.manifest[n].shape, b.manifest[n].shape)
        for n in shared
        if a.manifest[n].shape != b.manifest[n].shape
    ]
    dtypes = [
        (n, a.manifest[n].dtype, b.manifest[n].dtype)
        for n in shared
        if a.manifest[n].dtype is not b.manifest[n].dtype
    ]
    only_a = sorted(names_a - names_b)
    only_b = sorted(names_b - names_a)
    return CompatReport(
        homologous=not (only_a or only_b or shapes),
        shared=shared,
        only_in_a=only_a,
        only_in_b=only_b,
        shape_mismatches=shapes,
        dtype_mismatches=dtypes,
    )


def largest_tensor_bytes(ckpt: Checkpoint, working: bool = True) -> int:
    """Size of the biggest tensor, in float32 working bytes or stored bytes."""
    if not ckpt.manifest:
        return 0
    if working:
        return max(m.numel for m in ckpt.manifest.values()) * 4
    return max(m.nbytes for m in ckpt.manifest.values())


def file_size(path: str | os.PathLike) -> int:
    return Path(path).stat().st_size
