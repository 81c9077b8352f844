"""Named-tensor checkpoints and their on-disk container.

Container layout::

    b"NTK1" | u64 LE header length | UTF-8 JSON header | payload

The header is ``{"version": 1, "tensors": [{"name", "shape", "offset",
"nbytes"}, ...], "metadata": {...}}`` with tensors in insertion order and
contiguous ascending offsets. The payload is row-major little-endian f32.
A tiny all-JSON fixture format (a file starting with ``{``) is also
accepted by :func:`load_checkpoint`.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    CorruptionError,
    DataLengthError,
    DuplicateNameError,
    EmptyNameError,
    FormatError,
    ShapeError,
)

MAGIC = b"NTK1"
VERSION = 1
_DTYPE = np.dtype("<f4")


@dataclass(frozen=True, eq=False)
class NamedTensor:
    name: str
    shape: tuple[int, ...]
    data: np.ndarray  # flat, little-endian float32, read-only

    def __post_init__(self) -> None:
        if not isinstance(self.name, str) or not self.name:
            raise EmptyNameError("tensor name must be a nonempty string")
        shape = tuple(int(d) for d in self.shape)
        if len(shape) == 0:
            raise ShapeError(f"tensor {self.name!r}: zero-rank shape; use [1] for scalars")
        if any(d < 1 for d in shape):
            raise ShapeError(f"tensor {self.name!r}: shape entries must be >= 1, got {list(shape)}")
        data = np.asarray(self.data)
        if data.dtype != _DTYPE:
            data = data.astype(_DTYPE)
        data = np.ascontiguousarray(data.reshape(-1))
        if data.size != math.prod(shape):
            raise DataLengthError(
                f"tensor {self.name!r}: data length {data.size} != product of shape {list(shape)}"
            )
        if data.flags.writeable:
            data = data.copy()
            data.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, name: str, array: np.ndarray) -> "NamedTensor":
        arr = np.asarray(array)
        shape = arr.shape if arr.ndim else (1,)
        return cls(name, shape, arr.astype(_DTYPE).reshape(-1))

    def array(self) -> np.ndarray:
        """Read-only float32 view with the tensor's shape."""
        return self.data.reshape(self.shape)

    @property
    def size(self) -> int:
        return self.data.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NamedTensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Insertion-ordered collection of uniquely named tensors."""

    tensors: Mapping[str, NamedTensor]
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for key, t in self.tensors.items():
            if not isinstance(t, NamedTensor):
                raise TypeError(f"entry {key!r} is not a NamedTensor")
            if key != t.name:
                raise DuplicateNameError(f"map key {key!r} does not match tensor name {t.name!r}")
        object.__setattr__(self, "tensors", dict(self.tensors))
        object.__setattr__(self, "metadata", {str(k): str(v) for k, v in self.metadata.items()})

    @classmethod
    def from_tensors(cls, tensors: Iterable[NamedTensor], metadata: Mapping[str, str] | None = None) -> "Checkpoint":
        out: dict[str, NamedTensor] = {}
        for t in tensors:
            if t.name in out:
                raise DuplicateNameError(f"duplicate tensor name {t.name!r}")
            out[t.name] = t
        return cls(out, dict(metadata or {}))

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> "Checkpoint":
        return cls.from_tensors((NamedTensor.from_array(k, v) for k, v in arrays.items()), metadata)

    def names(self) -> list[str]:
        return list(self.tensors)

    def __getitem__(self, name: str) -> NamedTensor:
        return self.tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            list(self.tensors) == list(other.tensors)
            and all(a == b for a, b in zip(self.tensors.values(), other.tensors.values()))
            and dict(self.metadata) == dict(other.metadata)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass
class DiffReport:
    max_abs: dict[str, float]
    mean_abs: dict[str, float]
    only_in_a: list[str]
    only_in_b: list[str]
    shape_mismatch: list[str] = field(default_factory=list)

    @property
    def one_side_only(self) -> list[str]:
        return self.only_in_a + self.only_in_b

    def identical(self) -> bool:
        return (
            not self.one_side_only
            and not self.shape_mismatch
            and all(v == 0.0 for v in self.max_abs.values())
        )


def _encode(ckpt: Checkpoint) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for t in ckpt:
        raw = t.data.astype(_DTYPE, copy=False).tobytes()
        entries.append({"name": t.name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"version": VERSION, "tensors": entries, "metadata": dict(sorted(ckpt.metadata.items()))}
    hbytes = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(hbytes)), hbytes, *chunks])


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Write ``ckpt`` to ``path``; identical checkpoints give identical bytes."""
    if not isinstance(ckpt, Checkpoint):
        raise TypeError("save_checkpoint expects a Checkpoint")
    # re-run validation so nothing invalid reaches the disk
    Checkpoint.from_tensors(ckpt.tensors.values(), ckpt.metadata)
    blob = _encode(ckpt)
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(blob)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write checkpoint {path}: {exc.strerror}", str(path)) from exc


def _decode_json_fixture(raw: bytes, path: Path) -> Checkpoint:
    try:
        doc = json.loads(raw.decode("utf-8"))
        tensors = [
            NamedTensor(e["name"], tuple(e["shape"]), np.asarray(e["data"], dtype=np.float64).astype(_DTYPE))
            for e in doc["tensors"]
        ]
        metadata = doc.get("metadata", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed JSON checkpoint fixture: {exc}") from exc
    return Checkpoint.from_tensors(tensors, metadata)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read checkpoint {path}: {exc.strerror}", str(path)) from exc

    if raw[:1] == b"{":
        return _decode_json_fixture(raw, path)
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise CorruptionError(f"{path}: truncated preamble: expected 12 bytes, got {len(raw)}")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    if 12 + hlen > len(raw):
        raise CorruptionError(f"{path}: header needs {12 + hlen} bytes, file has {len(raw)}")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    if not isinstance(header, dict) or header.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported container version {header.get('version') if isinstance(header, dict) else None!r}")

    payload = memoryview(raw)[12 + hlen :]
    tensors = []
    expected_offset = 0
    for entry in header.get("tensors", []):
        try:
            name, shape = entry["name"], tuple(entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed tensor entry {entry!r}") from exc
        if offset != expected_offset:
            raise FormatError(f"{path}: tensor {name!r} offset {offset} is not contiguous (expected {expected_offset})")
        if nbytes != 4 * math.prod(shape):
            raise FormatError(f"{path}: tensor {name!r} declares {nbytes} bytes for shape {list(shape)}")
        if offset + nbytes > len(payload):
            raise CorruptionError(
                f"{path}: tensor {name!r} needs payload bytes up to {offset + nbytes}, "
                f"payload has {len(payload)}"
            )
        data = np.frombuffer(payload[offset : offset + nbytes], dtype=_DTYPE)
        tensors.append(NamedTensor(name, shape, data))
        expected_offset = offset + nbytes
    if expected_offset != len(payload):
        raise CorruptionError(f"{path}: payload is {len(payload)} bytes, header accounts for {expected_offset}")
    return Checkpoint.from_tensors(tensors, header.get("metadata", {}))


def save_json_fixture(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    doc = {
        "version": VERSION,
        "tensors": [{"name": t.name, "shape": list(t.shape), "data": t.data.astype(float).tolist()} for t in ckpt],
        "metadata": dict(sorted(ckpt.metadata.items())),
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def checkpoint_diff(a: Checkpoint, b: Checkpoint) -> DiffReport:
    max_abs: dict[str, float] = {}
    mean_abs: dict[str, float] = {}
    mismatch = []
    for name, ta in a.tensors.items():
        tb = b.tensors.get(name)
        if tb is None:
            continue
        if ta.shape != tb.shape:
            mismatch.append(name)
            continue
        same_bits = ta.data.view(np.uint32) == tb.data.view(np.uint32)
        with np.errstate(invalid="ignore"):
            d = np.abs(ta.data.astype(np.float64) - tb.data.astype(np.float64))
        d[same_bits] = 0.0  # keeps inf == inf at zero
        bits_differ = not same_bits.all()
        m = float(d.max()) if d.size else 0.0
        # +0.0 vs -0.0 (or differing NaN payloads) must not read as identical
        if m == 0.0 and bits_differ:
            m = float(np.finfo(np.float32).tiny)
        max_abs[name] = m
        mean_abs[name] = float(d.mean()) if d.size else 0.0
    return DiffReport(
        max_abs=max_abs,
        mean_abs=mean_abs,
        only_in_a=[n for n in a.tensors if n not in b.tensors],
        only_in_b=[n for n in b.tensors if n not in a.tensors],
        shape_mismatch=mismatch,
    )
