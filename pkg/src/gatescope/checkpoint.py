"""Clean-room safetensors reader/writer.

Layout: 8-byte little-endian header length ``N``, ``N`` bytes of JSON
(``name -> {dtype, shape, data_offsets}`` plus an optional ``__metadata__``
string map), then the data region. Offsets are relative to the data region.

Reading parses only the header; tensor bytes are fetched on demand. A
sharded checkpoint (``*.safetensors.index.json`` with a ``weight_map``) is
opened as one merged record table.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Union

import numpy as np

from .errors import FormatError, PairingError, ShapeError
from .tensor import Dtype, narrow, widen

METADATA_KEY = "__metadata__"
# Refuse absurd header lengths before allocating.
MAX_HEADER_BYTES = 100 * 1024 * 1024


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: Dtype
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.data_offsets[1] - self.data_offsets[0]


@dataclass(frozen=True)
class TensorData:
    """A tensor ready to be written: storage dtype, shape and raw bytes."""

    dtype: Dtype
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self):
        want = math.prod(self.shape) * self.dtype.byte_size
        if len(self.data) != want:
            raise ShapeError(
                f"tensor of shape {list(self.shape)} {self.dtype.value} needs {want} bytes, got {len(self.data)}"
            )

    @classmethod
    def from_array(cls, array, dtype: Dtype = Dtype.F32) -> "TensorData":
        a = np.asarray(array, dtype=np.float64)
        return cls(dtype, tuple(int(s) for s in a.shape), narrow(a, dtype))


class Checkpoint:
    """Immutable record table plus a random-access byte source per tensor.

    Sources are either a file path (read lazily; each call opens its own
    handle, so concurrent loads are safe) or an in-memory buffer.
    """

    def __init__(self, records: Mapping[str, TensorRecord], sources: Mapping[str, tuple],
                 metadata: Mapping[str, str] | None = None, origin: str = "<memory>"):
        self._records = dict(sorted(records.items()))
        self._sources = dict(sources)
        self.metadata = dict(metadata or {})
        self.origin = origin

    @property
    def records(self) -> dict[str, TensorRecord]:
        return dict(self._records)

    def names(self) -> list[str]:
        return list(self._records)

    def __contains__(self, name: str) -> bool:
        return name in self._records

    def __len__(self) -> int:
        return len(self._records)

    def record(self, name: str) -> TensorRecord:
        try:
            return self._records[name]
        except KeyError:
            raise PairingError(f"tensor {name!r} not found in {self.origin}") from None

    def raw(self, name: str) -> bytes:
        rec = self.record(name)
        source, data_start = self._sources[name]
        begin, end = rec.data_offsets
        if isinstance(source, (bytes, bytearray, memoryview)):
            return bytes(source[data_start + begin:data_start + end])
        with open(source, "rb") as fh:
            fh.seek(data_start + begin)
            data = fh.read(end - begin)
        if len(data) != end - begin:
            raise FormatError(f"{source}: truncated data for {name!r}")
        return data

    def tensor(self, name: str) -> TensorData:
        rec = self.record(name)
        return TensorData(rec.dtype, rec.shape, self.raw(name))

    def load_array(self, name: str) -> np.ndarray:
        rec = self.record(name)
        flat = widen(self.raw(name), rec.dtype, 1, rec.numel)
        return flat.reshape(rec.shape)

    def load_matrix(self, name: str) -> np.ndarray:
        rec = self.record(name)
        if len(rec.shape) > 2:
            raise ShapeError(f"{name!r} has rank {len(rec.shape)}; only rank <= 2 loads as a matrix")
        if len(rec.shape) == 2:
            rows, cols = rec.shape
        else:
            rows, cols = 1, rec.numel
        return widen(self.raw(name), rec.dtype, rows, cols)

    def tensors(self) -> dict[str, TensorData]:
        return {name: self.tensor(name) for name in self._records}

    def to_bytes(self) -> bytes:
        return serialize(self.tensors(), self.metadata)

    def digest(self, names: Iterable[str] | None = None) -> str:
        """SHA-256 over (name, dtype, shape, bytes) of the given tensors (default: all)."""
        h = hashlib.sha256()
        for name in sorted(self._records if names is None else names):
            rec = self.record(name)
            h.update(f"{name}|{rec.dtype.value}|{list(rec.shape)}|".encode())
            h.update(self.raw(name))
        return h.hexdigest()

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, TensorData],
                     metadata: Mapping[str, str] | None = None) -> "Checkpoint":
        blob = bytearray()
        records, sources = {}, {}
        for name in sorted(tensors):
            t = tensors[name]
            records[name] = TensorRecord(name, t.dtype, tuple(t.shape), (len(blob), len(blob) + len(t.data)))
            blob += t.data
        buf = bytes(blob)
        for name in records:
            sources[name] = (buf, 0)
        return cls(records, sources, metadata)


def load_matrix(ckpt: Checkpoint, name: str) -> np.ndarray:
    return ckpt.load_matrix(name)


def _header_json(tensors: Mapping[str, TensorData], metadata: Mapping[str, str] | None) -> tuple[bytes, list[str]]:
    header: dict = {}
    if metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in sorted(metadata.items())}
    offset = 0
    order = sorted(tensors)
    for name in order:
        if name == METADATA_KEY:
            raise FormatError(f"tensor name {METADATA_KEY!r} is reserved")
        t = tensors[name]
        header[name] = {
            "dtype": t.dtype.value,
            "shape": [int(s) for s in t.shape],
            "data_offsets": [offset, offset + len(t.data)],
        }
        offset += len(t.data)
    text = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    # pad so the data region starts 8-byte aligned
    text += b" " * (-len(text) % 8)
    return text, order


def serialize(tensors: Mapping[str, TensorData], metadata: Mapping[str, str] | None = None) -> bytes:
    header, order = _header_json(tensors, metadata)
    parts = [struct.pack("<Q", len(header)), header]
    parts.extend(tensors[name].data for name in order)
    return b"".join(parts)


TensorSource = Union[Checkpoint, Mapping[str, TensorData]]


def write_checkpoint(tensors: TensorSource, path, metadata: Mapping[str, str] | None = None) -> None:
    """Write tensors (a mapping or a Checkpoint) as a single safetensors file.

    Tensors are laid out contiguously in name order.
    """
    if isinstance(tensors, Checkpoint):
        if metadata is None:
            metadata = tensors.metadata
        tensors = tensors.tensors()
    header, order = _header_json(tensors, metadata)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in order:
            fh.write(tensors[name].data)
    os.replace(tmp, path)


def _parse_header(raw: bytes, data_len: int, origin: str) -> tuple[dict[str, TensorRecord], dict[str, str]]:
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{origin}: header is not valid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise FormatError(f"{origin}: header must be a JSON object")
    metadata = obj.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise FormatError(f"{origin}: __metadata__ must be a string-to-string map")

    records = {}
    for name, entry in obj.items():
        if not isinstance(entry, dict):
            raise FormatError(f"{origin}: entry for {name!r} is not an object")
        try:
            dtype_text, shape, offsets = entry["dtype"], entry["shape"], entry["data_offsets"]
        except KeyError as exc:
            raise FormatError(f"{origin}: tensor {name!r} lacks field {exc}") from None
        if not isinstance(dtype_text, str):
            raise FormatError(f"{origin}: tensor {name!r} dtype must be a string")
        dtype = Dtype.parse(dtype_text)
        if not isinstance(shape, list) or not all(type(s) is int and s >= 0 for s in shape):
            raise FormatError(f"{origin}: tensor {name!r} has invalid shape {shape!r}")
        if (not isinstance(offsets, list) or len(offsets) != 2
                or not all(type(o) is int for o in offsets)):
            raise FormatError(f"{origin}: tensor {name!r} has invalid data_offsets {offsets!r}")
        begin, end = offsets
        if not 0 <= begin <= end <= data_len:
            raise FormatError(
                f"{origin}: tensor {name!r} offsets [{begin}, {end}) outside data region of {data_len} bytes"
            )
        want = math.prod(shape) * dtype.byte_size
        if end - begin != want:
            raise FormatError(
                f"{origin}: tensor {name!r} spans {end - begin} bytes but shape {shape} {dtype.value} needs {want}"
            )
        records[name] = TensorRecord(name, dtype, tuple(shape), (begin, end))

    spans = sorted((r.data_offsets, r.name) for r in records.values() if r.nbytes)
    for ((_, prev_end), prev), ((begin, _), name) in zip(spans, spans[1:]):
        if begin < prev_end:
            raise FormatError(f"{origin}: tensors {prev!r} and {name!r} overlap")
    return records, metadata


def _read_single(path: Path) -> tuple[dict[str, TensorRecord], dict[str, str], int]:
    size = path.stat().st_size
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) != 8:
            raise FormatError(f"{path}: file shorter than the 8-byte header-length prefix")
        (n,) = struct.unpack("<Q", prefix)
        if n == 0:
            raise FormatError(f"{path}: malformed header length 0")
        if n > MAX_HEADER_BYTES or 8 + n > size:
            raise FormatError(f"{path}: malformed header length {n} for a {size}-byte file")
        raw = fh.read(n)
    records, metadata = _parse_header(raw, size - 8 - n, str(path))
    return records, metadata, 8 + n


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    if path.name.endswith(".index.json"):
        return _read_sharded(path)
    records, metadata, data_start = _read_single(path)
    sources = {name: (str(path), data_start) for name in records}
    return Checkpoint(records, sources, metadata, origin=str(path))


def _read_sharded(index_path: Path) -> Checkpoint:
    try:
        index = json.loads(index_path.read_text())
        weight_map = index["weight_map"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{index_path}: not a shard index ({exc})") from None
    records, sources = {}, {}
    metadata = {str(k): str(v) for k, v in (index.get("metadata") or {}).items()}
    for shard in sorted(set(weight_map.values())):
        shard_path = index_path.parent / shard
        if not shard_path.is_file():
            raise FileNotFoundError(f"shard not found: {shard_path}")
        shard_records, _, data_start = _read_single(shard_path)
        for name, rec in shard_records.items():
            if weight_map.get(name) != shard:
                continue
            if name in records:
                raise FormatError(f"{index_path}: tensor {name!r} appears in more than one shard")
            records[name] = rec
            sources[name] = (str(shard_path), data_start)
    missing = sorted(set(weight_map) - set(records))
    if missing:
        raise FormatError(f"{index_path}: index lists tensors absent from their shards: {missing[:5]}")
    return Checkpoint(records, sources, metadata, origin=str(index_path))
