"""Single-file tensor archive reader/writer.

File layout (bit-exact): ``[u64 LE header-length][UTF-8 JSON header][payload]``.
The header maps tensor names to ``{"dtype", "shape", "data_offsets"}`` with an
optional ``"__metadata__"`` string map; ``data_offsets`` are relative to the
start of the payload region. Reading a tensor touches only the header plus that
tensor's bytes, so multi-GB checkpoints never need full materialization.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ArchiveError",
    "TensorMeta",
    "TensorData",
    "TensorArchive",
    "open_archive",
    "read_tensor",
    "write_archive",
    "widen_to_f32",
    "narrow_from_f32",
    "DTYPE_WIDTHS",
]

# Supported dtype strings, exactly as they appear in the header JSON.
DTYPE_WIDTHS = {"F32": 4, "F16": 2, "BF16": 2}

# Hard cap on the declared header size; bounds hostile inputs.
MAX_HEADER_BYTES = 100 * 1024 * 1024

_METADATA_KEY = "__metadata__"
_ENTRY_KEYS = {"dtype", "shape", "data_offsets"}


class ArchiveError(Exception):
    """Malformed archive file or invalid write request."""


@dataclass(frozen=True)
class TensorMeta:
    dtype: str
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def element_count(self) -> int:
        n = 1
        for dim in self.shape:
            n *= dim
        return n

    @property
    def byte_length(self) -> int:
        return self.element_count * DTYPE_WIDTHS[self.dtype]


@dataclass(frozen=True)
class TensorData:
    meta: TensorMeta
    values: bytes

    def __post_init__(self) -> None:
        if len(self.values) != self.meta.byte_length:
            raise ArchiveError(
                f"buffer holds {len(self.values)} bytes but dtype {self.meta.dtype} "
                f"with shape {list(self.meta.shape)} requires {self.meta.byte_length}"
            )


@dataclass
class TensorArchive:
    """Parsed archive: ordered name -> meta map plus a handle to the payload."""

    path: Path
    entries: dict[str, TensorMeta]
    metadata: dict[str, str] = field(default_factory=dict)
    payload_offset: int = 0
    payload_size: int = 0

    def names(self) -> list[str]:
        return list(self.entries)


def _pairs_rejecting_duplicates(pairs: list[tuple[str, object]]) -> dict:
    seen: dict = {}
    for key, value in pairs:
        if key in seen:
            raise ArchiveError(f"duplicate tensor name in header: {key!r}")
        seen[key] = value
    return seen


def _parse_meta(name: str, raw: object) -> TensorMeta:
    if not isinstance(raw, dict):
        raise ArchiveError(f"header entry {name!r} is not an object")
    unknown = set(raw) - _ENTRY_KEYS
    if unknown:
        raise ArchiveError(f"header entry {name!r} has unknown keys {sorted(unknown)}")
    missing = _ENTRY_KEYS - set(raw)
    if missing:
        raise ArchiveError(f"header entry {name!r} is missing keys {sorted(missing)}")
    dtype = raw["dtype"]
    if dtype not in DTYPE_WIDTHS:
        raise ArchiveError(f"tensor {name!r} has unknown dtype {dtype!r}")
    shape = raw["shape"]
    if not isinstance(shape, list) or any(
        not isinstance(d, int) or isinstance(d, bool) or d < 0 for d in shape
    ):
        raise ArchiveError(f"tensor {name!r} has invalid shape {shape!r}")
    offsets = raw["data_offsets"]
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or any(not isinstance(v, int) or isinstance(v, bool) or v < 0 for v in offsets)
    ):
        raise ArchiveError(f"tensor {name!r} has invalid data_offsets {offsets!r}")
    begin, end = offsets
    if begin > end:
        raise ArchiveError(f"tensor {name!r} has begin {begin} > end {end}")
    meta = TensorMeta(dtype=dtype, shape=tuple(shape), data_offsets=(begin, end))
    if end - begin != meta.byte_length:
        raise ArchiveError(
            f"tensor {name!r}: offsets span {end - begin} bytes but shape "
            f"{shape!r} with dtype {dtype} requires {meta.byte_length}"
        )
    return meta


def open_archive(path: str | Path) -> TensorArchive:
    """Parse and validate the header of an archive without loading any payload."""
    path = Path(path)
    file_size = path.stat().st_size
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise ArchiveError(f"{path}: truncated file, no header length")
        (header_len,) = struct.unpack("<Q", prefix)
        if header_len > MAX_HEADER_BYTES:
            raise ArchiveError(
                f"{path}: declared header of {header_len} bytes exceeds the "
                f"{MAX_HEADER_BYTES}-byte cap"
            )
        header_bytes = fh.read(header_len)
    if len(header_bytes) < header_len:
        raise ArchiveError(f"{path}: truncated header")
    try:
        header = json.loads(
            header_bytes.decode("utf-8"), object_pairs_hook=_pairs_rejecting_duplicates
        )
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: malformed JSON header: {exc}") from exc
    if not isinstance(header, dict):
        raise ArchiveError(f"{path}: header is not a JSON object")

    metadata: dict[str, str] = {}
    entries: dict[str, TensorMeta] = {}
    for name, raw in header.items():
        if name == _METADATA_KEY:
            if not isinstance(raw, dict) or any(
                not isinstance(k, str) or not isinstance(v, str) for k, v in raw.items()
            ):
                raise ArchiveError(f"{path}: __metadata__ must map strings to strings")
            metadata = dict(raw)
            continue
        if name == "":
            raise ArchiveError(f"{path}: empty tensor name")
        entries[name] = _parse_meta(name, raw)

    payload_size = file_size - 8 - header_len
    _check_tiling(path, entries, payload_size)
    return TensorArchive(
        path=path,
        entries=entries,
        metadata=metadata,
        payload_offset=8 + header_len,
        payload_size=payload_size,
    )


def _check_tiling(path: Path, entries: Mapping[str, TensorMeta], payload_size: int) -> None:
    """Ranges must be non-overlapping, contiguous, and exactly tile the payload."""
    cursor = 0
    for name, meta in sorted(entries.items(), key=lambda kv: kv[1].data_offsets):
        begin, end = meta.data_offsets
        if begin != cursor:
            raise ArchiveError(
                f"{path}: tensor {name!r} starts at {begin}, expected {cursor} "
                "(ranges must tile the payload without gaps or overlaps)"
            )
        cursor = end
    if cursor != payload_size:
        raise ArchiveError(
            f"{path}: declared ranges cover {cursor} bytes but payload holds {payload_size}"
        )


def read_tensor(archive: TensorArchive, name: str) -> TensorData:
    """Read one tensor's raw bytes; BF16/F16 payloads are returned unconverted."""
    meta = archive.entries.get(name)
    if meta is None:
        raise ArchiveError(f"{archive.path}: unknown tensor {name!r}")
    begin, end = meta.data_offsets
    with open(archive.path, "rb") as fh:
        fh.seek(archive.payload_offset + begin)
        values = fh.read(end - begin)
    if len(values) != end - begin:
        raise ArchiveError(f"{archive.path}: short read for tensor {name!r}")
    return TensorData(meta=meta, values=values)


def write_archive(
    entries: Sequence[tuple[str, TensorData]] | Iterable[tuple[str, TensorData]],
    metadata: Mapping[str, str] | None,
    path: str | Path,
) -> None:
    """Write an archive with contiguous offsets assigned in caller order.

    Header keys are emitted in ascending first-byte-offset order (which equals
    caller order) so identical inputs always produce identical files.
    """
    entries = list(entries)
    names = [name for name, _ in entries]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ArchiveError(f"duplicate tensor names: {dupes}")
    if any(name == "" for name in names):
        raise ArchiveError("empty tensor name")

    header: dict[str, object] = {}
    if metadata:
        header[_METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    cursor = 0
    for name, data in entries:
        begin, end = cursor, cursor + len(data.values)
        header[name] = {
            "dtype": data.meta.dtype,
            "shape": list(data.meta.shape),
            "data_offsets": [begin, end],
        }
        cursor = end

    header_bytes = json.dumps(header, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, data in entries:
            fh.write(data.values)


def widen_to_f32(raw: bytes, dtype: str) -> np.ndarray:
    """Decode a little-endian element buffer into a float32 array, exactly."""
    if dtype == "F32":
        return np.frombuffer(raw, dtype="<f4").copy()
    if dtype == "F16":
        return np.frombuffer(raw, dtype="<f2").astype(np.float32)
    if dtype == "BF16":
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << np.uint32(16)
        return bits.view(np.float32).copy()
    raise ArchiveError(f"unknown dtype {dtype!r}")


def narrow_from_f32(values: np.ndarray, dtype: str) -> bytes:
    """Encode float32 values as a little-endian buffer, rounding to nearest-even.

    NaN payloads survive the trip (quieted only when truncation would turn a
    NaN into an infinity), so widen/narrow is the identity on every BF16 and
    F16 bit pattern.
    """
    values = np.ascontiguousarray(values, dtype="<f4")
    if dtype == "F32":
        return values.tobytes()
    if dtype == "F16":
        return values.astype("<f2").tobytes()
    if dtype == "BF16":
        bits = values.view(np.uint32)
        nan = (bits & np.uint32(0x7F800000)) == np.uint32(0x7F800000)
        nan &= (bits & np.uint32(0x007FFFFF)) != 0
        # Round to nearest, ties to even, on the low 16 bits.
        rounded = (bits + np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))) >> np.uint32(16)
        truncated = bits >> np.uint32(16)
        truncated = truncated | np.where(
            (truncated & np.uint32(0x7F)) == 0, np.uint32(0x40), np.uint32(0)
        )
        out = np.where(nan, truncated, rounded).astype("<u2")
        return out.tobytes()
    raise ArchiveError(f"unknown dtype {dtype!r}")


def tensor_from_array(array: np.ndarray, dtype: str) -> TensorData:
    """Pack a float32 array into a TensorData of the given storage dtype."""
    array = np.asarray(array, dtype=np.float32)
    raw = narrow_from_f32(array.reshape(-1), dtype)
    meta = TensorMeta(
        dtype=dtype,
        shape=tuple(int(d) for d in array.shape),
        data_offsets=(0, len(raw)),
    )
    return TensorData(meta=meta, values=raw)
