"""Binary tensor containers, low-bit code packing, and benchmark reports.

File formats
------------
Tensor container (``.tc``), little-endian throughout:

    magic    4 bytes  b"QDTC"
    version  u32      currently 1
    dtype    u8       0 = f32, 1 = f64, 2 = u8
    order    u8       1 = row-major (the only supported layout)
    ndim     u32
    dims     u64 * ndim
    payload  raw row-major element bytes

Packed code stream (``.pc``):

    magic      4 bytes  b"QDPC"
    version    u32      currently 1
    bit_width  u8       1..8
    count      u64      number of codes
    payload    ceil(count * bit_width / 8) bytes

Code ``j`` of the stream occupies bits ``[j*c, (j+1)*c)`` counted from bit 0
(the least significant bit) of byte 0; bits are little-endian within each
byte and the final byte is zero-padded. Example for c=4, codes [1, 2]:
single byte 0x21 (code 0 in the low nibble).

Floating-point payloads must be finite: NaN/Inf is rejected at write time
and again at read time, so corrupt or undefined data never enters the
optimization pipeline.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, fields, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CONTAINER_MAGIC = b"QDTC"
PACKED_MAGIC = b"QDPC"
FORMAT_VERSION = 1

_DTYPE_TO_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}
_TAG_TO_DTYPE = {v: k for k, v in _DTYPE_TO_TAG.items()}
_TAG_NAMES = {0: "f32", 1: "f64", 2: "u8"}


class TensorIOError(Exception):
    """Base class for container/packing format errors."""


class MalformedHeaderError(TensorIOError):
    """Header bytes do not describe a valid container."""


class PayloadMismatchError(TensorIOError):
    """Payload length disagrees with the header-declared shape."""


class NonFiniteDataError(TensorIOError):
    """Floating-point payload contains NaN or Inf."""


@dataclass(frozen=True)
class TensorContainer:
    """In-memory image of a container file: header fields plus payload array."""

    array: np.ndarray
    version: int = FORMAT_VERSION
    row_major: bool = True

    @property
    def dtype_tag(self) -> str:
        return _TAG_NAMES[_DTYPE_TO_TAG[self.array.dtype]]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.array.shape)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "TensorContainer":
        arr = np.ascontiguousarray(array)
        if arr.dtype not in _DTYPE_TO_TAG:
            raise MalformedHeaderError(f"unsupported dtype {arr.dtype} (use f32, f64 or u8)")
        return cls(array=arr)


def write_container(path: str | Path, data: TensorContainer | np.ndarray) -> None:
    """Write a tensor container; raises NonFiniteDataError on NaN/Inf payloads."""
    container = data if isinstance(data, TensorContainer) else TensorContainer.from_array(data)
    arr = np.ascontiguousarray(container.array)
    if arr.dtype not in _DTYPE_TO_TAG:
        raise MalformedHeaderError(f"unsupported dtype {arr.dtype} (use f32, f64 or u8)")
    if arr.ndim == 0:
        raise MalformedHeaderError("shape must be nonempty (0-d tensors not supported)")
    if arr.dtype.kind == "f" and arr.size and not np.isfinite(arr).all():
        raise NonFiniteDataError("refusing to write non-finite values")

    header = bytearray()
    header += CONTAINER_MAGIC
    header += struct.pack("<I", FORMAT_VERSION)
    header += struct.pack("<BB", _DTYPE_TO_TAG[arr.dtype], 1)
    header += struct.pack("<I", arr.ndim)
    for dim in arr.shape:
        header += struct.pack("<Q", dim)

    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    with open(path, "wb") as f:
        f.write(bytes(header))
        f.write(payload)


def read_container(path: str | Path) -> TensorContainer:
    """Read a container written by :func:`write_container`."""
    with open(path, "rb") as f:
        raw = f.read()

    if len(raw) < 14 or raw[:4] != CONTAINER_MAGIC:
        raise MalformedHeaderError("bad magic: not a tensor container")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"unsupported container version {version}")
    dtype_tag, order_flag = struct.unpack_from("<BB", raw, 8)
    if dtype_tag not in _TAG_TO_DTYPE:
        raise MalformedHeaderError(f"unknown dtype tag {dtype_tag}")
    if order_flag != 1:
        raise MalformedHeaderError("only row-major containers are supported")
    (ndim,) = struct.unpack_from("<I", raw, 10)
    if ndim == 0 or ndim > 32:
        raise MalformedHeaderError(f"invalid rank {ndim}")
    offset = 14
    if len(raw) < offset + 8 * ndim:
        raise MalformedHeaderError("truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
    offset += 8 * ndim

    dtype = _TAG_TO_DTYPE[dtype_tag]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = raw[offset:]
    if len(payload) != expected:
        raise PayloadMismatchError(
            f"payload length mismatch: header declares {expected} bytes, file has {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype, copy=True)
    arr = arr.reshape(shape)
    if dtype.kind == "f" and arr.size and not np.isfinite(arr).all():
        raise NonFiniteDataError("container holds non-finite values")
    return TensorContainer(array=arr, version=version)


@dataclass(frozen=True)
class PackedCodes:
    """Bit-packed low-bit integer codes."""

    bit_width: int
    count: int
    payload: bytes

    def __post_init__(self):
        if not 1 <= self.bit_width <= 8:
            raise ValueError(f"bit_width must be in 1..8, got {self.bit_width}")
        expected = (self.count * self.bit_width + 7) // 8
        if len(self.payload) != expected:
            raise PayloadMismatchError(
                f"packed payload has {len(self.payload)} bytes, expected {expected}"
            )


def pack_codes(codes: Sequence[int] | np.ndarray, bit_width: int) -> PackedCodes:
    """Pack integer codes into the canonical little-endian bit stream."""
    if not 1 <= bit_width <= 8:
        raise ValueError(f"bit_width must be in 1..8, got {bit_width}")
    arr = np.asarray(codes, dtype=np.int64).ravel()
    if arr.size and (arr.min() < 0 or arr.max() >= (1 << bit_width)):
        raise ValueError(f"code out of range for {bit_width}-bit packing")
    # One row of little-endian bits per code, flattened so that bit j*c+t of
    # the stream is bit t of code j, then packed LSB-first.
    bits = ((arr[:, None] >> np.arange(bit_width)) & 1).astype(np.uint8)
    payload = np.packbits(bits.ravel(), bitorder="little").tobytes()
    return PackedCodes(bit_width=bit_width, count=int(arr.size), payload=payload)


def unpack_codes(packed: PackedCodes) -> np.ndarray:
    """Invert :func:`pack_codes`; returns a uint8 vector of length ``count``."""
    c = packed.bit_width
    nbits = packed.count * c
    flat = np.unpackbits(np.frombuffer(packed.payload, dtype=np.uint8), bitorder="little")
    if flat[nbits:].any():
        raise PayloadMismatchError("nonzero padding bits in packed stream")
    bits = flat[:nbits].reshape(packed.count, c).astype(np.uint16)
    codes = (bits << np.arange(c, dtype=np.uint16)).sum(axis=1)
    return codes.astype(np.uint8)


def write_packed(path: str | Path, packed: PackedCodes) -> None:
    with open(path, "wb") as f:
        f.write(PACKED_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<BQ", packed.bit_width, packed.count))
        f.write(packed.payload)


def read_packed(path: str | Path) -> PackedCodes:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 17 or raw[:4] != PACKED_MAGIC:
        raise MalformedHeaderError("bad magic: not a packed code stream")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"unsupported packed-codes version {version}")
    bit_width, count = struct.unpack_from("<BQ", raw, 8)
    payload = raw[17:]
    expected = (count * bit_width + 7) // 8
    if len(payload) != expected:
        raise PayloadMismatchError(
            f"payload length mismatch: header declares {expected} bytes, file has {len(payload)}"
        )
    return PackedCodes(bit_width=int(bit_width), count=int(count), payload=payload)


@dataclass(frozen=True)
class BenchRecord:
    """One (method, column) measurement row of a quantization run."""

    method: str
    bits: int
    group_size: int
    block_size: int
    epochs: int
    column: int
    objective: float
    relative_objective: float
    steps: int
    wall_millis: float


REPORT_COLUMNS = tuple(f.name for f in fields(BenchRecord))


def emit_report(records: Iterable[BenchRecord], fmt: str, path: str | Path) -> None:
    """Write records as CSV (with header row) or JSON lines, in input order."""
    rows = list(records)
    if not rows:
        raise ValueError("empty report")
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(REPORT_COLUMNS)
            for rec in rows:
                writer.writerow([repr(v) if isinstance(v, float) else v
                                 for v in (getattr(rec, col) for col in REPORT_COLUMNS)])
    elif fmt == "jsonl":
        with open(path, "w") as f:
            for rec in rows:
                f.write(json.dumps(asdict(rec)) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r} (use csv or jsonl)")
