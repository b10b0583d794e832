"""Length-prefixed binary frames and array serialization.

Frame layout, bit-exact: magic "PPGW", u8 version, u8 msg-type, u64
little-endian payload length, payload.  Arrays inside payloads are encoded
as u8 ndim, u64 little-endian dims, u8 dtype tag (0 = f64, 1 = i64), then
the raw little-endian row-major payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

MAGIC = b"PPGW"
VERSION = 1
HEADER = struct.Struct("<4sBBQ")
MAX_PAYLOAD = 1 << 30  # 1 GiB


class FrameError(Exception):
    pass


class PhaseTag(IntEnum):
    HELLO = 1
    QC_COUNTS = 2
    QC_REPORT = 3
    MOMENTS = 4
    PROJ_UPLOAD = 5
    PROJ_RESULT = 6
    L0_PAYLOAD = 7
    L0_DONE = 8
    L1_DONE_RSTAR = 9
    ASSOC_UPLOAD = 10
    ASSOC_RESULT = 11
    ABORT = 12


@dataclass(frozen=True)
class Frame:
    msg_type: int
    payload: bytes


def encode_frame(msg_type: int, payload: bytes, max_payload: int = MAX_PAYLOAD) -> bytes:
    if len(payload) > max_payload:
        raise FrameError(f"payload of {len(payload)} bytes exceeds the frame limit")
    PhaseTag(msg_type)  # unknown types are never emitted
    return HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


def decode_frame(data: bytes, max_payload: int = MAX_PAYLOAD) -> Frame:
    if len(data) < HEADER.size:
        raise FrameError("truncated frame header")
    magic, version, msg_type, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FrameError("bad magic")
    if version != VERSION:
        raise FrameError(f"unsupported protocol version {version}")
    if length > max_payload:
        raise FrameError("oversize payload")
    if len(data) != HEADER.size + length:
        raise FrameError("truncated payload")
    try:
        PhaseTag(msg_type)
    except ValueError:
        raise FrameError(f"unknown message type {msg_type}") from None
    return Frame(msg_type, data[HEADER.size:])


def read_frame(read_exact, max_payload: int = MAX_PAYLOAD) -> Frame:
    """Decode one frame from a stream via a read-exactly-n callable."""
    head = read_exact(HEADER.size)
    magic, version, msg_type, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise FrameError("bad magic")
    if version != VERSION:
        raise FrameError(f"unsupported protocol version {version}")
    if length > max_payload:
        raise FrameError("oversize payload")
    payload = read_exact(length) if length else b""
    try:
        PhaseTag(msg_type)
    except ValueError:
        raise FrameError(f"unknown message type {msg_type}") from None
    return Frame(msg_type, payload)


_TAG_F64, _TAG_I64 = 0, 1


class Writer:
    """Appends primitive values and arrays into one payload buffer."""

    def __init__(self):
        self.parts = []

    def u32(self, value: int):
        self.parts.append(struct.pack("<I", value))
        return self

    def u64(self, value: int):
        self.parts.append(struct.pack("<Q", value))
        return self

    def f64(self, value: float):
        self.parts.append(struct.pack("<d", value))
        return self

    def raw(self, data: bytes):
        self.parts.append(struct.pack("<I", len(data)) + data)
        return self

    def array(self, arr: np.ndarray):
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            tag = _TAG_F64
        elif arr.dtype == np.int64:
            tag = _TAG_I64
        else:
            raise FrameError(f"unsupported array dtype {arr.dtype}")
        head = struct.pack("<B", arr.ndim) + b"".join(
            struct.pack("<Q", d) for d in arr.shape
        ) + struct.pack("<B", tag)
        self.parts.append(head + arr.astype(arr.dtype, copy=False).tobytes())
        return self

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    """Positional decoder matching Writer."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FrameError("payload ended early")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def raw(self) -> bytes:
        return self._take(self.u32())

    def array(self) -> np.ndarray:
        ndim = struct.unpack("<B", self._take(1))[0]
        shape = tuple(self.u64() for _ in range(ndim))
        tag = struct.unpack("<B", self._take(1))[0]
        if tag == _TAG_F64:
            dtype = np.float64
        elif tag == _TAG_I64:
            dtype = np.int64
        else:
            raise FrameError(f"unknown array dtype tag {tag}")
        count = 1
        for d in shape:
            count *= d
        body = self._take(count * 8)
        return np.frombuffer(body, dtype=dtype).reshape(shape).copy()

    def done(self):
        if self.pos != len(self.data):
            raise FrameError("trailing bytes in payload")
