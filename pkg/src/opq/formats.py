"""Low-level binary plumbing for artifact files.

All artifact files start with the 8-byte magic ``OPQART01`` followed by a
4-byte ASCII type tag. The rest of the file is a sequence of length-prefixed
sections (u64 little-endian byte count, then the payload). Multi-byte
integers and floats are little-endian throughout. See docs/FORMATS.md for
the full layout of each artifact type.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import FormatError

MAGIC = b"OPQART01"

TAG_PRUNING = b"PRUN"
TAG_QUANT = b"QUNT"
TAG_COMPRESSED = b"CMPR"


def canonical_json_bytes(obj) -> bytes:
    """Deterministic JSON encoding: sorted keys, no whitespace, UTF-8."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def parse_json_bytes(data: bytes):
    try:
        return json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt JSON section: {e}") from e


class SectionWriter:
    """Accumulates length-prefixed sections into one byte blob."""

    def __init__(self, tag: bytes):
        if len(tag) != 4:
            raise ValueError("type tag must be 4 bytes")
        self._parts = [MAGIC, tag]

    def add(self, payload: bytes) -> None:
        self._parts.append(struct.pack("<Q", len(payload)))
        self._parts.append(payload)

    def add_json(self, obj) -> None:
        self.add(canonical_json_bytes(obj))

    def add_array(self, arr: np.ndarray) -> None:
        self.add(np.ascontiguousarray(arr).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class SectionReader:
    """Walks the length-prefixed sections of an artifact blob."""

    def __init__(self, data: bytes, expect_tag: bytes | None = None):
        if len(data) < 12:
            raise FormatError("file too short to be an artifact")
        if data[:8] != MAGIC:
            raise FormatError(f"bad magic {data[:8]!r}, expected {MAGIC!r}")
        self.tag = data[8:12]
        if expect_tag is not None and self.tag != expect_tag:
            raise FormatError(f"artifact type tag {self.tag!r} does not match expected {expect_tag!r}")
        self._data = data
        self._pos = 12

    def next(self) -> bytes:
        if self._pos + 8 > len(self._data):
            raise FormatError(f"truncated artifact: expected section length at byte {self._pos}")
        (n,) = struct.unpack_from("<Q", self._data, self._pos)
        self._pos += 8
        if self._pos + n > len(self._data):
            raise FormatError(f"truncated artifact: section of {n} bytes at byte {self._pos} overruns file")
        payload = self._data[self._pos:self._pos + n]
        self._pos += n
        return payload

    def next_json(self):
        return parse_json_bytes(self.next())

    def next_array(self, dtype, count: int) -> np.ndarray:
        payload = self.next()
        want = np.dtype(dtype).itemsize * count
        if len(payload) != want:
            raise FormatError(f"array section holds {len(payload)} bytes, expected {want}")
        return np.frombuffer(payload, dtype=dtype).copy()

    def expect_end(self) -> None:
        if self._pos != len(self._data):
            raise FormatError(f"{len(self._data) - self._pos} trailing bytes after last section")


def pack_bit_fields(values: np.ndarray, width: int) -> bytes:
    """Pack unsigned integers into a MSB-first bitstream, zero-padded to a byte boundary."""
    if width < 1 or width > 32:
        raise ValueError(f"field width {width} out of range [1, 32]")
    vals = np.asarray(values, dtype=np.uint64)
    if vals.size == 0:
        return b""
    if vals.max() >> width:
        raise ValueError(f"value {vals.max()} does not fit in {width} bits")
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    bits = ((vals[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="big").tobytes()


def unpack_bit_fields(data: bytes, width: int, count: int) -> np.ndarray:
    """Inverse of pack_bit_fields; raises FormatError if data is too short."""
    need = (count * width + 7) // 8
    if len(data) < need:
        raise FormatError(f"bitstream holds {len(data)} bytes, need {need} for {count} fields of {width} bits")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="big")[: count * width]
    bits = bits.reshape(count, width).astype(np.uint64)
    weights = (np.uint64(1) << np.arange(width - 1, -1, -1, dtype=np.uint64))
    return bits @ weights


def interleave_bit_fields(a: np.ndarray, wa: int, b: np.ndarray, wb: int) -> bytes:
    """Pack entry pairs (a_k, b_k) as consecutive (wa + wb)-bit records, MSB-first."""
    va = np.asarray(a, dtype=np.uint64)
    vb = np.asarray(b, dtype=np.uint64)
    if va.shape != vb.shape:
        raise ValueError("field arrays must have equal length")
    if va.size == 0:
        return b""
    if va.max() >> wa or vb.max() >> wb:
        raise ValueError("field value out of range for declared width")
    sa = np.arange(wa - 1, -1, -1, dtype=np.uint64)
    sb = np.arange(wb - 1, -1, -1, dtype=np.uint64)
    bits = np.concatenate(
        [((va[:, None] >> sa) & 1), ((vb[:, None] >> sb) & 1)], axis=1
    ).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="big").tobytes()


def deinterleave_bit_fields(data: bytes, wa: int, wb: int, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of interleave_bit_fields."""
    width = wa + wb
    need = (count * width + 7) // 8
    if len(data) < need:
        raise FormatError(f"bitstream holds {len(data)} bytes, need {need} for {count} entries of {width} bits")
    if count == 0:
        return np.zeros(0, dtype=np.uint64), np.zeros(0, dtype=np.uint64)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="big")[: count * width]
    bits = bits.reshape(count, width).astype(np.uint64)
    pa = (np.uint64(1) << np.arange(wa - 1, -1, -1, dtype=np.uint64))
    pb = (np.uint64(1) << np.arange(wb - 1, -1, -1, dtype=np.uint64))
    return bits[:, :wa] @ pa, bits[:, wa:] @ pb


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF
