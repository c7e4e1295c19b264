"""Bit-packed +/-1 matrices and the xnor/popcount matrix multiply.

Layout: rows are packed LSB-first into fixed-width lanes (32 or 64 bits),
row-major, each row padded with zero bits up to a whole number of lanes.
A stored 1 bit means +1 (or 1 under the {1,0} convention), a 0 bit means -1
(or 0).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

PM1 = "pm1"
BIN01 = "01"

_CONVENTION_CODES = {PM1: 0, BIN01: 1}
_LANE_DTYPES = {32: np.dtype("<u4"), 64: np.dtype("<u8")}
_HEADER = struct.Struct("<IIBB")

# rows of A processed per bgemm chunk; bounds the (chunk, n, lanes) temporary
_CHUNK_ROWS = 64


class EncodingError(ValueError):
    pass


class DimensionError(ValueError):
    pass


def n_lanes_for(cols: int, lane_width: int) -> int:
    return -(-cols // lane_width)


def _check_lane_width(lane_width: int) -> np.dtype:
    try:
        return _LANE_DTYPES[lane_width]
    except KeyError:
        raise ValueError(f"lane_width must be 32 or 64, got {lane_width}") from None


@dataclass(frozen=True, eq=False)
class BitMatrix:
    """A rows x cols matrix of 1-bit values packed into machine words."""

    rows: int
    cols: int
    words: np.ndarray
    lane_width: int = 64
    convention: str = PM1

    def __post_init__(self):
        dtype = _check_lane_width(self.lane_width)
        if self.convention not in _CONVENTION_CODES:
            raise ValueError(f"unknown convention {self.convention!r}")
        expected = (self.rows, n_lanes_for(self.cols, self.lane_width))
        if self.words.shape != expected or self.words.dtype.itemsize != dtype.itemsize:
            raise EncodingError(
                f"words must be {expected} of {dtype}, got {self.words.shape} {self.words.dtype}"
            )

    @property
    def n_lanes(self) -> int:
        return self.words.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def row(self, i: int) -> np.ndarray:
        return self.words[i]

    def tail_mask(self) -> np.ndarray:
        return valid_mask(self.cols, self.lane_width)

    def unpack(self) -> np.ndarray:
        """Dense int8 matrix of +/-1 (or {1,0}) values."""
        if self.cols == 0 or self.rows == 0:
            return np.zeros((self.rows, self.cols), dtype=np.int8)
        raw = np.ascontiguousarray(self.words.astype(_LANE_DTYPES[self.lane_width]))
        bits = np.unpackbits(raw.view(np.uint8).reshape(self.rows, -1), axis=1, bitorder="little")
        bits = bits[:, : self.cols].astype(np.int8)
        if self.convention == PM1:
            return 2 * bits - 1
        return bits

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(self.rows, self.cols, self.lane_width, _CONVENTION_CODES[self.convention])
        payload = np.ascontiguousarray(self.words, dtype=_LANE_DTYPES[self.lane_width]).tobytes()
        return header + payload

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["BitMatrix", int]:
        """Parse one serialized matrix at ``offset``; return it and the end offset."""
        try:
            rows, cols, lane_width, code = _HEADER.unpack_from(data, offset)
        except struct.error:
            raise EncodingError("truncated BitMatrix header") from None
        dtype = _check_lane_width(lane_width)
        conventions = {v: k for k, v in _CONVENTION_CODES.items()}
        if code not in conventions:
            raise EncodingError(f"unknown convention code {code}")
        offset += _HEADER.size
        lanes = n_lanes_for(cols, lane_width)
        n = rows * lanes
        if len(data) - offset < n * dtype.itemsize:
            raise EncodingError("truncated BitMatrix payload")
        words = np.frombuffer(data, dtype=dtype, count=n, offset=offset)
        words = words.astype(dtype.newbyteorder("="), copy=True).reshape(rows, lanes)
        offset += n * dtype.itemsize
        return cls(rows, cols, words, lane_width, conventions[code]), offset

    def __eq__(self, other):
        if not isinstance(other, BitMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.lane_width == other.lane_width
            and self.convention == other.convention
            and np.array_equal(self.words, other.words)
        )


def valid_mask(cols: int, lane_width: int = 64) -> np.ndarray:
    """Per-lane masks selecting the ``cols`` valid bit positions of a row."""
    dtype = _check_lane_width(lane_width).newbyteorder("=")
    n = n_lanes_for(cols, lane_width)
    mask = np.full(n, np.iinfo(dtype).max, dtype=dtype)
    tail = cols - (n - 1) * lane_width if n else 0
    if n and tail < lane_width:
        mask[-1] = dtype.type((1 << tail) - 1)
    return mask


def _pack_bits(bits: np.ndarray, lane_width: int, convention: str) -> BitMatrix:
    dtype = _check_lane_width(lane_width)
    rows, cols = bits.shape
    n = n_lanes_for(cols, lane_width)
    padded = np.zeros((rows, n * lane_width), dtype=np.uint8)
    padded[:, :cols] = bits
    packed = np.packbits(padded, axis=1, bitorder="little")
    words = packed.view(dtype).astype(dtype.newbyteorder("="))
    return BitMatrix(rows, cols, words.reshape(rows, n), lane_width, convention)


def pack_signs(dense, lane_width: int = 64) -> BitMatrix:
    """Pack a matrix of exactly +1/-1 entries; +1 is stored as bit 1."""
    arr = np.asarray(dense)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    pos = arr == 1
    if not np.all(pos | (arr == -1)):
        bad = np.argwhere(~(pos | (arr == -1)))[0]
        raise EncodingError(f"entry {tuple(bad)} = {arr[tuple(bad)]!r} is not +1 or -1")
    return _pack_bits(pos.astype(np.uint8), lane_width, PM1)


def pack_binary01(dense, lane_width: int = 64) -> BitMatrix:
    """Pack a matrix of exactly 1/0 entries under the {1,0} convention."""
    arr = np.asarray(dense)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    one = arr == 1
    if not np.all(one | (arr == 0)):
        bad = np.argwhere(~(one | (arr == 0)))[0]
        raise EncodingError(f"entry {tuple(bad)} = {arr[tuple(bad)]!r} is not 1 or 0")
    return _pack_bits(one.astype(np.uint8), lane_width, BIN01)


def unpack(m: BitMatrix) -> np.ndarray:
    return m.unpack()


def _popcount(x: np.ndarray, axis=-1) -> np.ndarray:
    return np.bitwise_count(x).sum(axis=axis, dtype=np.int64)


def xnor_dot(a: np.ndarray, b: np.ndarray, n: int, lane_width: int = 64) -> int:
    """Dot product of two packed +/-1 rows of logical length ``n``.

    Padding bits are zero in both rows, so their xnor is 1; the mask keeps
    them out of the count.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.shape[-1] != n_lanes_for(n, lane_width):
        raise DimensionError(f"rows of {a.shape} and {b.shape} do not hold {n} bits")
    matches = ~(a ^ b) & valid_mask(n, lane_width)
    return int(2 * _popcount(matches) - n)


def xnor_dot_binary01(a: np.ndarray, b: np.ndarray, n: int, lane_width: int = 64) -> int:
    """Dot product of a packed +/-1 row ``a`` with a packed {1,0} row ``b``.

    sum(a_i * b_i) = popcount(a & b) - popcount(~a & b); ``b`` itself masks
    off the padding.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.shape[-1] != n_lanes_for(n, lane_width):
        raise DimensionError(f"rows of {a.shape} and {b.shape} do not hold {n} bits")
    return int(_popcount(a & b) - _popcount(~a & b))


def bgemm(a: BitMatrix, b: BitMatrix) -> np.ndarray:
    """Integer product ``A @ B.T`` of two packed matrices sharing the inner dim.

    ``b`` holds the right operand transposed (one row per output column).
    Mixed {+1,-1} x {1,0} operands dispatch to the AND/popcount kernel.
    """
    if a.cols != b.cols:
        raise DimensionError(f"inner dimensions differ: {a.cols} vs {b.cols}")
    if a.lane_width != b.lane_width:
        raise DimensionError(f"lane widths differ: {a.lane_width} vs {b.lane_width}")
    k = a.cols
    out = np.empty((a.rows, b.rows), dtype=np.int64)
    if a.rows == 0 or b.rows == 0:
        return out
    bw = b.words[None, :, :]
    if a.convention == PM1 and b.convention == PM1:
        mask = valid_mask(k, a.lane_width)
        for s in range(0, a.rows, _CHUNK_ROWS):
            aw = a.words[s : s + _CHUNK_ROWS, None, :]
            out[s : s + _CHUNK_ROWS] = 2 * _popcount(~(aw ^ bw) & mask) - k
    elif a.convention == BIN01 and b.convention == BIN01:
        for s in range(0, a.rows, _CHUNK_ROWS):
            out[s : s + _CHUNK_ROWS] = _popcount(a.words[s : s + _CHUNK_ROWS, None, :] & bw)
    else:
        signed, ones = (a, b) if a.convention == PM1 else (b, a)
        sw, ow = signed.words, ones.words
        res = np.empty((signed.rows, ones.rows), dtype=np.int64)
        # sum(s_i * o_i) = 2*popcount(s & o) - popcount(o)
        ones_count = _popcount(ow)[None, :]
        for s in range(0, signed.rows, _CHUNK_ROWS):
            hits = _popcount(sw[s : s + _CHUNK_ROWS, None, :] & ow[None, :, :])
            res[s : s + _CHUNK_ROWS] = 2 * hits - ones_count
        out = res if a.convention == PM1 else res.T.copy()
    return out
