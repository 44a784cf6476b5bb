"""rANS entropy coder over integer CDF tables.

64-bit-state range variant of asymmetric numeral systems with 32-bit
renormalization words.  Encoding walks the symbol sequence in reverse and
pushes onto the state; decoding walks forward and pops, so the two sides
consume the CDF tables in the same element order.  Out-of-range symbols are
coded through a dedicated escape slot followed by the raw 32-bit value in
two uniform 16-bit chunks, so any int32 is codable regardless of table
range.

Payload layout: final 64-bit state (little-endian), then the renorm words
in reverse emission order, which is exactly the order the decoder consumes
them.  A decoded stream must end in the initial state with every word
consumed; anything else raises BitstreamError.
"""

import struct
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .entropy_models import PRECISION, CdfTable
from .errors import BitstreamError, CodingError

RANS_L = 1 << 31            # renormalization interval lower bound
_WORD_BITS = 32
_MASK = (1 << PRECISION) - 1
_SEGMENT_HEADER = struct.Struct("<IHI")     # n_symbols, L, payload length


def _check_symbols(symbols: np.ndarray) -> np.ndarray:
    sym = np.asarray(symbols)
    if not np.issubdtype(sym.dtype, np.integer):
        raise CodingError(f"symbols must be integers, got dtype {sym.dtype}")
    sym = sym.astype(np.int64, copy=False).ravel()
    if sym.size and (sym.min() < -(1 << 31) or sym.max() >= 1 << 31):
        raise CodingError("symbols must fit in int32")
    return sym


def encode_with_table(symbols: np.ndarray, table: CdfTable) -> bytes:
    """Encode a flat int sequence against per-element CDF rows -> payload."""
    sym = _check_symbols(symbols)
    if sym.size != table.n_elements:
        raise CodingError(
            f"{sym.size} symbols but table indexes {table.n_elements} elements")
    if sym.size == 0:
        return b""
    table.validate()
    L, esc = table.L, table.escape_slot
    in_range = np.abs(sym) <= L
    slots = np.where(in_range, sym + L, esc)
    starts = table.rows[table.index, slots]
    freqs = table.rows[table.index, slots + 1] - starts

    # op list in decoder order: slot op, then (for escapes) hi/lo raw chunks
    ops_start = starts.tolist()
    ops_freq = freqs.tolist()
    if not in_range.all():
        raw = (sym & 0xFFFFFFFF).tolist()
        flat_s, flat_f = [], []
        for i, ok in enumerate(in_range.tolist()):
            flat_s.append(ops_start[i])
            flat_f.append(ops_freq[i])
            if not ok:
                flat_s.append((raw[i] >> 16) & 0xFFFF)
                flat_f.append(1)
                flat_s.append(raw[i] & 0xFFFF)
                flat_f.append(1)
        ops_start, ops_freq = flat_s, flat_f

    x = RANS_L
    words = []
    renorm_base = (RANS_L >> PRECISION) << _WORD_BITS
    for j in range(len(ops_start) - 1, -1, -1):
        f = ops_freq[j]
        if x >= renorm_base * f:
            words.append(x & 0xFFFFFFFF)
            x >>= _WORD_BITS
        x = ((x // f) << PRECISION) + (x % f) + ops_start[j]
    words.reverse()
    return struct.pack("<Q", x) + struct.pack(f"<{len(words)}I", *words)


def decode_with_table(payload: bytes, n_symbols: int, table: CdfTable) -> np.ndarray:
    """Decode `n_symbols` ints from a payload; inverse of encode_with_table."""
    if n_symbols != table.n_elements:
        raise CodingError(
            f"{n_symbols} symbols requested but table indexes {table.n_elements}")
    if n_symbols == 0:
        if payload:
            raise BitstreamError("empty segment carries payload bytes")
        return np.zeros(0, dtype=np.int32)
    table.validate()
    if len(payload) < 8 or (len(payload) - 8) % 4:
        raise BitstreamError(f"malformed payload length {len(payload)}")
    x = struct.unpack_from("<Q", payload)[0]
    words = np.frombuffer(payload, dtype="<u4", offset=8).tolist()
    wi, n_words = 0, len(words)
    L, esc = table.L, table.escape_slot
    rows = table.rows.tolist()
    index = table.index.tolist()
    out = [0] * n_symbols
    try:
        for i in range(n_symbols):
            row = rows[index[i]]
            slot_val = x & _MASK
            slot = bisect_right(row, slot_val) - 1
            start = row[slot]
            x = (row[slot + 1] - start) * (x >> PRECISION) + slot_val - start
            if x < RANS_L:
                x = (x << _WORD_BITS) | words[wi]
                wi += 1
            if slot == esc:
                hi = x & _MASK
                x >>= PRECISION
                if x < RANS_L:
                    x = (x << _WORD_BITS) | words[wi]
                    wi += 1
                lo = x & _MASK
                x >>= PRECISION
                if x < RANS_L:
                    x = (x << _WORD_BITS) | words[wi]
                    wi += 1
                value = (hi << 16) | lo
                out[i] = value - (1 << 32) if value >= 1 << 31 else value
            else:
                out[i] = slot - L
    except IndexError:
        raise BitstreamError("payload exhausted before all symbols decoded")
    if x != RANS_L or wi != n_words:
        raise BitstreamError(
            f"corrupt stream: final state {x:#x} (expected {RANS_L:#x}), "
            f"{n_words - wi} words unconsumed")
    return np.asarray(out, dtype=np.int32)


@dataclass(frozen=True)
class CodedSegment:
    """One entropy-coded latent: symbol count, table range L, rANS payload."""
    n_symbols: int
    L: int
    payload: bytes

    def pack(self) -> bytes:
        if self.n_symbols >= 1 << 32 or self.L >= 1 << 16:
            raise CodingError("segment header field overflow")
        return _SEGMENT_HEADER.pack(self.n_symbols, self.L,
                                    len(self.payload)) + self.payload

    @classmethod
    def unpack(cls, buf: bytes, offset: int = 0):
        """Parse one segment at `offset` -> (segment, next offset)."""
        if offset + _SEGMENT_HEADER.size > len(buf):
            raise BitstreamError("truncated segment header")
        n_symbols, L, length = _SEGMENT_HEADER.unpack_from(buf, offset)
        offset += _SEGMENT_HEADER.size
        if offset + length > len(buf):
            raise BitstreamError("truncated segment payload")
        return cls(n_symbols, L, bytes(buf[offset:offset + length])), offset + length

    @property
    def n_bytes(self) -> int:
        return _SEGMENT_HEADER.size + len(self.payload)


def encode_segment(symbols: np.ndarray, table: CdfTable) -> CodedSegment:
    sym = _check_symbols(symbols)
    return CodedSegment(int(sym.size), table.L, encode_with_table(sym, table))


def decode_segment(segment: CodedSegment, table: CdfTable) -> np.ndarray:
    if segment.L != table.L:
        raise BitstreamError(
            f"segment coded with L={segment.L} but table has L={table.L}")
    return decode_with_table(segment.payload, segment.n_symbols, table)
