"""Carry-less range coder and the PICM bitstream container.

The coder keeps a 64-bit (low, range) pair and renormalizes 16 bits at a
time.  Instead of propagating carries into already-emitted output, the
range is clipped whenever the interval straddles a renormalization
boundary, which costs a fraction of a bit per event and keeps emitted
bytes final.  All tables use a fixed 2^16 total frequency, so the
per-symbol range split is a shift, not a division.

Out-of-table values are coded as an escape symbol followed by the raw
32-bit value in bypass mode; with the default tail mass this happens on
the order of once per ten thousand symbols.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .entropy import CdfTable, TABLE_PRECISION

_MASK = (1 << 64) - 1
_TOP = 1 << 48
_BOT = 1 << 32


class CoderError(ValueError):
    """Usage errors: mismatched inputs, malformed tables."""


class StreamError(RuntimeError):
    """Decode-time failures: truncation, corruption, wrong model."""


class RangeEncoder:
    def __init__(self):
        self._low = 0
        self._range = _MASK
        self._out = bytearray()

    def _normalize(self):
        low, rng = self._low, self._range
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            self._out += struct.pack(">H", (low >> 48) & 0xFFFF)
            low = (low << 16) & _MASK
            rng = (rng << 16) & _MASK
        self._low, self._range = low, rng

    def encode(self, cum_lo, cum_hi):
        """Encode a symbol occupying [cum_lo, cum_hi) of the 2^16 frequency space."""
        r = self._range >> TABLE_PRECISION
        self._low = (self._low + r * cum_lo) & _MASK
        self._range = r * (cum_hi - cum_lo)
        self._normalize()

    def encode_bypass(self, value, nbits):
        """Encode raw bits at uniform probability, 16 bits per chunk at most."""
        while nbits > 0:
            take = min(16, nbits)
            nbits -= take
            chunk = (value >> nbits) & ((1 << take) - 1)
            r = self._range >> take
            self._low = (self._low + r * chunk) & _MASK
            self._range = r
            self._normalize()

    def finish(self):
        for _ in range(4):
            self._out += struct.pack(">H", (self._low >> 48) & 0xFFFF)
            self._low = (self._low << 16) & _MASK
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data):
        self._data = data
        self._pos = 0
        self._low = 0
        self._range = _MASK
        self._code = 0
        for _ in range(4):
            self._code = (self._code << 16) | self._read16()

    def _read16(self):
        if self._pos + 2 > len(self._data):
            raise StreamError("bitstream truncated")
        (v,) = struct.unpack_from(">H", self._data, self._pos)
        self._pos += 2
        return v

    def _normalize(self):
        low, rng, code = self._low, self._range, self._code
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            code = ((code << 16) & _MASK) | self._read16()
            low = (low << 16) & _MASK
            rng = (rng << 16) & _MASK
        self._low, self._range, self._code = low, rng, code

    def decode(self, cum):
        """Decode one symbol against a cumulative frequency array."""
        r = self._range >> TABLE_PRECISION
        dv = (self._code - self._low) & _MASK
        target = min(dv // r, (1 << TABLE_PRECISION) - 1)
        sym = int(np.searchsorted(cum, target, side="right")) - 1
        self._low = (self._low + r * int(cum[sym])) & _MASK
        self._range = r * int(cum[sym + 1] - cum[sym])
        self._normalize()
        return sym

    def decode_bypass(self, nbits):
        value = 0
        while nbits > 0:
            take = min(16, nbits)
            nbits -= take
            r = self._range >> take
            dv = (self._code - self._low) & _MASK
            chunk = min(dv // r, (1 << take) - 1)
            self._low = (self._low + r * chunk) & _MASK
            self._range = r
            self._normalize()
            value = (value << take) | chunk
        return value


def rc_encode(symbols, tables):
    """Encode integer values against a parallel sequence of CdfTables."""
    symbols = np.asarray(symbols)
    if len(symbols) != len(tables):
        raise CoderError(f"{len(symbols)} symbols but {len(tables)} tables")
    if len(symbols) == 0:
        return b""
    enc = RangeEncoder()
    for value, table in zip(symbols, tables):
        v = int(value)
        s = table.symbol_of(v)
        cum = table.cum
        enc.encode(int(cum[s]), int(cum[s + 1]))
        if s == 0 or s == table.n_regular + 1:
            enc.encode_bypass(v & 0xFFFFFFFF, 32)
    return enc.finish()


def rc_decode(data, tables, count=None):
    """Decode ``count`` integers (defaults to len(tables)) from a byte string."""
    if count is None:
        count = len(tables)
    if count != len(tables):
        raise CoderError(f"asked for {count} symbols but got {len(tables)} tables")
    if count == 0:
        if data:
            raise StreamError("nonempty payload for empty symbol sequence")
        return np.empty(0, dtype=np.int64)
    dec = RangeDecoder(data)
    out = np.empty(count, dtype=np.int64)
    for i, table in enumerate(tables):
        s = dec.decode(table.cum)
        if s == 0 or s == table.n_regular + 1:
            raw = dec.decode_bypass(32)
            if raw >= 1 << 31:
                raw -= 1 << 32
            out[i] = raw
        else:
            out[i] = table.value_of(s)
    return out


def table_rate_bits(symbols, tables):
    """Exact information content of symbols under the quantized tables.

    This is the quantity the coder-overhead bound is stated against: escapes
    contribute their table probability plus 32 bypass bits.
    """
    symbols = np.asarray(symbols)
    if len(symbols) != len(tables):
        raise CoderError(f"{len(symbols)} symbols but {len(tables)} tables")
    total = 0.0
    scale = float(1 << TABLE_PRECISION)
    for value, table in zip(symbols, tables):
        s = table.symbol_of(int(value))
        freq = float(table.cum[s + 1] - table.cum[s])
        total += -np.log2(freq / scale)
        if s == 0 or s == table.n_regular + 1:
            total += 32.0
    return total


# -- bitstream container --------------------------------------------------------

MAGIC = b"PICM"
VERSION = 1
_HEADER = struct.Struct("<4sB3H3H3HBIII")


@dataclass
class Bitstream:
    """One coded feature tensor: header fields plus two coded segments.

    The CRC32 covers the decoded symbol payload (hyper segment then latent
    segment, as little-endian int32), so decoding with the wrong model or a
    corrupted stream fails loudly even though the coded bytes themselves
    parse.
    """

    feature_dims: tuple
    y_dims: tuple
    z_dims: tuple
    lambda_tag: int
    z_bytes: bytes
    y_bytes: bytes
    crc: int

    @staticmethod
    def symbol_crc(z_symbols, y_symbols):
        blob = np.asarray(z_symbols, dtype="<i4").tobytes()
        blob += np.asarray(y_symbols, dtype="<i4").tobytes()
        return zlib.crc32(blob)

    def tobytes(self):
        for dims in (self.feature_dims, self.y_dims, self.z_dims):
            if len(dims) != 3 or any(not 0 < d <= 0xFFFF for d in dims):
                raise CoderError(f"bad dims {dims}")
        head = _HEADER.pack(
            MAGIC, VERSION,
            *self.feature_dims, *self.y_dims, *self.z_dims,
            self.lambda_tag, len(self.z_bytes), len(self.y_bytes), self.crc,
        )
        return head + self.z_bytes + self.y_bytes

    @staticmethod
    def frombytes(blob):
        if len(blob) < _HEADER.size:
            raise StreamError("stream shorter than header")
        fields = _HEADER.unpack_from(blob, 0)
        magic, version = fields[0], fields[1]
        if magic != MAGIC:
            raise StreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise StreamError(f"unsupported stream version {version}")
        fdims = tuple(fields[2:5])
        ydims = tuple(fields[5:8])
        zdims = tuple(fields[8:11])
        lam_tag, z_len, y_len, crc = fields[11:15]
        off = _HEADER.size
        if len(blob) != off + z_len + y_len:
            raise StreamError(
                f"stream length {len(blob)} != header-declared {off + z_len + y_len}"
            )
        return Bitstream(
            feature_dims=fdims, y_dims=ydims, z_dims=zdims, lambda_tag=lam_tag,
            z_bytes=blob[off:off + z_len], y_bytes=blob[off + z_len:], crc=crc,
        )

    def verify_symbols(self, z_symbols, y_symbols):
        if self.symbol_crc(z_symbols, y_symbols) != self.crc:
            raise StreamError("payload CRC mismatch: corrupted stream or wrong model")
