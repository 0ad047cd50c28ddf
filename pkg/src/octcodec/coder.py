"""Integer arithmetic coder over the 255 occupancy symbols.

32-bit state, 16-bit frequency tables. Straddling-the-midpoint renormalization
is deferred with pending bits, which plays the role of carry propagation. The
stream ends with a single 1 bit; the decoder reads zeros past the end.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import SourceExhaustedError

NUM_SYMBOLS = 255
SCALE_BITS = 16
TOTAL = 1 << SCALE_BITS
STATE_BITS = 32
_FULL = 1 << STATE_BITS
_HALF = _FULL >> 1
_QUARTER = _HALF >> 1
_MASK = _FULL - 1


class ProbabilityTable:
    """255 integer frequencies, each >= 1, summing to exactly 65536.

    Index ``s - 1`` belongs to symbol ``s``.
    """

    __slots__ = ("freq", "cum")

    def __init__(self, freq):
        freq = np.asarray(freq, dtype=np.int64)
        if freq.shape != (NUM_SYMBOLS,) or freq.min() < 1 or freq.sum() != TOTAL:
            raise ValueError("frequencies must be 255 values >= 1 summing to 65536")
        self.freq = freq
        self.cum = np.concatenate([[0], np.cumsum(freq)])

    def __eq__(self, other):
        return isinstance(other, ProbabilityTable) and np.array_equal(self.freq, other.freq)

    __hash__ = None

    def bits(self, symbol: int) -> float:
        return -math.log2(self.freq[symbol - 1] / TOTAL)


def quantize_distribution(p) -> ProbabilityTable:
    """Largest-remainder apportionment of 65536 with a floor of 1 per symbol.

    Every symbol first gets 1; the remaining mass is shared in proportion to
    ``p`` and leftover units go to the largest fractional parts, lower symbol
    first on ties.
    """
    p = np.asarray(p, dtype=np.float64)
    p = p / p.sum()
    spare = TOTAL - NUM_SYMBOLS
    share = p * spare
    base = np.floor(share).astype(np.int64)
    left = spare - int(base.sum())
    if left:
        order = np.argsort(-(share - base), kind="stable")
        base[order[:left]] += 1
    return ProbabilityTable(base + 1)


def quantize_distributions(ps):
    return [quantize_distribution(p) for p in ps]


def _check_symbol(symbol):
    if not 1 <= symbol <= NUM_SYMBOLS:
        raise ValueError(f"symbol {symbol} outside 1..255")


class BitSink:
    def __init__(self):
        self.buf = bytearray()
        self._acc = 0
        self._n = 0
        self.nbits = 0

    def write(self, bit):
        self._acc = (self._acc << 1) | bit
        self._n += 1
        self.nbits += 1
        if self._n == 8:
            self.buf.append(self._acc)
            self._acc = self._n = 0

    def getvalue(self) -> bytes:
        if self._n:
            return bytes(self.buf) + bytes([self._acc << (8 - self._n)])
        return bytes(self.buf)


class BitSource:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0  # bits consumed

    def read(self):
        byte = self.pos >> 3
        if byte >= len(self.data):
            # implicit trailing zeros; a pending run of 256 bits has probability ~2^-256
            if self.pos >= 8 * len(self.data) + STATE_BITS + 256:
                raise SourceExhaustedError("decoder ran past the end of the payload")
            self.pos += 1
            return 0
        bit = (self.data[byte] >> (7 - (self.pos & 7))) & 1
        self.pos += 1
        return bit


class Encoder:
    def __init__(self, sink: BitSink | None = None):
        self.sink = sink if sink is not None else BitSink()
        self.low = 0
        self.high = _MASK
        self.pending = 0

    def _emit(self, bit):
        self.sink.write(bit)
        for _ in range(self.pending):
            self.sink.write(bit ^ 1)
        self.pending = 0

    def encode(self, symbol: int, table: ProbabilityTable):
        _check_symbol(symbol)
        rng = self.high - self.low + 1
        lo = int(table.cum[symbol - 1])
        hi = int(table.cum[symbol])
        self.high = self.low + rng * hi // TOTAL - 1
        self.low = self.low + rng * lo // TOTAL
        while True:
            if self.high < _HALF:
                self._emit(0)
            elif self.low >= _HALF:
                self._emit(1)
                self.low -= _HALF
                self.high -= _HALF
            elif self.low >= _QUARTER and self.high < _HALF + _QUARTER:
                self.pending += 1
                self.low -= _QUARTER
                self.high -= _QUARTER
            else:
                break
            self.low = (self.low << 1) & _MASK
            self.high = ((self.high << 1) & _MASK) | 1

    def finish(self) -> bytes:
        # low < HALF <= high here, so HALF (a 1 then zeros) lies in the interval
        self.sink.write(1)
        return self.sink.getvalue()


class Decoder:
    def __init__(self, source):
        self.source = source if isinstance(source, BitSource) else BitSource(source)
        self.low = 0
        self.high = _MASK
        self.code = 0
        for _ in range(STATE_BITS):
            self.code = (self.code << 1) | self.source.read()

    def decode(self, table: ProbabilityTable) -> int:
        rng = self.high - self.low + 1
        value = ((self.code - self.low + 1) * TOTAL - 1) // rng
        symbol = int(np.searchsorted(table.cum, value, side="right"))  # cum[s-1] <= value < cum[s]
        lo = int(table.cum[symbol - 1])
        hi = int(table.cum[symbol])
        self.high = self.low + rng * hi // TOTAL - 1
        self.low = self.low + rng * lo // TOTAL
        while True:
            if self.high < _HALF:
                pass
            elif self.low >= _HALF:
                self.low -= _HALF
                self.high -= _HALF
                self.code -= _HALF
            elif self.low >= _QUARTER and self.high < _HALF + _QUARTER:
                self.low -= _QUARTER
                self.high -= _QUARTER
                self.code -= _QUARTER
            else:
                break
            self.low = (self.low << 1) & _MASK
            self.high = ((self.high << 1) & _MASK) | 1
            self.code = ((self.code << 1) & _MASK) | self.source.read()
        return symbol


def encode_symbols(symbols, tables, sink: BitSink | None = None) -> bytes:
    """Code ``symbols[i]`` with ``tables[i]``; returns the finished payload."""
    if len(symbols) != len(tables):
        raise ValueError("one table per symbol is required")
    enc = Encoder(sink)
    for s, t in zip(symbols, tables):
        enc.encode(int(s), t)
    return enc.finish()


def decode_symbol(dec: Decoder, table: ProbabilityTable) -> int:
    return dec.decode(table)


def decode_symbols(data: bytes, tables):
    dec = Decoder(data)
    return [dec.decode(t) for t in tables]


def cross_entropy_bits(symbols, tables) -> float:
    return float(sum(t.bits(int(s)) for s, t in zip(symbols, tables)))
