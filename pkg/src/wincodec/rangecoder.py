"""Integer range coder over 16-bit quantized CDFs.

64-bit low accumulator (carries resolved through a pending cache +
0xFF-run), 32-bit range, byte-wise renormalization at 2^24.  Totals are
always 2^16, so interval splits are shifts, never divisions.  The
flush rounds low up to the next 2^24 boundary inside the final interval
and emits only the bytes above that boundary; the decoder treats bytes
past the end of the stream as zeros, which makes the termination cost
one to two bytes per segment.  Integer-only throughout, so the byte
output is platform independent.
"""

from __future__ import annotations

import numpy as np

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
PRECISION = 16


class RangeEncoder:
    def __init__(self):
        self.low = 0  # up to 33 bits before carry resolution
        self.range = MASK32
        self._cache = None  # byte withheld until a carry can no longer reach it
        self._ff_run = 0
        self._out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            if self._cache is not None:
                self._out.append((self._cache + carry) & 0xFF)
                if self._ff_run:
                    filler = (0xFF + carry) & 0xFF
                    self._out.extend(bytes([filler]) * self._ff_run)
                    self._ff_run = 0
            self._cache = (self.low >> 24) & 0xFF
        else:
            self._ff_run += 1
        self.low = (self.low << 8) & MASK32

    def _renorm(self):
        while self.range < TOP:
            self._shift_low()
            self.range <<= 8

    def encode_symbol(self, symbol, table):
        """Advance the interval per table.cdf[symbol .. symbol+1]."""
        cdf = table.cdf
        if symbol < 0 or symbol >= len(cdf) - 1:
            raise ValueError(f"symbol {symbol} outside table alphabet")
        cum = int(cdf[symbol])
        freq = int(cdf[symbol + 1]) - cum
        r = self.range >> PRECISION
        self.low += cum * r
        self.range = freq * r
        self._renorm()

    def encode_raw(self, value, bits):
        """Uniform literal: 0 <= value < 2^bits, bits <= 16."""
        assert 0 <= value < (1 << bits)
        r = self.range >> bits
        self.low += value * r
        self.range = r
        self._renorm()

    def finish(self):
        """Terminate: commit the cheapest 2^24-aligned point of the interval."""
        self.low += (-self.low) % TOP  # in range: the interval spans >= 2^24
        self._shift_low()
        self._shift_low()
        out = bytes(self._out)
        # trailing zero bytes are implicit (decoder zero-fills past the end)
        return out.rstrip(b"\x00")


class RangeDecoder:
    def __init__(self, data):
        self._data = data
        self._pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self):
        b = self._data[self._pos] if self._pos < len(self._data) else 0
        self._pos += 1
        return b

    def _renorm(self):
        while self.range < TOP:
            self.code = ((self.code << 8) | self._byte()) & MASK32
            self.range <<= 8

    def decode_symbol(self, table):
        cdf = table.cdf
        r = self.range >> PRECISION
        v = self.code // r
        if v > (1 << PRECISION) - 1:
            v = (1 << PRECISION) - 1
        s = int(np.searchsorted(cdf, v, side="right")) - 1
        cum = int(cdf[s])
        freq = int(cdf[s + 1]) - cum
        self.code -= cum * r
        self.range = freq * r
        self._renorm()
        return s

    def decode_raw(self, bits):
        r = self.range >> bits
        v = self.code // r
        if v > (1 << bits) - 1:
            v = (1 << bits) - 1
        self.code -= v * r
        self.range = r
        self._renorm()
        return v
