"""Pure-Python range coder kernels.

Bit-exact twin of ``_ckernels.pyx``; used when the compiled extension is
unavailable or ``PIVOTC_PURE=1`` is set.
"""

import numpy as np

from .errors import CorruptStreamError, TruncatedStreamError

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
PROB_BITS = 16
PROB_ONE = 1 << PROB_BITS
# counts start at (1, 1) and grow by 2: the KT estimator (n + 1/2) / (N + 1)
COUNT_STEP = 2
HALVE_AT = 2048

BACKEND = "python"


def _p0(c0, c1):
    p = (c0 << PROB_BITS) // (c0 + c1)
    if p < 1:
        return 1
    if p > PROB_ONE - 1:
        return PROB_ONE - 1
    return p


def _update(counts, ctx, bit):
    c0, c1 = counts[ctx]
    if bit:
        c1 += COUNT_STEP
    else:
        c0 += COUNT_STEP
    if c0 + c1 > HALVE_AT:
        c0 = (c0 + 1) >> 1
        c1 = (c1 + 1) >> 1
    counts[ctx] = [c0, c1]


def occupancy_context(bit_index, partial, bucket):
    return (((1 << bit_index) - 1 + partial) << 3) + (bucket - 1)


class RangeEncoder:
    """Carry-propagating range encoder (64-bit low, 32-bit range)."""

    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self._first = True

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            temp = self.cache
            while True:
                if self._first:
                    # leading byte is always zero; never stored
                    self._first = False
                else:
                    self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def _bit(self, p0, bit):
        bound = (self.range >> PROB_BITS) * p0
        if bit:
            self.low += bound
            self.range -= bound
        else:
            self.range = bound
        while self.range < TOP:
            self.range = (self.range << 8) & MASK32
            self._shift_low()

    def encode_bit(self, counts, ctx, bit):
        c0, c1 = int(counts[ctx, 0]), int(counts[ctx, 1])
        bit = 1 if bit else 0
        self._bit(_p0(c0, c1), bit)
        table = {ctx: [c0, c1]}
        _update(table, ctx, bit)
        counts[ctx, 0], counts[ctx, 1] = table[ctx]

    def encode_bits(self, counts, ctxs, bits):
        table = counts.tolist()
        for ctx, bit in zip(np.asarray(ctxs).tolist(), np.asarray(bits).tolist()):
            c0, c1 = table[ctx]
            self._bit(_p0(c0, c1), bit)
            _update(table, ctx, bit)
        counts[...] = table

    def encode_occupancy(self, counts, occupancy, buckets):
        table = counts.tolist()
        for byte, bucket in zip(np.asarray(occupancy).tolist(), np.asarray(buckets).tolist()):
            partial = 0
            for b in range(8):
                bit = (byte >> (7 - b)) & 1
                if b == 7 and partial == 0:
                    break  # forced: an occupied node has a child
                ctx = occupancy_context(b, partial, bucket)
                c0, c1 = table[ctx]
                self._bit(_p0(c0, c1), bit)
                _update(table, ctx, bit)
                partial = (partial << 1) | bit
        counts[...] = table

    def _freq(self, start, size, total):
        r = self.range // total
        self.low += r * start
        self.range = r * size
        while self.range < TOP:
            self.range = (self.range << 8) & MASK32
            self._shift_low()

    def encode_symbol(self, cum, sym):
        start = int(cum[sym])
        size = int(cum[sym + 1]) - start
        if size <= 0:
            raise CorruptStreamError(f"symbol {sym} has zero frequency")
        self._freq(start, size, int(cum[-1]))

    def encode_symbols(self, cum2d, rows, syms):
        tables = np.asarray(cum2d).tolist()
        for row, sym in zip(np.asarray(rows).tolist(), np.asarray(syms).tolist()):
            cum = tables[row]
            start = cum[sym]
            size = cum[sym + 1] - start
            if size <= 0:
                raise CorruptStreamError(f"symbol {sym} has zero frequency")
            self._freq(start, size, cum[-1])

    def finish(self):
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self):
        if self.pos >= len(self.data):
            raise TruncatedStreamError("range decoder read past end of stream")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def _norm(self):
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next()) & MASK32
            self.range = (self.range << 8) & MASK32

    def _bit(self, p0):
        bound = (self.range >> PROB_BITS) * p0
        if self.code < bound:
            self.range = bound
            bit = 0
        else:
            self.code -= bound
            self.range -= bound
            bit = 1
        self._norm()
        return bit

    def decode_bit(self, counts, ctx):
        c0, c1 = int(counts[ctx, 0]), int(counts[ctx, 1])
        bit = self._bit(_p0(c0, c1))
        table = {ctx: [c0, c1]}
        _update(table, ctx, bit)
        counts[ctx, 0], counts[ctx, 1] = table[ctx]
        return bit

    def decode_bits(self, counts, ctxs):
        table = counts.tolist()
        out = []
        for ctx in np.asarray(ctxs).tolist():
            c0, c1 = table[ctx]
            bit = self._bit(_p0(c0, c1))
            _update(table, ctx, bit)
            out.append(bit)
        counts[...] = table
        return np.array(out, dtype=np.uint8)

    def decode_occupancy(self, counts, buckets):
        table = counts.tolist()
        out = []
        for bucket in np.asarray(buckets).tolist():
            partial = 0
            for b in range(8):
                if b == 7 and partial == 0:
                    partial = 1
                    break
                ctx = occupancy_context(b, partial, bucket)
                c0, c1 = table[ctx]
                bit = self._bit(_p0(c0, c1))
                _update(table, ctx, bit)
                partial = (partial << 1) | bit
            out.append(partial)
        counts[...] = table
        return np.array(out, dtype=np.uint8)

    def _find(self, cum, total):
        r = self.range // total
        v = self.code // r
        if v >= total:
            raise CorruptStreamError("decoded value outside frequency table")
        lo, hi = 0, len(cum) - 2
        while lo < hi:
            mid = (lo + hi + 1) >> 1
            if cum[mid] <= v:
                lo = mid
            else:
                hi = mid - 1
        start = cum[lo]
        self.code -= r * start
        self.range = r * (cum[lo + 1] - start)
        self._norm()
        return lo

    def decode_symbol(self, cum):
        cum = [int(c) for c in cum]
        return self._find(cum, cum[-1])

    def decode_symbols(self, cum2d, rows):
        tables = np.asarray(cum2d).tolist()
        out = [self._find(tables[row], tables[row][-1]) for row in np.asarray(rows).tolist()]
        return np.array(out, dtype=np.int64)
