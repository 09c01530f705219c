# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled range coder kernels; bit-exact with ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint8_t, uint32_t, uint64_t, int32_t, int64_t
from libc.stdlib cimport malloc, realloc, free

from .errors import CorruptStreamError, TruncatedStreamError

cnp.import_array()

cdef enum:
    TOP = 16777216
    PROB_BITS = 16
    PROB_ONE = 65536
    COUNT_STEP = 2
    HALVE_AT = 2048

BACKEND = "cython"


cdef inline uint32_t _p0(int32_t c0, int32_t c1) noexcept nogil:
    cdef uint32_t p = (<uint32_t>c0 << PROB_BITS) // <uint32_t>(c0 + c1)
    if p < 1:
        return 1
    if p > PROB_ONE - 1:
        return PROB_ONE - 1
    return p


cdef inline void _update(int32_t[:, ::1] counts, Py_ssize_t ctx, int bit) noexcept nogil:
    if bit:
        counts[ctx, 1] += COUNT_STEP
    else:
        counts[ctx, 0] += COUNT_STEP
    if counts[ctx, 0] + counts[ctx, 1] > HALVE_AT:
        counts[ctx, 0] = (counts[ctx, 0] + 1) >> 1
        counts[ctx, 1] = (counts[ctx, 1] + 1) >> 1


cdef inline Py_ssize_t _occ_ctx(int b, int partial, int bucket) noexcept nogil:
    return ((((1 << b) - 1) + partial) << 3) + (bucket - 1)


def occupancy_context(bit_index, partial, bucket):
    return _occ_ctx(bit_index, partial, bucket)


cdef class RangeEncoder:
    cdef uint64_t low
    cdef uint32_t rng
    cdef uint8_t cache
    cdef uint64_t cache_size
    cdef uint8_t *buf
    cdef Py_ssize_t size, cap
    cdef bint first

    def __cinit__(self):
        self.low = 0
        self.rng = 0xFFFFFFFF
        self.cache = 0
        self.cache_size = 1
        self.cap = 256
        self.size = 0
        self.first = True
        self.buf = <uint8_t *>malloc(self.cap)
        if self.buf == NULL:
            raise MemoryError()

    def __dealloc__(self):
        free(self.buf)

    cdef int _put(self, uint8_t b) except -1:
        cdef uint8_t *nb
        if self.size == self.cap:
            nb = <uint8_t *>realloc(self.buf, self.cap * 2)
            if nb == NULL:
                raise MemoryError()
            self.buf = nb
            self.cap *= 2
        self.buf[self.size] = b
        self.size += 1
        return 0

    cdef int _shift_low(self) except -1:
        cdef uint8_t temp
        cdef uint8_t carry
        if self.low < 0xFF000000 or self.low > 0xFFFFFFFF:
            carry = <uint8_t>(self.low >> 32)
            temp = self.cache
            while True:
                if self.first:
                    self.first = False
                else:
                    self._put(<uint8_t>(temp + carry))
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = <uint8_t>((self.low >> 24) & 0xFF)
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8
        return 0

    cdef int _bit(self, uint32_t p0, int bit) except -1:
        cdef uint32_t bound = (self.rng >> PROB_BITS) * p0
        if bit:
            self.low += bound
            self.rng -= bound
        else:
            self.rng = bound
        while self.rng < TOP:
            self.rng <<= 8
            self._shift_low()
        return 0

    cdef int _freq(self, uint32_t start, uint32_t size, uint32_t total) except -1:
        cdef uint32_t r = self.rng // total
        self.low += <uint64_t>r * start
        self.rng = r * size
        while self.rng < TOP:
            self.rng <<= 8
            self._shift_low()
        return 0

    def encode_bit(self, int32_t[:, ::1] counts, Py_ssize_t ctx, bit):
        cdef int b = 1 if bit else 0
        self._bit(_p0(counts[ctx, 0], counts[ctx, 1]), b)
        _update(counts, ctx, b)

    def encode_bits(self, int32_t[:, ::1] counts, ctxs, bits):
        cdef int64_t[::1] c = np.ascontiguousarray(ctxs, dtype=np.int64)
        cdef uint8_t[::1] v = np.ascontiguousarray(bits, dtype=np.uint8)
        cdef Py_ssize_t i, ctx
        cdef int b
        for i in range(c.shape[0]):
            ctx = c[i]
            b = 1 if v[i] else 0
            self._bit(_p0(counts[ctx, 0], counts[ctx, 1]), b)
            _update(counts, ctx, b)

    def encode_occupancy(self, int32_t[:, ::1] counts, occupancy, buckets):
        cdef uint8_t[::1] occ = np.ascontiguousarray(occupancy, dtype=np.uint8)
        cdef uint8_t[::1] bk = np.ascontiguousarray(buckets, dtype=np.uint8)
        cdef Py_ssize_t i, ctx
        cdef int b, bit, partial, byte
        for i in range(occ.shape[0]):
            byte = occ[i]
            partial = 0
            for b in range(8):
                bit = (byte >> (7 - b)) & 1
                if b == 7 and partial == 0:
                    break
                ctx = _occ_ctx(b, partial, bk[i])
                self._bit(_p0(counts[ctx, 0], counts[ctx, 1]), bit)
                _update(counts, ctx, bit)
                partial = (partial << 1) | bit

    def encode_symbol(self, cum, Py_ssize_t sym):
        cdef int64_t[::1] c = np.ascontiguousarray(cum, dtype=np.int64)
        cdef int64_t start = c[sym]
        cdef int64_t size = c[sym + 1] - start
        if size <= 0:
            raise CorruptStreamError(f"symbol {sym} has zero frequency")
        self._freq(<uint32_t>start, <uint32_t>size, <uint32_t>c[c.shape[0] - 1])

    def encode_symbols(self, cum2d, rows, syms):
        cdef int64_t[:, ::1] t = np.ascontiguousarray(cum2d, dtype=np.int64)
        cdef int64_t[::1] r = np.ascontiguousarray(rows, dtype=np.int64)
        cdef int64_t[::1] s = np.ascontiguousarray(syms, dtype=np.int64)
        cdef Py_ssize_t i, m = t.shape[1] - 1
        cdef int64_t start, size
        for i in range(r.shape[0]):
            start = t[r[i], s[i]]
            size = t[r[i], s[i] + 1] - start
            if size <= 0:
                raise CorruptStreamError(f"symbol {s[i]} has zero frequency")
            self._freq(<uint32_t>start, <uint32_t>size, <uint32_t>t[r[i], m])

    def finish(self):
        cdef int i
        for i in range(5):
            self._shift_low()
        return bytes(self.buf[:self.size])


cdef class RangeDecoder:
    cdef bytes data
    cdef const uint8_t *p
    cdef Py_ssize_t n
    cdef public Py_ssize_t pos
    cdef uint32_t rng
    cdef uint32_t code

    def __init__(self, data):
        self.data = bytes(data)
        self.p = self.data
        self.n = len(self.data)
        self.pos = 0
        self.rng = 0xFFFFFFFF
        self.code = 0
        cdef int i
        for i in range(4):
            self.code = (self.code << 8) | self._next()

    cdef inline uint32_t _next(self) except? 0xFFFFFFFF:
        if self.pos >= self.n:
            raise TruncatedStreamError("range decoder read past end of stream")
        self.pos += 1
        return self.p[self.pos - 1]

    cdef int _norm(self) except -1:
        while self.rng < TOP:
            self.code = (self.code << 8) | self._next()
            self.rng <<= 8
        return 0

    cdef int _bit(self, uint32_t p0) except -1:
        cdef uint32_t bound = (self.rng >> PROB_BITS) * p0
        cdef int bit
        if self.code < bound:
            self.rng = bound
            bit = 0
        else:
            self.code -= bound
            self.rng -= bound
            bit = 1
        self._norm()
        return bit

    cdef Py_ssize_t _find(self, int64_t[:] cum) except -1:
        cdef Py_ssize_t m = cum.shape[0] - 1
        cdef uint32_t total = <uint32_t>cum[m]
        cdef uint32_t r = self.rng // total
        cdef uint32_t v = self.code // r
        cdef Py_ssize_t lo = 0, hi = m - 1, mid
        if v >= total:
            raise CorruptStreamError("decoded value outside frequency table")
        while lo < hi:
            mid = (lo + hi + 1) >> 1
            if cum[mid] <= v:
                lo = mid
            else:
                hi = mid - 1
        self.code -= r * <uint32_t>cum[lo]
        self.rng = r * <uint32_t>(cum[lo + 1] - cum[lo])
        self._norm()
        return lo

    def decode_bit(self, int32_t[:, ::1] counts, Py_ssize_t ctx):
        cdef int bit = self._bit(_p0(counts[ctx, 0], counts[ctx, 1]))
        _update(counts, ctx, bit)
        return bit

    def decode_bits(self, int32_t[:, ::1] counts, ctxs):
        cdef int64_t[::1] c = np.ascontiguousarray(ctxs, dtype=np.int64)
        out = np.empty(c.shape[0], dtype=np.uint8)
        cdef uint8_t[::1] o = out
        cdef Py_ssize_t i, ctx
        cdef int bit
        for i in range(c.shape[0]):
            ctx = c[i]
            bit = self._bit(_p0(counts[ctx, 0], counts[ctx, 1]))
            _update(counts, ctx, bit)
            o[i] = bit
        return out

    def decode_occupancy(self, int32_t[:, ::1] counts, buckets):
        cdef uint8_t[::1] bk = np.ascontiguousarray(buckets, dtype=np.uint8)
        out = np.empty(bk.shape[0], dtype=np.uint8)
        cdef uint8_t[::1] o = out
        cdef Py_ssize_t i, ctx
        cdef int b, bit, partial
        for i in range(bk.shape[0]):
            partial = 0
            for b in range(8):
                if b == 7 and partial == 0:
                    partial = 1
                    break
                ctx = _occ_ctx(b, partial, bk[i])
                bit = self._bit(_p0(counts[ctx, 0], counts[ctx, 1]))
                _update(counts, ctx, bit)
                partial = (partial << 1) | bit
            o[i] = partial
        return out

    def decode_symbol(self, cum):
        cdef int64_t[::1] c = np.ascontiguousarray(cum, dtype=np.int64)
        return self._find(c)

    def decode_symbols(self, cum2d, rows):
        cdef int64_t[:, ::1] t = np.ascontiguousarray(cum2d, dtype=np.int64)
        cdef int64_t[::1] r = np.ascontiguousarray(rows, dtype=np.int64)
        out = np.empty(r.shape[0], dtype=np.int64)
        cdef int64_t[::1] o = out
        cdef Py_ssize_t i
        for i in range(r.shape[0]):
            o[i] = self._find(t[r[i]])
        return out
