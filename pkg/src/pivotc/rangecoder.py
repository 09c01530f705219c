"""Adaptive binary and static multi-symbol range coding.

The coder state lives in :class:`RangeEncoder` / :class:`RangeDecoder`
(compiled when available, see ``_kernels``). Probability models are plain
numpy arrays so the compiled loops can update them in place.
"""

from __future__ import annotations

import numpy as np

from ._kernels import BACKEND, RangeDecoder, RangeEncoder
from .errors import ModelError

__all__ = [
    "BACKEND",
    "AdaptiveBinaryModel",
    "FrequencyTable",
    "RangeEncoder",
    "RangeDecoder",
    "encode_bit",
    "decode_bit",
    "encode_symbol",
    "decode_symbol",
    "HALVE_THRESHOLD",
    "COUNT_STEP",
    "MAX_TOTAL",
]

HALVE_THRESHOLD = 2048
COUNT_STEP = 2
MAX_TOTAL = 1 << 16


class AdaptiveBinaryModel:
    """Bank of count-based bit models, one row (c0, c1) per context.

    Counts start at (1, 1) and each coded bit adds 2 to its side, so
    p1 = (n1 + 1/2) / (n + 1), the Krichevsky-Trofimov estimate. Both
    counts are halved (rounding up) once their sum exceeds 2048.
    """

    def __init__(self, contexts: int = 1):
        self.counts = np.ones((contexts, 2), dtype=np.int32)

    def __len__(self):
        return len(self.counts)

    def p1(self, ctx: int = 0) -> float:
        c0, c1 = self.counts[ctx]
        return float(c1) / float(c0 + c1)

    def copy(self) -> "AdaptiveBinaryModel":
        m = AdaptiveBinaryModel(len(self))
        m.counts[...] = self.counts
        return m


class FrequencyTable:
    """Static cumulative frequency table over symbols ``0..m-1``."""

    def __init__(self, freqs):
        freqs = np.asarray(freqs, dtype=np.int64)
        if freqs.ndim != 1 or len(freqs) == 0:
            raise ModelError("frequency table needs at least one symbol")
        if np.any(freqs < 0):
            raise ModelError("negative frequency")
        self.cum = np.concatenate([[0], np.cumsum(freqs)]).astype(np.int64)
        if self.total == 0 or self.total > MAX_TOTAL:
            raise ModelError(f"frequency total {self.total} outside (0, {MAX_TOTAL}]")

    @property
    def total(self) -> int:
        return int(self.cum[-1])

    @property
    def size(self) -> int:
        return len(self.cum) - 1

    def freq(self, sym: int) -> int:
        return int(self.cum[sym + 1] - self.cum[sym])

    @classmethod
    def from_probabilities(cls, probs, total: int = MAX_TOTAL) -> "FrequencyTable":
        """Quantize a probability vector; every symbol keeps frequency >= 1."""
        return cls(quantize_pmf(np.asarray(probs, dtype=np.float64)[None, :], total)[0])

    @classmethod
    def uniform(cls, m: int) -> "FrequencyTable":
        return cls(np.ones(m, dtype=np.int64))


def quantize_pmf(pmf: np.ndarray, total: int = MAX_TOTAL) -> np.ndarray:
    """Rows of probabilities -> integer frequencies, each >= 1, row sum <= total."""
    pmf = np.asarray(pmf, dtype=np.float64)
    if not np.all(np.isfinite(pmf)) or np.any(pmf < 0):
        raise ModelError("probabilities must be finite and non-negative")
    m = pmf.shape[-1]
    if m > total:
        raise ModelError("alphabet larger than frequency budget")
    sums = pmf.sum(axis=-1, keepdims=True)
    if np.any(sums <= 0):
        raise ModelError("probability row sums to zero")
    return np.floor(pmf / sums * (total - m)).astype(np.int64) + 1


def encode_bit(enc: RangeEncoder, model: AdaptiveBinaryModel, bit: int, ctx: int = 0) -> None:
    enc.encode_bit(model.counts, ctx, bit)


def decode_bit(dec: RangeDecoder, model: AdaptiveBinaryModel, ctx: int = 0) -> int:
    return dec.decode_bit(model.counts, ctx)


def encode_symbol(enc: RangeEncoder, table: FrequencyTable, sym: int) -> None:
    if not 0 <= sym < table.size:
        raise ModelError(f"symbol {sym} outside alphabet of size {table.size}")
    if table.freq(sym) == 0:
        raise ModelError(f"symbol {sym} has zero frequency")
    enc.encode_symbol(table.cum, sym)


def decode_symbol(dec: RangeDecoder, table: FrequencyTable) -> int:
    return dec.decode_symbol(table.cum)
