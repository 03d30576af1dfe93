"""Fixed-width arithmetic coding of sparse binary category rows.

Each category row (one bit per item in the category) is coded with an adaptive
Krichevsky-Trofimov model and framed into ``width`` bits as::

    0 ... 0  1  c_1 c_2 ... c_L

where ``c`` is the shortest binary fraction inside the row's coding interval and
the single ``1`` is a sentinel.  An empty category (``n == 0``) is the all-zero
frame.  Decoding strips the zero prefix and the sentinel, reads ``c`` as an
exact binary fraction (so a longer or shorter zero prefix decodes identically),
and is total: every bit pattern decodes to some row, which matters because the
generator emits arbitrary patterns.

All arithmetic is exact (Python integers), so coding is bit-identical across
platforms.
"""
from __future__ import annotations

import hashlib
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import BinaryIO, Iterable, Sequence

import numpy as np
import gmpy2
from gmpy2 import mpz
from numba import njit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_bit_array

RGC_MAGIC = b"RGC1"
DEFAULT_WIDTH = 300


class CodeOverflow(ValueError):
    """The coded row needs more bits than the frame width allows."""

    def __init__(self, needed, width, row_index=None, n=None, ones=None):
        self.needed = needed
        self.width = width
        self.row_index = row_index
        self.n = n
        self.ones = ones
        where = "" if row_index is None else f" in row {row_index}"
        density = "" if not n else f" (n={n}, ones={ones}, density={ones / n:.4f})"
        super().__init__(
            f"code needs {needed} bits but width is {width}{where}{density}"
        )


@dataclass(frozen=True)
class CodecConfig:
    width: int = DEFAULT_WIDTH
    prior_strength: Fraction = Fraction(1, 2)

    def __post_init__(self):
        object.__setattr__(self, "prior_strength", Fraction(self.prior_strength))
        if self.width < 2:
            raise ValueError("width must be >= 2 (sentinel plus one payload bit)")
        if self.prior_strength <= 0:
            raise ValueError("prior_strength must be positive")


def _prior_terms(prior) -> tuple[int, int]:
    prior = Fraction(prior)
    if prior <= 0:
        raise ValueError("prior_strength must be positive")
    return prior.numerator, prior.denominator


def _ones_positions(row) -> np.ndarray:
    row = np.asarray(row)
    if row.ndim != 1:
        raise ValueError("row must be one-dimensional")
    ones = np.flatnonzero(row)
    if ones.size and not (row[ones] == 1).all():
        raise ValueError("row values must be 0 or 1")
    return ones


def _span(start: int, count: int, step: int) -> int:
    """Product of the arithmetic progression start, start+step, ..."""
    if count <= _LEAF:
        return math.prod(range(start, start + count * step, step))
    last = start + (count - 1) * step
    if step == 1:
        return gmpy2.divexact(_fac(last), _fac(start - 1))
    if step == 2:
        if start % 2:
            return gmpy2.divexact(_double_fac(last), _double_fac(max(start - 2, 0)))
        return gmpy2.divexact(_fac(last // 2), _fac(start // 2 - 1)) << count
    # balanced split keeps the multiplications large-by-large (fast in GMP)
    half = count // 2
    return mpz(_span(start, half, step)) * _span(start + half * step, count - half, step)


_LEAF = 24
_fac = lru_cache(maxsize=8192)(gmpy2.fac)
_double_fac = lru_cache(maxsize=8192)(gmpy2.double_fac)


def _fold(ones, k0: int, k1: int, zeros: int, seen_ones: int, pn: int, pd: int):
    """Affine map (A, B, C) of coding steps k0..k1 with ones at ``ones``.

    Starting from an interval (low, size) over a common denominator ``denom``,
    the steps produce ``low*A + size*B``, ``size*C`` over ``denom*A``.  Zero runs
    are folded with one C-level product each.
    """
    A = _span(k0 * pd + 2 * pn, k1 - k0, pd)
    B, C = mpz(0), mpz(1)
    k, z = k0, zeros
    for pos in ones:
        run = pos - k
        if run:
            B *= _span(k * pd + 2 * pn, run, pd)
            C *= _span(z * pd + pn, run, pd)
            z += run
            k = pos
        B = B * (k * pd + 2 * pn) + C * (z * pd + pn)
        C *= seen_ones * pd + pn
        seen_ones += 1
        k += 1
    run = k1 - k
    if run:
        B *= _span(k * pd + 2 * pn, run, pd)
        C *= _span(z * pd + pn, run, pd)
    return A, B, C


def _interval(ones: Sequence[int], n: int, pn: int, pd: int):
    """Coding interval of a row as integers (low, size, denominator)."""
    # Fold fixed-size groups of ones, then compose the affine maps pairwise so
    # the big-integer products stay balanced.
    maps = []
    k = zeros = 0
    for g in range(0, len(ones), _GROUP):
        group = ones[g:g + _GROUP]
        end = group[-1] + 1 if g + _GROUP < len(ones) else n
        maps.append(_fold(group, k, end, zeros, g, pn, pd))
        zeros += (end - k) - len(group)
        k = end
    if not maps:
        maps.append(_fold((), 0, n, 0, 0, pn, pd))
    maps = [(mpz(A), mpz(B), mpz(C)) for A, B, C in maps]
    while len(maps) > 1:
        merged = []
        for i in range(0, len(maps) - 1, 2):
            (A1, B1, C1), (A2, B2, C2) = maps[i], maps[i + 1]
            merged.append((A1 * A2, B1 * A2 + C1 * B2, C1 * C2))
        if len(maps) % 2:
            merged.append(maps[-1])
        maps = merged
    A, B, C = maps[0]
    return B, C, A


_GROUP = 16


def _shortest_fraction(low: int, size: int, denom: int) -> tuple[int, int]:
    """Shortest m / 2**L with low/denom <= m/2**L < (low+size)/denom."""
    if low == 0:
        return 0, 0
    high = low + size

    def fits(length):
        m = -((-low << length) // denom)
        return m * denom < high << length, m

    ratio = -(-denom // size)
    hi_len = (ratio - 1).bit_length()
    lo_len = 1
    while lo_len < hi_len:
        mid = (lo_len + hi_len) // 2
        if fits(mid)[0]:
            hi_len = mid
        else:
            lo_len = mid + 1
    return fits(hi_len)[1], hi_len


def code_length(row, prior_strength=Fraction(1, 2)) -> int:
    """Number of payload bits (excluding the sentinel) needed to code ``row``."""
    ones = _ones_positions(row)
    n = len(row)
    if n == 0:
        return 0
    pn, pd = _prior_terms(prior_strength)
    _, length = _shortest_fraction(*_interval(ones.tolist(), n, pn, pd))
    return length


def required_width(n: int, ones: int) -> int:
    """Frame width that is sufficient for any row of length ``n`` with ``ones`` set bits.

    Uses the standard KT redundancy bound (at most 0.5*log2(n) + 1 bits above the
    empirical entropy) plus one bit of code slack and the sentinel.
    """
    if n == 0:
        return 2
    k = min(ones, n)
    entropy = 0.0
    for c in (k, n - k):
        if c:
            entropy -= c * math.log2(c / n)
    return int(math.ceil(entropy + 0.5 * math.log2(n) + 1)) + 2


def encode_row(row, width: int = DEFAULT_WIDTH, prior_strength=Fraction(1, 2)) -> np.ndarray:
    """Arithmetic-code a binary row into a fixed-width frame (uint8 array)."""
    ones = _ones_positions(row)
    n = len(row)
    if width < 2:
        raise ValueError("width must be >= 2")
    out = np.zeros(width, dtype=np.uint8)
    if n == 0:
        return out
    pn, pd = _prior_terms(prior_strength)
    m, length = _shortest_fraction(*_interval(ones.tolist(), n, pn, pd))
    if length + 1 > width:
        raise CodeOverflow(length + 1, width, n=n, ones=len(ones))
    out[width - length - 1] = 1
    if length:
        raw = np.frombuffer(int(m).to_bytes((length + 7) // 8, "big"), dtype=np.uint8)
        out[width - length:] = np.unpackbits(raw)[-length:]
    return out


def decode_row(bits, n: int, prior_strength=Fraction(1, 2)) -> np.ndarray:
    """Decode ``n`` symbols from a frame; never fails on any bit pattern."""
    if n < 0:
        raise ValueError("n must be non-negative")
    bits = np.asarray(bits).astype(bool, copy=False).ravel()
    out = np.zeros(n, dtype=np.uint8)
    nz = np.flatnonzero(bits)
    if nz.size == 0 or n == 0:
        return out
    code = bits[nz[0] + 1:]
    length = code.size
    value = _bits_to_int(code)
    if value == 0:
        return out
    pn, pd = _prior_terms(prior_strength)
    # The code value's position relative to the current interval is the exact
    # rational num/den.  A compiled float loop decides symbols while its error
    # bound allows; each decided stretch is then applied exactly, and a step the
    # float loop cannot call is taken with integers.
    num, den = mpz(value), mpz(1) << length
    k = zeros = ones = 0
    while k < n and num:
        t = _ratio(num, den)
        k1, zeros1, ones1, status = _float_decide(
            t, t * _EPS, k, n, zeros, ones, float(pn), float(pd), out)
        if k1 > k:
            positions = (np.flatnonzero(out[k:k1]) + k).tolist()
            A, B, C = _fold(positions, k, k1, zeros, ones, pn, pd)
            num, den = num * mpz(A) - den * mpz(B), den * mpz(C)
            k, zeros, ones = k1, zeros1, ones1
        if status == _UNDECIDED:
            d = k * pd + 2 * pn
            lhs = num * d
            rhs = den * (zeros * pd + pn)
            if lhs < rhs:
                num, den = lhs, rhs
                zeros += 1
            else:
                out[k] = 1
                num = lhs - rhs
                den *= ones * pd + pn
                ones += 1
            k += 1
    return out


def _bits_to_int(bits) -> int:
    """Big-endian integer value of a bool array."""
    if bits.size == 0:
        return 0
    pad = (-bits.size) % 8
    return int.from_bytes(np.packbits(bits).tobytes(), "big") >> pad


def _ratio(num, den) -> float:
    """num/den as a float with relative error below 2**-60 (0 < num < den)."""
    shift = num.bit_length() - 64
    if shift > 0:
        return int(num >> shift) / int(den >> shift)
    return int(num) / int(den)


# float decisions: unit roundoff with headroom; tiny positions go to integers
_EPS = 2.0 ** -50
_TINY = 1e-200
_MAX_ERR = 1e-4
_DONE, _RESYNC, _UNDECIDED = 0, 1, 2


@njit(cache=True)
def _float_decide(t, err, k, n, zeros, ones, pn, pd, out):
    while k < n:
        d = k * pd + 2.0 * pn
        n0 = zeros * pd + pn
        x = t * d
        margin = x - n0
        if t <= _TINY or abs(margin) <= err * d + (x + n0) * _EPS:
            return k, zeros, ones, _UNDECIDED
        if margin < 0.0:
            t = x / n0
            err = err * d / n0 + t * _EPS
            zeros += 1
        else:
            n1 = ones * pd + pn
            t = margin / n1
            err = err * d / n1 + (x + n0) / n1 * _EPS
            out[k] = 1
            ones += 1
        k += 1
        if err > _MAX_ERR:
            return k, zeros, ones, _RESYNC
    return k, zeros, ones, _DONE



# --------------------------------------------------------------------------
# Matrix level
# --------------------------------------------------------------------------

def _row_from_positions(positions, n):
    row = np.zeros(n, dtype=np.uint8)
    if len(positions):
        idx = np.asarray(sorted(positions), dtype=np.int64)
        if idx.min() < 0 or idx.max() >= n:
            raise ValueError("item position out of range for category")
        row[idx] = 1
    return row


def encode_sparse(rows: Sequence[Iterable[int]], sizes: Sequence[int],
                  cfg: CodecConfig = CodecConfig()) -> np.ndarray:
    """Encode per-category sets of item positions into an (r, W) bit matrix."""
    if len(rows) != len(sizes):
        raise ValueError(f"got {len(rows)} rows for {len(sizes)} categories")
    out = np.zeros((len(sizes), cfg.width), dtype=np.uint8)
    empty_cache: dict[int, np.ndarray] = {}
    for i, (positions, n) in enumerate(zip(rows, sizes)):
        positions = list(positions)
        if not positions:
            if n not in empty_cache:
                empty_cache[n] = encode_row(np.zeros(n, np.uint8), cfg.width, cfg.prior_strength)
            out[i] = empty_cache[n]
            continue
        try:
            out[i] = encode_row(_row_from_positions(positions, n), cfg.width, cfg.prior_strength)
        except CodeOverflow as exc:
            raise CodeOverflow(exc.needed, exc.width, row_index=i, n=n, ones=len(positions)) from None
    return out


def encode_matrix(pair, catalog, cfg: CodecConfig = CodecConfig()):
    """Encode both channels of an interaction pair into (r, W) bit matrices."""
    sizes = catalog.sizes
    r = len(sizes)
    return (encode_sparse(pair.rows("V", r), sizes, cfg),
            encode_sparse(pair.rows("B", r), sizes, cfg))


def _decode_rows(args):
    coded, sizes, prior = args
    return [np.flatnonzero(decode_row(bits, n, prior)) for bits, n in zip(coded, sizes)]


def decode_matrix(coded, sizes: Sequence[int], cfg: CodecConfig = CodecConfig(),
                  workers: int = 1) -> list[np.ndarray]:
    """Decode an (r, W) bit matrix into per-category arrays of item positions.

    Rows are independent; with ``workers > 1`` they are decoded in a process
    pool in contiguous chunks and reassembled in row order, so the output does
    not depend on the worker count.
    """
    coded = check_bit_array(coded, ndim=2, name="coded")
    if coded.shape[0] != len(sizes):
        raise ValueError(f"coded matrix has {coded.shape[0]} rows, catalog has {len(sizes)}")
    if workers <= 1 or len(sizes) < 2 * workers:
        return _decode_rows((coded, sizes, cfg.prior_strength))
    bounds = np.linspace(0, len(sizes), workers + 1).astype(int)
    jobs = [(coded[a:b], list(sizes[a:b]), cfg.prior_strength)
            for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_decode_rows, jobs))
    return [row for part in parts for row in part]


# --------------------------------------------------------------------------
# On-disk coded tensors
# --------------------------------------------------------------------------

def catalog_digest(sizes: Sequence[int], categories: Sequence[str] = ()) -> bytes:
    h = hashlib.sha256()
    for c in categories:
        h.update(c.encode("utf-8") + b"\0")
    h.update(np.asarray(sizes, dtype="<u8").tobytes())
    return h.digest()


def write_coded(fh: BinaryIO, records, r: int, width: int, digest: bytes) -> None:
    """Write coded records to an RGC1 stream.

    Layout: magic, r, W, 32-byte catalog hash, record count (all little-endian
    uint32), then per record one segment byte followed by the V and B bit
    matrices, each row-major and packed with little-endian bit order.
    """
    records = list(records)
    fh.write(RGC_MAGIC)
    fh.write(struct.pack("<II", r, width))
    fh.write(digest.ljust(32, b"\0")[:32])
    fh.write(struct.pack("<I", len(records)))
    for segment, v_bits, b_bits in records:
        fh.write(struct.pack("<B", int(segment)))
        for mat in (v_bits, b_bits):
            mat = np.asarray(mat, dtype=np.uint8)
            if mat.shape != (r, width):
                raise ValueError(f"record shape {mat.shape} != {(r, width)}")
            fh.write(np.packbits(mat.ravel(), bitorder="little").tobytes())


def read_coded(fh: BinaryIO):
    """Read an RGC1 stream; returns (r, W, digest, segments, V, B)."""
    if fh.read(4) != RGC_MAGIC:
        raise ValueError("not an RGC1 coded tensor file")
    r, width = struct.unpack("<II", fh.read(8))
    digest = fh.read(32)
    (count,) = struct.unpack("<I", fh.read(4))
    nbytes = (r * width + 7) // 8
    segments = np.zeros(count, dtype=np.int64)
    view = np.zeros((count, r, width), dtype=np.uint8)
    buy = np.zeros((count, r, width), dtype=np.uint8)
    for i in range(count):
        (segments[i],) = struct.unpack("<B", fh.read(1))
        for target in (view, buy):
            raw = np.frombuffer(fh.read(nbytes), dtype=np.uint8)
            if raw.size != nbytes:
                raise ValueError("truncated RGC1 file")
            target[i] = np.unpackbits(raw, bitorder="little")[: r * width].reshape(r, width)
    return r, width, digest, segments, view, buy


class ArithmeticRowCodec(BaseEstimator, TransformerMixin):
    """Transformer between per-category item sets and fixed-width coded matrices.

    ``fit`` records the number of items in every category.  ``transform`` maps
    samples (each a sequence of ``r`` collections of item positions) to an
    array of shape (n_samples, r, width); ``inverse_transform`` decodes any such
    bit array back to per-category position arrays.
    """

    def __init__(self, width=DEFAULT_WIDTH, prior_strength=0.5, n_jobs=1):
        self.width = width
        self.prior_strength = prior_strength
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        sizes = np.asarray(X, dtype=np.int64).ravel()
        if (sizes < 0).any():
            raise ValueError("category sizes must be non-negative")
        self.config_ = CodecConfig(self.width, Fraction(self.prior_strength).limit_denominator(10**6))
        self.category_sizes_ = sizes
        self.n_categories_ = sizes.size
        return self

    def transform(self, X):
        check_is_fitted(self, "category_sizes_")
        sizes = self.category_sizes_.tolist()
        return np.stack([encode_sparse(sample, sizes, self.config_) for sample in X]) \
            if len(X) else np.zeros((0, len(sizes), self.width), np.uint8)

    def inverse_transform(self, X):
        check_is_fitted(self, "category_sizes_")
        X = check_bit_array(X, ndim=3, name="X")
        sizes = self.category_sizes_.tolist()
        return [decode_matrix(sample, sizes, self.config_, self.n_jobs) for sample in X]
