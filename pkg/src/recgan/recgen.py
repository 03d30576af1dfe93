"""Sample trained generators, binarize their output and decode recommendation sets."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .codec import CodecConfig, decode_matrix
from .validation import check_bit_array


@dataclass(frozen=True)
class RecommendationSet:
    """One decoded realization.

    ``items_v`` / ``items_b`` map category id -> frozenset of item ids and only
    hold non-empty categories, so ``c_v`` / ``c_b`` are just their keys.
    """

    segment: int
    items_v: dict = field(default_factory=dict)
    items_b: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "items_v", {c: frozenset(s) for c, s in self.items_v.items() if s})
        object.__setattr__(self, "items_b", {c: frozenset(s) for c, s in self.items_b.items() if s})

    @property
    def c_v(self):
        return frozenset(self.items_v)

    @property
    def c_b(self):
        return frozenset(self.items_b)

    def n_items(self):
        cats = self.c_v | self.c_b
        return sum(len(self.items_v.get(c, frozenset()) | self.items_b.get(c, frozenset()))
                   for c in cats)

    def n_categories(self):
        return len(self.c_v | self.c_b)


def sample_segment(model, segment, n, seed=0, chunk=256):
    """``n`` inference-mode draws for one segment, shape (n, 2, r, W); channel 0 is view."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, model.cfg.z_dim)).astype(model.dtype)
    out = np.empty((n, 2, model.cfg.r, model.cfg.W), dtype=model.dtype)
    for a in range(0, n, chunk):
        x1, x2 = model.generate(z[a:a + chunk], np.full(min(chunk, n - a), segment))
        out[a:a + chunk, 0] = x1
        out[a:a + chunk, 1] = x2
    return out


def binarize(X_hat, threshold=0.0):
    """Bit is 1 iff the element is strictly above ``threshold``."""
    if not -1 < threshold < 1:
        raise ValueError("threshold must lie in (-1, 1)")
    return (np.asarray(X_hat) > threshold).astype(np.uint8)


def decode_realization(view_bits, buy_bits, catalog, segment=0, cfg=CodecConfig()):
    return decode_realizations(np.stack([view_bits, buy_bits])[None], catalog, [segment], cfg)[0]


def decode_realizations(bits, catalog, segments, cfg=CodecConfig(), workers=1):
    """Decode a stack of (n, 2, r, W) bit tensors into RecommendationSets.

    All rows go through one ``decode_matrix`` call so the work parallelizes over
    realizations and rows alike.
    """
    bits = check_bit_array(bits, ndim=4, name="bits")
    n, channels, r, w = bits.shape
    if channels != 2 or r != catalog.r:
        raise ValueError(f"expected shape (n, 2, {catalog.r}, W), got {bits.shape}")
    segments = np.broadcast_to(np.asarray(segments), (n,))
    sizes = catalog.sizes
    rows = decode_matrix(bits.reshape(-1, w), sizes * (2 * n), cfg, workers=workers)
    out = []
    for k in range(n):
        chans = []
        for ch in range(2):
            base = (2 * k + ch) * r
            chans.append({catalog.categories[ci]: {catalog.item_at(ci, int(p)) for p in rows[base + ci]}
                          for ci in range(r) if len(rows[base + ci])})
        out.append(RecommendationSet(int(segments[k]), chans[0], chans[1]))
    return out


def subsample(realizations, fraction, seed=0):
    """Uniform subset without replacement of size round(fraction * n), order preserved."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = len(realizations)
    size = int(np.floor(fraction * n + 0.5))
    if n:
        size = max(size, 1)
    idx = np.sort(np.random.default_rng(seed).choice(n, size=size, replace=False))
    return [realizations[i] for i in idx]


def write_realizations(fh: TextIO, recsets):
    """One ``segment,index,*`` marker per realization, then ``segment,index,channel,category,items``.

    Lines are sorted so dumps diff cleanly.
    """
    records = []
    for k, rs in enumerate(recsets):
        records.append((rs.segment, k, "*", "", ""))
        for channel, items in (("V", rs.items_v), ("B", rs.items_b)):
            for cat, members in items.items():
                records.append((rs.segment, k, channel, cat, " ".join(sorted(members))))
    for rec in sorted(records):
        fh.write(",".join(map(str, rec)) + "\n")


def read_realizations(fh: TextIO):
    grouped = {}
    for line in fh:
        line = line.rstrip("\n")
        if not line:
            continue
        seg, k, channel, cat, items = line.split(",", 4)
        entry = grouped.setdefault((int(seg), int(k)), ({}, {}))
        if channel == "V":
            entry[0][cat] = set(items.split())
        elif channel == "B":
            entry[1][cat] = set(items.split())
    return [RecommendationSet(seg, v, b) for (seg, _), (v, b) in sorted(grouped.items())]
