"""Synthetic clickstreams with a planted segment-dependent (view, buy) structure.

Each segment owns a small pool of items inside its own block of categories.
A visitor of segment s views every pool item with ``p_view`` and buys each
viewed item with ``p_buy_given_view``, so buys are always a subset of views.
Pools are small enough that views plus buys stay below the segment's upper
click-depth edge, and ``addtocart`` events pad the visitor up to the lower
edge, so default click-depth binning recovers the segment.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .ingest import DEFAULT_BIN_EDGES, check_bin_edges
from .validation import check_probability


@dataclass
class SynthConfig:
    n_categories: int = 40
    items_per_category: int = 50
    n_segments: int = 4
    visitors_per_segment: int = 200
    p_view: float = 0.3
    p_buy_given_view: float = 0.5
    seed: int = 0
    bin_edges: tuple = DEFAULT_BIN_EDGES
    first_segment: int = 1
    max_pool: int = 12
    pool_per_category: int = 4
    pool_sizes: tuple | None = None
    category_blocks: tuple | None = None

    def __post_init__(self):
        self.bin_edges = check_bin_edges(self.bin_edges)
        check_probability(self.p_view, "p_view")
        check_probability(self.p_buy_given_view, "p_buy_given_view")
        if min(self.n_categories, self.items_per_category, self.n_segments,
               self.pool_per_category) < 1 or self.visitors_per_segment < 0:
            raise ValueError("synthetic corpus dimensions must be positive")
        if self.first_segment < 0 or self.first_segment + self.n_segments > len(self.bin_edges) + 1:
            raise ValueError("segments do not fit the click-depth bins")
        if self.pool_per_category > self.items_per_category:
            raise ValueError("pool_per_category exceeds items_per_category")
        if self.pool_sizes is None:
            self.pool_sizes = tuple(self._default_pool(s) for s in range(self.n_segments))
        self.pool_sizes = tuple(int(p) for p in self.pool_sizes)
        if self.category_blocks is None:
            width = self.n_categories // self.n_segments
            self.category_blocks = tuple((s * width, width) for s in range(self.n_segments))
        self.category_blocks = tuple(tuple(int(v) for v in b) for b in self.category_blocks)
        if len(self.pool_sizes) != self.n_segments or len(self.category_blocks) != self.n_segments:
            raise ValueError("need one pool size and one category block per segment")
        for s, ((start, width), pool) in enumerate(zip(self.category_blocks, self.pool_sizes)):
            if start < 0 or width < 1 or start + width > self.n_categories:
                raise ValueError(f"category block of segment {s} is out of range")
            if pool < 1 or math.ceil(pool / self.pool_per_category) > width:
                raise ValueError(f"pool of segment {s} does not fit its category block")
            upper = self.depth_range(s)[1]
            if upper is not None and 2 * pool >= upper:
                raise ValueError(f"pool of segment {s} can exceed the segment's click depth")

    def depth_range(self, s):
        """[low, high) click depths of synthetic segment ``s``; high is None when open."""
        b = self.first_segment + s
        edges = self.bin_edges
        low = edges[b - 1] if b > 0 else 1
        high = edges[b] if b < len(edges) else None
        return max(low, 1), high

    def _default_pool(self, s):
        high = self.depth_range(s)[1]
        return self.max_pool if high is None else min(self.max_pool, (high - 1) // 2)


@dataclass
class SynthCorpus:
    events: str
    catalog: str
    pools: dict
    summary: dict = field(default_factory=dict)


def category_id(c):
    return str(1000 + c)


def item_id(cfg, c, pos):
    return str(100000 + c * cfg.items_per_category + pos)


def planted_pools(cfg: SynthConfig):
    """Segment -> list of (category index, item position) pool cells, deterministic in the seed."""
    rng = np.random.default_rng([cfg.seed, 0])
    pools = {}
    for s, ((start, _), size) in enumerate(zip(cfg.category_blocks, cfg.pool_sizes)):
        cells = []
        for k in range(math.ceil(size / cfg.pool_per_category)):
            take = min(cfg.pool_per_category, size - len(cells))
            positions = np.sort(rng.choice(cfg.items_per_category, size=take, replace=False))
            cells += [(start + k, int(p)) for p in positions]
        pools[s] = cells
    return pools


def generate(cfg: SynthConfig) -> SynthCorpus:
    """Event log text, catalog text, pools and a ground-truth summary."""
    pools = planted_pools(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    lines = ["timestamp,visitorid,event,itemid"]
    stats = defaultdict(lambda: {"visitors": 0, "included": 0, "views": 0, "buys": 0})
    t = 0
    visitor = 0
    for s in range(cfg.n_segments):
        pool = pools[s]
        low, _ = cfg.depth_range(s)
        for _ in range(cfg.visitors_per_segment):
            visitor += 1
            viewed = [cell for cell in pool if rng.random() < cfg.p_view]
            bought = [cell for cell in viewed if rng.random() < cfg.p_buy_given_view]
            events = [("view", cell) for cell in viewed] + [("transaction", cell) for cell in bought]
            while len(events) < low:
                events.append(("addtocart", pool[int(rng.integers(len(pool)))]))
            for kind, (c, pos) in events:
                t += 1
                lines.append(f"{t},{visitor},{kind},{item_id(cfg, c, pos)}")
            st = stats[s]
            st["visitors"] += 1
            st["views"] += len(viewed)
            st["buys"] += len(bought)
            st["included"] += bool(viewed and bought)
    catalog = ["itemid,categoryid"] + [
        f"{item_id(cfg, c, pos)},{category_id(c)}"
        for c in range(cfg.n_categories) for pos in range(cfg.items_per_category)]
    summary = {s: {**st, "segment": cfg.first_segment + s,
                   "pool": [item_id(cfg, c, p) for c, p in pools[s]]}
               for s, st in stats.items()}
    return SynthCorpus("\n".join(lines) + "\n", "\n".join(catalog) + "\n", pools, summary)


def _binom_pmf(n, p):
    return [math.comb(n, k) * p ** k * (1 - p) ** (n - k) for k in range(n + 1)]


def segment_oracle_cvr(pool, p_view, p_buy):
    """Exact expected conversion rate (%) of one visitor, given at least one buy.

    A visitor's realization restricted to categories with a buy has B bought
    and V viewed items; the expectation of B / V is taken over the planted
    process by convolving per-category (B, V) distributions.  Returns None
    when no visitor can buy.
    """
    p_view, p_buy = Fraction(p_view), Fraction(p_buy)
    per_cat = defaultdict(int)
    for c, _ in pool:
        per_cat[c] += 1
    dist = {(0, 0): Fraction(1)}
    for m in per_cat.values():
        cat = defaultdict(Fraction)
        for v, pv in enumerate(_binom_pmf(m, p_view)):
            for b, pb in enumerate(_binom_pmf(v, p_buy)):
                # views only count toward V when the category has a buy
                cat[(b, v if b else 0)] += pv * pb
        nxt = defaultdict(Fraction)
        for (b1, v1), q1 in dist.items():
            for (b2, v2), q2 in cat.items():
                nxt[(b1 + b2, v1 + v2)] += q1 * q2
        dist = nxt
    mass = sum(q for (b, _), q in dist.items() if b)
    if mass == 0:
        return None
    return 100 * sum(q * Fraction(b, v) for (b, v), q in dist.items() if b) / mass


def oracle_cvr(cfg: SynthConfig):
    """Per-segment (keyed by click-depth bin) expected CVR under perfect learning."""
    pools = planted_pools(cfg)
    out = {}
    for s in range(cfg.n_segments):
        value = segment_oracle_cvr(pools[s], cfg.p_view, cfg.p_buy_given_view)
        out[cfg.first_segment + s] = 0.0 if value is None else float(value)
    return out
