"""Conversion rate, category similarity, matched-density null trials and reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .recgen import RecommendationSet
from .validation import check_probability

# published average e-commerce conversion rates (%): mean over 11 industries
# and over 9 product types (Ogonowski, 2020, online survey)
BENCHMARKS = {"Industry": 2.089, "Product": 1.827}


class UndefinedMetric(ValueError):
    """Every realization was degenerate for the metric."""


class Metric(NamedTuple):
    value: float
    exact: Fraction
    contributing: int
    skipped: int


def _finish(parts, skipped):
    if not parts:
        raise UndefinedMetric(f"all {skipped} realizations were skipped")
    exact = 100 * sum(parts, Fraction(0)) / len(parts)
    return Metric(float(exact), exact, len(parts), skipped)


def cvr(recsets) -> Metric:
    """Mean of #(i_v & i_b) / #i_v over overlap categories, in percent.

    Realizations without an overlapping category are skipped and counted.
    """
    if not recsets:
        raise ValueError("no realizations")
    parts, skipped = [], 0
    for rs in recsets:
        overlap = rs.c_v & rs.c_b
        n_v = sum(len(rs.items_v[c]) for c in overlap)
        if not overlap or n_v == 0:
            skipped += 1
            continue
        hits = sum(len(rs.items_v[c] & rs.items_b[c]) for c in overlap)
        parts.append(Fraction(hits, n_v))
    return _finish(parts, skipped)


def jaccard(recsets) -> Metric:
    """Mean Jaccard index of the view and buy category sets, in percent."""
    if not recsets:
        raise ValueError("no realizations")
    parts, skipped = [], 0
    for rs in recsets:
        union = rs.c_v | rs.c_b
        if not union:
            skipped += 1
            continue
        parts.append(Fraction(len(rs.c_v & rs.c_b), len(union)))
    return _finish(parts, skipped)


def density(recsets, catalog):
    """Mean fraction of marked (category, item) cells per channel."""
    if not recsets:
        return 0.0, 0.0
    cells = sum(catalog.sizes)
    v = sum(sum(len(s) for s in rs.items_v.values()) for rs in recsets)
    b = sum(sum(len(s) for s in rs.items_b.values()) for rs in recsets)
    return v / (cells * len(recsets)), b / (cells * len(recsets))


def null_realization(p_v, p_b, sizes, rng, segment=0):
    """Random realization: every cell marked independently with the channel's density."""
    sizes = np.asarray(sizes)
    chans = []
    for p in (p_v, p_b):
        counts = rng.binomial(sizes, p)
        chans.append({int(c): set(rng.choice(int(sizes[c]), size=int(k), replace=False).tolist())
                      for c, k in enumerate(counts) if k})
    return RecommendationSet(segment, chans[0], chans[1])


class NullResult(NamedTuple):
    cvr: float
    jaccard: float
    trials: int
    cvr_skipped: int
    jaccard_skipped: int
    all_skipped: bool


def null_trials(density_v, density_b, catalog, n_trials=500, seed=0, segment=0):
    """Average CVR and Jaccard over random realizations of matched density.

    Trial ``t`` draws from its own stream ``default_rng([seed, t])`` so trials
    are independent of evaluation order.  An undefined metric is reported as 0
    with ``all_skipped`` set.
    """
    p_v = check_probability(density_v, "density_v")
    p_b = check_probability(density_b, "density_b")
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    sizes = catalog.sizes if hasattr(catalog, "sizes") else list(catalog)
    recs = [null_realization(p_v, p_b, sizes, np.random.default_rng([seed, t]), segment)
            for t in range(n_trials)]
    values, skips, undefined = [], [], False
    for metric in (cvr, jaccard):
        try:
            m = metric(recs)
            values.append(m.value)
            skips.append(m.skipped)
        except UndefinedMetric:
            values.append(0.0)
            skips.append(n_trials)
            undefined = True
    return NullResult(values[0], values[1], n_trials, skips[0], skips[1], undefined)


@dataclass
class SegmentRow:
    segment: int
    n_items: float
    n_categories: float
    cvr: float
    cvr_rn: float
    jaccard: float
    jaccard_rn: float
    n_realizations: int
    null_trials: int = 0
    cvr_skipped: int = 0
    jaccard_skipped: int = 0


def evaluate_segment(recsets, catalog, n_trials=500, seed=0):
    """Table-style row for one segment's realizations, including its null trials."""
    segment = recsets[0].segment if recsets else 0
    try:
        c = cvr(recsets)
        c_value, c_skip = c.value, c.skipped
    except UndefinedMetric:
        c_value, c_skip = 0.0, len(recsets)
    try:
        j = jaccard(recsets)
        j_value, j_skip = j.value, j.skipped
    except UndefinedMetric:
        j_value, j_skip = 0.0, len(recsets)
    p_v, p_b = density(recsets, catalog)
    null = null_trials(p_v, p_b, catalog, n_trials, seed, segment)
    return SegmentRow(
        segment=segment,
        n_items=float(np.mean([rs.n_items() for rs in recsets])),
        n_categories=float(np.mean([rs.n_categories() for rs in recsets])),
        cvr=c_value, cvr_rn=null.cvr, jaccard=j_value, jaccard_rn=null.jaccard,
        n_realizations=len(recsets), null_trials=n_trials,
        cvr_skipped=c_skip, jaccard_skipped=j_skip)


@dataclass
class MetricsReport:
    rows: list
    benchmarks: dict

    @property
    def mean_cvr(self):
        return float(np.mean([r.cvr for r in self.rows]))

    def to_json(self):
        """One JSON record per line: segment rows, then the benchmark comparison."""
        lines = [json.dumps(asdict(r), sort_keys=True) for r in self.rows]
        bench = {"GAN": round(self.mean_cvr, 3), **self.benchmarks}
        lines.append(json.dumps({"benchmark": bench}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def to_text(self):
        head = ["y", "#I", "#C", "CVR", "CVR_rn", "J_c", "J_c_rn", "N"]
        body = [[str(r.segment), _num(r.n_items), _num(r.n_categories), f"{r.cvr:.3f}",
                 f"{r.cvr_rn:.4f}", f"{r.jaccard:.2f}", f"{r.jaccard_rn:.2f}",
                 str(r.n_realizations)] for r in self.rows]
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
        fmt = lambda row: "  ".join(v.rjust(w) for v, w in zip(row, widths)).rstrip()
        lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(row) for row in body]
        names = ["GAN", *self.benchmarks]
        values = [f"{self.mean_cvr:.3f}", *(f"{v:.3f}" for v in self.benchmarks.values())]
        bw = [max(len(a), len(b)) for a, b in zip(names, values)]
        lines += ["", "  ".join(n.rjust(w) for n, w in zip(names, bw)),
                  "  ".join(v.rjust(w) for v, w in zip(values, bw))]
        return "\n".join(lines) + "\n"


def _num(v):
    return f"{v:.2f}".rstrip("0").rstrip(".")


def report(rows, benchmarks=None) -> MetricsReport:
    if not rows:
        raise ValueError("no segment rows")
    return MetricsReport(sorted(rows, key=lambda r: r.segment),
                         dict(BENCHMARKS if benchmarks is None else benchmarks))
