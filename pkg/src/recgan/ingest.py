"""Clickstream ingestion: events, catalog, click-depth segments, interaction matrices."""
from __future__ import annotations

import bisect
import enum
import hashlib
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, TextIO

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

logger = logging.getLogger(__name__)

DEFAULT_BIN_EDGES = (2, 4, 8, 16)


class EventKind(enum.Enum):
    VIEW = "view"
    ADD_TO_CART = "addtocart"
    TRANSACTION = "transaction"


class RawEvent(NamedTuple):
    timestamp: int
    visitor_id: str
    kind: EventKind
    item_id: str


@dataclass
class EventLog:
    events: list = field(default_factory=list)
    skipped: int = 0

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)


class Scheme(enum.Enum):
    VIEW_ADD = (EventKind.VIEW, EventKind.ADD_TO_CART)
    ADD_BUY = (EventKind.ADD_TO_CART, EventKind.TRANSACTION)
    VIEW_BUY = (EventKind.VIEW, EventKind.TRANSACTION)

    @classmethod
    def parse(cls, text: str) -> "Scheme":
        key = text.strip().lower().replace(" ", "").strip("()")
        aliases = {
            "view,add": cls.VIEW_ADD, "view,addtocart": cls.VIEW_ADD,
            "add,buy": cls.ADD_BUY, "addtocart,transaction": cls.ADD_BUY,
            "view,buy": cls.VIEW_BUY, "view,transaction": cls.VIEW_BUY,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown scheme {text!r}") from None


def _is_header(first_field: str) -> bool:
    try:
        float(first_field)
    except ValueError:
        return True
    return False


def _lines(source):
    if isinstance(source, str):
        return source.splitlines()
    return source


def parse_events(source: TextIO | Iterable[str]) -> EventLog:
    """Parse ``timestamp,visitor_id,event,item_id`` lines.

    Malformed lines (wrong field count, bad timestamp, unknown event kind) are
    skipped and counted.  Extra trailing fields are ignored, so files with a
    trailing transaction id column parse as well.
    """
    log = EventLog()
    for lineno, line in enumerate(_lines(source)):
        line = line.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        if lineno == 0 and _is_header(fields[0]):
            continue
        if len(fields) < 4 or not fields[1] or not fields[3]:
            log.skipped += 1
            continue
        try:
            ts = int(fields[0])
            kind = EventKind(fields[2].lower())
        except ValueError:
            log.skipped += 1
            continue
        if ts < 0:
            log.skipped += 1
            continue
        log.events.append(RawEvent(ts, fields[1], kind, fields[3]))
    if log.skipped:
        logger.info("skipped %d malformed event lines", log.skipped)
    return log


class CatalogError(ValueError):
    pass


@dataclass
class Catalog:
    """Item -> category hierarchy with canonical (sorted) bit positions."""

    categories: list
    items_in_category: dict

    def __post_init__(self):
        self.category_index = {c: i for i, c in enumerate(self.categories)}
        self.item_to_category = {}
        self.position = {}
        for ci, c in enumerate(self.categories):
            for pos, item in enumerate(self.items_in_category[c]):
                self.item_to_category[item] = c
                self.position[item] = (ci, pos)

    @property
    def r(self) -> int:
        return len(self.categories)

    @property
    def sizes(self) -> list:
        return [len(self.items_in_category[c]) for c in self.categories]

    @property
    def n_items(self) -> int:
        return len(self.position)

    def item_at(self, category_index: int, pos: int) -> str:
        return self.items_in_category[self.categories[category_index]][pos]

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for c in self.categories:
            h.update(c.encode() + b"\x1f")
            h.update("\x1e".join(self.items_in_category[c]).encode() + b"\x1d")
        return h.digest()

    def to_csv(self) -> str:
        lines = ["item_id,category_id"]
        for c in self.categories:
            lines.extend(f"{item},{c}" for item in self.items_in_category[c])
        return "\n".join(lines) + "\n"


def build_catalog(source: TextIO | Iterable[str]) -> Catalog:
    """Build a catalog from ``item_id,category_id`` lines."""
    owner = {}
    for lineno, line in enumerate(_lines(source)):
        line = line.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        if lineno == 0 and _is_header(fields[0]) and fields[0].lower().replace("_", "") == "itemid":
            continue
        if len(fields) < 2 or not fields[0] or not fields[1]:
            raise CatalogError(f"line {lineno + 1}: expected item_id,category_id")
        item, cat = fields[0], fields[1]
        if owner.setdefault(item, cat) != cat:
            raise CatalogError(
                f"item {item!r} listed under categories {owner[item]!r} and {cat!r}")
    grouped = defaultdict(list)
    for item, cat in owner.items():
        grouped[cat].append(item)
    categories = sorted(grouped)
    return Catalog(categories, {c: sorted(grouped[c]) for c in categories})


@dataclass(frozen=True)
class SegmentAssignment:
    visitor_id: str
    click_depth: int
    segment: int


def check_bin_edges(bin_edges) -> tuple:
    edges = tuple(int(e) for e in bin_edges)
    if len(edges) != 4:
        raise ValueError(f"expected 4 bin edges, got {len(edges)}")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"bin edges must be strictly ascending: {edges}")
    return edges


def segment_of(click_depth: int, bin_edges=DEFAULT_BIN_EDGES) -> int:
    return bisect.bisect_right(bin_edges, click_depth)


def segment_visitors(events: EventLog | Iterable[RawEvent],
                     bin_edges=DEFAULT_BIN_EDGES) -> list[SegmentAssignment]:
    """Assign every visitor to one of five click-depth bins (sorted by visitor id)."""
    edges = check_bin_edges(bin_edges)
    depth = defaultdict(int)
    for ev in events:
        depth[ev.visitor_id] += 1
    return [SegmentAssignment(v, d, segment_of(d, edges)) for v, d in sorted(depth.items())]


class ClickDepthSegmenter(BaseEstimator, TransformerMixin):
    """Bin click depths into five segments: segment i holds depths in [edge[i-1], edge[i])."""

    def __init__(self, bin_edges=DEFAULT_BIN_EDGES):
        self.bin_edges = bin_edges

    def fit(self, X=None, y=None):
        self.edges_ = np.asarray(check_bin_edges(self.bin_edges))
        self.n_segments_ = len(self.edges_) + 1
        return self

    def transform(self, X):
        depths = np.asarray(X).reshape(-1)
        if depths.size and depths.min() < 0:
            raise ValueError("click depths must be non-negative")
        return np.searchsorted(self.edges_, depths, side="right")


@dataclass(frozen=True)
class InteractionMatrixPair:
    """Sparse binary (first behavior, second behavior) matrices of one visitor.

    ``view`` and ``buy`` map category index -> sorted tuple of item positions;
    for schemes other than (view, buy) they hold the first and second behavior.
    """

    visitor_id: str
    segment: int
    view: dict
    buy: dict

    def rows(self, channel: str, r: int) -> list:
        mat = self.view if channel == "V" else self.buy
        return [mat.get(i, ()) for i in range(r)]

    def dense(self, catalog: Catalog):
        """Full (r, max n_c) 0/1 arrays; cells beyond a category's size stay 0."""
        width = max(catalog.sizes, default=0)
        out = []
        for mat in (self.view, self.buy):
            arr = np.zeros((catalog.r, width), dtype=np.uint8)
            for ci, positions in mat.items():
                arr[ci, list(positions)] = 1
            out.append(arr)
        return tuple(out)


def build_matrices(events: EventLog | Iterable[RawEvent], catalog: Catalog,
                   scheme: Scheme, assignments, return_skipped=False):
    """One matrix pair per visitor having both behaviors of ``scheme``.

    Events on items missing from the catalog are skipped and counted.
    """
    first, second = scheme.value
    segment = {a.visitor_id: a.segment for a in assignments}
    marks = defaultdict(lambda: (defaultdict(set), defaultdict(set)))
    unknown = 0
    for ev in events:
        if ev.kind not in (first, second):
            continue
        loc = catalog.position.get(ev.item_id)
        if loc is None:
            unknown += 1
            continue
        ci, pos = loc
        v, b = marks[ev.visitor_id]
        (v if ev.kind is first else b)[ci].add(pos)
    pairs = []
    for visitor in sorted(marks):
        v, b = marks[visitor]
        if not v or not b:
            continue
        if visitor not in segment:
            raise ValueError(f"visitor {visitor!r} has no segment assignment")
        pairs.append(InteractionMatrixPair(
            visitor, segment[visitor],
            {ci: tuple(sorted(p)) for ci, p in sorted(v.items())},
            {ci: tuple(sorted(p)) for ci, p in sorted(b.items())},
        ))
    if unknown:
        logger.info("skipped %d events on unknown items", unknown)
    if return_skipped:
        return pairs, unknown
    return pairs


def write_interactions(fh: TextIO, pairs) -> None:
    """Line format: visitor,segment,channel,category_index,space-separated positions."""
    for p in pairs:
        for channel, mat in (("V", p.view), ("B", p.buy)):
            for ci, positions in mat.items():
                fh.write(f"{p.visitor_id},{p.segment},{channel},{ci},"
                         f"{' '.join(map(str, positions))}\n")


def read_interactions(fh: TextIO) -> list[InteractionMatrixPair]:
    grouped = {}
    for line in fh:
        line = line.strip()
        if not line:
            continue
        visitor, seg, channel, ci, positions = line.split(",")
        entry = grouped.setdefault(visitor, (int(seg), {}, {}))
        target = entry[1] if channel == "V" else entry[2]
        target[int(ci)] = tuple(int(p) for p in positions.split())
    return [InteractionMatrixPair(v, seg, view, buy)
            for v, (seg, view, buy) in grouped.items()]
