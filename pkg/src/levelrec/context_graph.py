"""Per-level POI context graphs: co-search, co-visit, and proximity.

Raw co-search counts pair two different POIs searched by one user within a
short window; co-visit counts are order-sensitive (the first POI must be
visited strictly before the second, within the window).  Distance uses a
local equirectangular projection to meters, inverted and capped at one
meter.  Every factor is squashed through a sigmoid, so absent relations sit
at sigma(0) = 0.5 and all weights live strictly inside (0, 1).
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MissingCoordinates, UnknownNode

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_WINDOW_SECS = 1800


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def project_to_meters(coords: np.ndarray, ref_lat_deg: float) -> np.ndarray:
    """Equirectangular (lat, lon) degrees -> local (x, y) meters."""
    lat = np.radians(coords[:, 0])
    lon = np.radians(coords[:, 1])
    x = EARTH_RADIUS_M * lon * math.cos(math.radians(ref_lat_deg))
    y = EARTH_RADIUS_M * lat
    return np.column_stack([x, y])


@dataclass
class ContextGraph:
    level: int
    poi_ids: tuple[str, ...]
    xy: np.ndarray                                    # n x 2 meters
    dt1: int = DEFAULT_WINDOW_SECS
    dt2: int = DEFAULT_WINDOW_SECS
    cosearch: dict[tuple[int, int], int] = field(default_factory=dict)   # i < j
    covisit: dict[tuple[int, int], int] = field(default_factory=dict)    # ordered
    _row: dict[str, int] = field(default_factory=dict, repr=False)
    _fd_cache: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    _fvec_cache: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._row:
            self._row = {pid: i for i, pid in enumerate(self.poi_ids)}

    @property
    def n(self) -> int:
        return len(self.poi_ids)

    def row(self, poi_id: str) -> int:
        try:
            return self._row[poi_id]
        except KeyError:
            raise UnknownNode(f"poi {poi_id!r} is not on level {self.level}") from None

    # -- scalar factors ------------------------------------------------------

    def cosearch_count(self, i: int, j: int) -> int:
        if i == j:
            return 0
        key = (i, j) if i < j else (j, i)
        return self.cosearch.get(key, 0)

    def covisit_count(self, i: int, j: int) -> int:
        """Visits of i strictly before j within the window; asymmetric."""
        if i == j:
            return 0
        return self.covisit.get((i, j), 0)

    def distance_m(self, i: int, j: int) -> float:
        dx = self.xy[i, 0] - self.xy[j, 0]
        dy = self.xy[i, 1] - self.xy[j, 1]
        return math.hypot(dx, dy)

    def factors(self, i: int, j: int) -> tuple[float, float, float]:
        """(f_q, f_v, f_d) for the ordered pair i -> j (f_v reads i before j)."""
        f_q = float(sigmoid(self.cosearch_count(i, j)))
        f_v = float(sigmoid(self.covisit_count(i, j)))
        f_d = float(sigmoid(1.0 / max(self.distance_m(i, j), 1.0)))
        return f_q, f_v, f_d

    def factors_by_id(self, poi_i: str, poi_j: str) -> tuple[float, float, float]:
        return self.factors(self.row(poi_i), self.row(poi_j))

    # -- vectorized helpers ----------------------------------------------------

    def distance_factor_column(self, j: int) -> np.ndarray:
        """sigma(1 / max(distance, 1m)) from every candidate to j."""
        cached = self._fd_cache.get(j)
        if cached is None:
            d = np.hypot(self.xy[:, 0] - self.xy[j, 0], self.xy[:, 1] - self.xy[j, 1])
            cached = sigmoid(1.0 / np.maximum(d, 1.0))
            self._fd_cache[j] = cached
        return cached

    def factor_product_vector(self, j: int) -> np.ndarray:
        """c[i] = f_q(i,j) * f_v(j->i) * f_d(i,j) for all candidates i.

        This is the influence weight a history POI j exerts on each
        candidate: the co-visit factor is oriented history before candidate.
        """
        cached = self._fvec_cache.get(j)
        if cached is not None:
            return cached
        n = self.n
        f_q = np.full(n, 0.5)
        for (a, b), cnt in self.cosearch.items():
            if a == j:
                f_q[b] = float(sigmoid(cnt))
            elif b == j:
                f_q[a] = float(sigmoid(cnt))
        f_v = np.full(n, 0.5)
        for (a, b), cnt in self.covisit.items():
            if a == j:
                f_v[b] = float(sigmoid(cnt))
        out = f_q * f_v * self.distance_factor_column(j)
        self._fvec_cache[j] = out
        return out

    def factor_product(self, i: int, j: int) -> float:
        """Scalar counterpart of factor_product_vector: candidate i, history j."""
        f_q, _, f_d = self.factors(i, j)
        f_v = float(sigmoid(self.covisit_count(j, i)))
        return f_q * f_v * f_d


def build_graph(search_events, checkin_events, coordinates: dict[str, tuple[float, float]],
                level: int, poi_ids, dt1: int = DEFAULT_WINDOW_SECS,
                dt2: int = DEFAULT_WINDOW_SECS) -> ContextGraph:
    """Count co-search and co-visit relations from one level's train events.

    Both logs must already be restricted to the level's POIs and to the
    training period.  Raises MissingCoordinates when a level POI has no
    (lat, lon) entry.
    """
    poi_ids = tuple(poi_ids)
    row = {pid: i for i, pid in enumerate(poi_ids)}
    missing = [pid for pid in poi_ids if pid not in coordinates]
    if missing:
        raise MissingCoordinates(f"level {level}: no coordinates for {missing[:5]}")
    coords = np.array([coordinates[pid] for pid in poi_ids], dtype=float)
    ref_lat = float(coords[:, 0].mean()) if len(coords) else 0.0
    xy = project_to_meters(coords, ref_lat) if len(coords) else np.zeros((0, 2))

    cosearch: dict[tuple[int, int], int] = {}
    by_user: dict[str, list] = {}
    for ev in search_events:
        if ev.poi_id in row:
            by_user.setdefault(ev.user_id, []).append(ev)
    for events in by_user.values():
        events.sort(key=lambda e: (e.timestamp, e.poi_id))
        for a in range(len(events)):
            for b in range(a + 1, len(events)):
                if events[b].timestamp - events[a].timestamp > dt1:
                    break
                pi, pj = row[events[a].poi_id], row[events[b].poi_id]
                if pi == pj:
                    continue
                key = (pi, pj) if pi < pj else (pj, pi)
                cosearch[key] = cosearch.get(key, 0) + 1

    covisit: dict[tuple[int, int], int] = {}
    by_user = {}
    for ev in checkin_events:
        if ev.poi_id in row:
            by_user.setdefault(ev.user_id, []).append(ev)
    for events in by_user.values():
        events.sort(key=lambda e: (e.timestamp, e.poi_id))
        for a in range(len(events)):
            for b in range(a + 1, len(events)):
                gap = events[b].timestamp - events[a].timestamp
                if gap > dt2:
                    break
                if gap <= 0:
                    continue  # simultaneous visits carry no direction
                pi, pj = row[events[a].poi_id], row[events[b].poi_id]
                if pi == pj:
                    continue
                covisit[(pi, pj)] = covisit.get((pi, pj), 0) + 1

    return ContextGraph(level=level, poi_ids=poi_ids, xy=xy, dt1=dt1, dt2=dt2,
                        cosearch=cosearch, covisit=covisit)


GRAPH_HEADER = ("level", "poi_i", "poi_j", "f_q", "f_v", "f_d")


def save_graph_csv(graph: ContextGraph, path) -> None:
    """Export every pair with at least one observed relation.

    The distance factor is defined for all pairs, so only pairs with a
    co-search or co-visit count produce a row; absent factors print their
    0.5 baseline.
    """
    pairs = set()
    for (i, j) in graph.cosearch:
        pairs.add((i, j))
        pairs.add((j, i))
    pairs.update(graph.covisit)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GRAPH_HEADER)
        for i, j in sorted(pairs):
            f_q, f_v, f_d = graph.factors(i, j)
            writer.writerow([graph.level, graph.poi_ids[i], graph.poi_ids[j],
                             f"{f_q:.12g}", f"{f_v:.12g}", f"{f_d:.12g}"])
