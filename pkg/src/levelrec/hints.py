"""Recommendation hints: why a POI was suggested.

Three views: the user-aspect hint matches the user's strongest predicted
attribute features against the POI's feature predictions; the POI-aspect
hint splits a parent's appeal across its children by the user's propagated
embedding; the interaction-aspect hint reports how much of the total score
came from the geospatial term.
"""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    IndexOutOfRange,
    InvalidConfig,
    LeafPoi,
    LevelOutOfRange,
    ZeroTotalScore,
)
from .model import ModelParams, Scorer, TreeIndex, softmax


@dataclass(frozen=True)
class UserAspectHint:
    feature_columns: tuple[int, ...]     # top-K columns of the user's row
    feature_values: tuple[float, ...]
    best_column: int                     # strongest POI prediction within those
    best_value: float


def user_aspect(params: ModelParams, u: int, p: int, level: int,
                k: int = 5) -> UserAspectHint:
    """Top-k user feature columns and the POI's best match among them.

    Ties break toward the lower column index, on both sides.
    """
    dims = params.dims
    if not 1 <= level <= dims.depth:
        raise LevelOutOfRange(f"level {level} outside 1..{dims.depth}")
    if not 0 <= u < dims.m:
        raise IndexOutOfRange(f"user row {u} outside 0..{dims.m - 1}")
    if not 0 <= p < dims.n[level - 1]:
        raise IndexOutOfRange(f"poi row {p} outside level {level}")
    if not 0 < k <= dims.f:
        raise InvalidConfig(f"k must lie in 1..{dims.f}")
    uf = params.u_w[u] @ params.v
    pf = params.p_w[level - 1][p] @ params.v
    order = np.lexsort((np.arange(dims.f), -uf))
    cols = tuple(int(c) for c in order[:k])
    best = cols[0]
    for c in cols:
        if pf[c] > pf[best] or (pf[c] == pf[best] and c < best):
            best = c
    return UserAspectHint(
        feature_columns=cols,
        feature_values=tuple(float(uf[c]) for c in cols),
        best_column=best,
        best_value=float(pf[best]),
    )


@dataclass(frozen=True)
class PoiAspectHint:
    child_rows: tuple[int, ...]
    child_ids: tuple[str, ...]
    ratios: tuple[float, ...]            # contribution shares, sum to 1
    softmax_ratios: tuple[float, ...]    # alternative view, safe under negatives
    hot_child: str
    degenerate: bool                     # zero denominator; uniform fallback
    has_negative: bool                   # some raw contribution was negative


def poi_aspect(params: ModelParams, index: TreeIndex, u: int, p: int,
               level: int) -> PoiAspectHint:
    """Share of a parent's appeal contributed by each child.

    The share is the user's propagated-block embedding dotted with each
    child's implicit embedding, normalized by the sum over children.  A
    zero denominator yields a uniform split with the degenerate flag set;
    negative dot products are flagged and a softmax view rides along.
    """
    dims = params.dims
    if not dims.use_attention:
        raise InvalidConfig("poi-aspect hints need the inter-level blocks")
    if not 1 <= level <= dims.depth - 1:
        raise LeafPoi(f"level {level} POIs have no child level")
    if not 0 <= u < dims.m:
        raise IndexOutOfRange(f"user row {u} outside 0..{dims.m - 1}")
    if not 0 <= p < dims.n[level - 1]:
        raise IndexOutOfRange(f"poi row {p} outside level {level}")
    rows = index.child_rows[level - 1][p]
    if len(rows) == 0:
        raise LeafPoi(f"{index.poi_id(level, p)} has no children")
    dots = params.h_p[level][rows] @ params.a_u[level - 1][u]
    denom = float(dots.sum())
    degenerate = denom == 0.0
    if degenerate:
        ratios = np.full(len(rows), 1.0 / len(rows))
    else:
        ratios = dots / denom
    order = np.lexsort((rows, -ratios))
    hot = index.poi_id(level + 1, int(rows[order[0]]))
    return PoiAspectHint(
        child_rows=tuple(int(r) for r in rows),
        child_ids=tuple(index.poi_id(level + 1, int(r)) for r in rows),
        ratios=tuple(float(x) for x in ratios),
        softmax_ratios=tuple(float(x) for x in softmax(dots)),
        hot_child=hot,
        degenerate=degenerate,
        has_negative=bool((dots < 0).any()),
    )


class InteractionAspect(NamedTuple):
    eta: float
    flagged: bool


def interaction_aspect(historical: float, total: float,
                       threshold: float = 0.5) -> InteractionAspect:
    """Share of the total score owed to the geospatial term.

    Raises ZeroTotalScore when the total is exactly zero; the flag trips
    only strictly above the threshold.  Scaling both scores by one positive
    factor leaves the ratio unchanged.
    """
    if total == 0.0:
        raise ZeroTotalScore("total score is zero; the ratio is undefined")
    eta = historical / total
    return InteractionAspect(eta=eta, flagged=eta > threshold)


# --- heat-map exports ---------------------------------------------------------------


@dataclass
class Heatmap:
    title: str
    row_labels: list[str]
    col_labels: list[str]
    values: np.ndarray

    def normalized(self) -> np.ndarray:
        """Global min-max to [0, 1]; a constant matrix maps to zeros."""
        v = self.values
        if v.size == 0:
            return v.copy()
        lo, hi = float(v.min()), float(v.max())
        if hi == lo:
            return np.zeros_like(v)
        return (v - lo) / (hi - lo)


def write_heatmap_csv(hm: Heatmap, path) -> None:
    norm = hm.normalized()
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([hm.title] + list(hm.col_labels))
        for label, row in zip(hm.row_labels, norm):
            writer.writerow([label] + [f"{x:.12g}" for x in row])


def user_aspect_heatmap(params: ModelParams, index: TreeIndex, u: int, level: int,
                        poi_rows, k_features: int = 5) -> Heatmap:
    """Feature predictions of the given POIs over the user's top features."""
    if not poi_rows:
        raise InvalidConfig("need at least one POI row")
    top = user_aspect(params, u, int(poi_rows[0]), level, k=k_features)
    cols = list(top.feature_columns)
    pf = params.p_w[level - 1] @ params.v
    values = pf[np.asarray(poi_rows, dtype=np.intp)][:, cols]
    return Heatmap(
        title="poi\\feature",
        row_labels=[index.poi_id(level, int(r)) for r in poi_rows],
        col_labels=[f"f{c}" for c in cols],
        values=values,
    )


def poi_aspect_heatmap(params: ModelParams, index: TreeIndex, u: int, level: int,
                       poi_rows, k_children: int = 5) -> Heatmap:
    """Per parent, the contribution ratios of its strongest children.

    Columns are rank positions; parents with fewer children pad with zeros.
    """
    if not poi_rows:
        raise InvalidConfig("need at least one POI row")
    values = np.zeros((len(poi_rows), k_children))
    labels = []
    for i, p in enumerate(poi_rows):
        hint = poi_aspect(params, index, u, int(p), level)
        ranked = sorted(zip(hint.ratios, hint.child_rows), key=lambda t: (-t[0], t[1]))
        for j, (ratio, _) in enumerate(ranked[:k_children]):
            values[i, j] = ratio
        labels.append(index.poi_id(level, int(p)))
    return Heatmap(
        title="poi\\child",
        row_labels=labels,
        col_labels=[f"C{j + 1}" for j in range(k_children)],
        values=values,
    )


def interaction_heatmap(scorer: Scorer, user_rows, level: int, k: int = 5,
                        exclude_per_user=None, threshold: float = 0.5) -> Heatmap:
    """Geospatial share of the score for each user's top recommendations."""
    if not user_rows:
        raise InvalidConfig("need at least one user row")
    values = np.zeros((len(user_rows), k))
    labels = []
    for i, u in enumerate(user_rows):
        exclude = () if exclude_per_user is None else exclude_per_user[i]
        recs = scorer.recommend_topk(int(u), level, k, exclude=exclude)
        for j, (poi_id, total) in enumerate(recs):
            lvl, row = scorer.index.row_of(poi_id)
            historical = scorer.gamma * scorer.historical_score(int(u), row, lvl)
            values[i, j] = interaction_aspect(historical, total, threshold).eta
        labels.append(f"u{int(u)}")
    return Heatmap(
        title="user\\rank",
        row_labels=labels,
        col_labels=[f"P{j + 1}" for j in range(k)],
        values=values,
    )
