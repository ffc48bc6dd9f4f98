"""Ranking metrics and the evaluation protocol.

Users with at least one relevant POI at a level are ranked against every
POI of that level except their train positives, and per-user metrics are
averaged.  Users who never appear in training are still evaluated — scored
cold, with their implicit blocks zeroed — and counted separately.
"""

import csv
import math
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path

import numpy as np

from .errors import InvalidConfig
from .model import Scorer, TreeIndex


def precision_at_k(ranked, relevant, k: int) -> float:
    """Fraction of the first k ranked items that are relevant."""
    if k <= 0:
        raise InvalidConfig("k must be positive")
    if not relevant:
        return 0.0
    hits = sum(1 for item in ranked[:k] if item in relevant)
    return hits / k


def ndcg_at_k(ranked, relevant, k: int) -> float:
    """Binary NDCG with log2 position discounts.

    The ideal DCG places min(k, |relevant|) hits at the top; an empty
    relevant set scores 0 by convention.
    """
    if k <= 0:
        raise InvalidConfig("k must be positive")
    if not relevant:
        return 0.0
    dcg = 0.0
    for i, item in enumerate(ranked[:k]):
        if item in relevant:
            dcg += 1.0 / math.log2(i + 2)
    ideal = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(relevant))))
    return dcg / ideal


@dataclass(frozen=True)
class MetricRow:
    level: int
    k: int
    precision: float
    ndcg: float
    n_users: int
    n_cold: int


@dataclass
class MetricTable:
    rows: list[MetricRow]

    def get(self, level: int, k: int) -> MetricRow:
        for row in self.rows:
            if row.level == level and row.k == k:
                return row
        raise KeyError((level, k))

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["level", "k", "precision", "ndcg", "n_users", "n_cold"])
            for row in self.rows:
                writer.writerow([row.level, row.k, f"{row.precision:.12g}",
                                 f"{row.ndcg:.12g}", row.n_users, row.n_cold])


def relevance_rows(events_by_level: dict[int, list], user_row: dict[str, int],
                   index: TreeIndex) -> dict[int, dict[int, set[int]]]:
    """Distinct relevant POI rows per user per level, from raw events."""
    out: dict[int, dict[int, set[int]]] = {}
    for level in range(1, index.depth + 1):
        row_of = {pid: i for i, pid in enumerate(index.level_ids[level - 1])}
        rel: dict[int, set[int]] = {}
        for ev in events_by_level.get(level, []):
            u = user_row.get(ev.user_id)
            if u is not None:
                rel.setdefault(u, set()).add(row_of[ev.poi_id])
        out[level] = rel
    return out


def cold_users(train_pos: dict[int, list[set[int]]], m: int) -> set[int]:
    """User rows with no train positives at any level."""
    cold = set(range(m))
    for sets in train_pos.values():
        for u, positives in enumerate(sets):
            if positives:
                cold.discard(u)
    return cold


def ranked_rows(scores: np.ndarray, exclude: set[int]) -> list[int]:
    """Candidate rows by descending score; ties go to the smaller row."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [int(r) for r in order if int(r) not in exclude]


def evaluate(scorer: Scorer, relevance: dict[int, dict[int, set[int]]],
             exclude: dict[int, list[set[int]]], ks=(5, 10, 20),
             cold: frozenset | set = frozenset()) -> MetricTable:
    """Average per-user metrics per level and cutoff."""
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks:
        raise InvalidConfig("ks must not be empty")
    rows: list[MetricRow] = []
    for level in sorted(relevance):
        rel_level = relevance[level]
        users = [u for u in sorted(rel_level) if rel_level[u]]
        sums = {k: [0.0, 0.0] for k in ks}
        n_cold = 0
        for u in users:
            is_cold = u in cold
            n_cold += int(is_cold)
            scores = scorer.score_level(u, level, zero_implicit=is_cold)
            ranked = ranked_rows(scores, exclude[level][u])
            rel = rel_level[u]
            for k in ks:
                sums[k][0] += precision_at_k(ranked, rel, k)
                sums[k][1] += ndcg_at_k(ranked, rel, k)
        for k in ks:
            n = len(users)
            rows.append(MetricRow(
                level=level, k=k,
                precision=sums[k][0] / n if n else 0.0,
                ndcg=sums[k][1] / n if n else 0.0,
                n_users=n, n_cold=n_cold))
    return MetricTable(rows)


def evaluate_model(params, env, events_by_level, ks=(5, 10, 20),
                   gamma: float = 1.0) -> MetricTable:
    """Convenience wrapper: evaluate trained parameters against one split part."""
    user_row = env.user_row
    relevance = relevance_rows(events_by_level, user_row, env.index)
    scorer = Scorer(params, env.index, graphs=env.graphs, history=env.history,
                    gamma=gamma)
    cold = cold_users(env.train_pos, env.m)
    return evaluate(scorer, relevance, env.train_pos, ks=ks, cold=cold)


# --- ablation -------------------------------------------------------------------


ABLATION_VARIANTS = ("M1", "M2", "M3")


def ablation(env, test_events_by_level, cfg, ks=(5, 10, 20)) -> dict[str, tuple]:
    """Train and evaluate the three variants under one seed.

    M1 removes the inter-level blocks and the geospatial term entirely,
    M2 keeps attention propagation but zeroes the geospatial weight,
    M3 is the full model.  Returns {variant: (TrainResult, MetricTable)}.
    """
    from . import training  # local import; training imports this module

    variants = {
        "M1": dc_replace(cfg, use_attention=False, gamma=0.0),
        "M2": dc_replace(cfg, use_attention=True, gamma=0.0),
        "M3": dc_replace(cfg, use_attention=True),
    }
    out: dict[str, tuple] = {}
    for name in ABLATION_VARIANTS:
        vcfg = variants[name]
        result = training.train(env, vcfg)
        table = evaluate_model(result.params, env, test_events_by_level,
                               ks=ks, gamma=vcfg.gamma)
        out[name] = (result, table)
    return out


def aggregate_tables(tables: list[MetricTable]) -> list[dict]:
    """Mean and standard deviation across seeds, per (level, k)."""
    if not tables:
        return []
    keyed: dict[tuple[int, int], list[MetricRow]] = {}
    for table in tables:
        for row in table.rows:
            keyed.setdefault((row.level, row.k), []).append(row)
    out = []
    for (level, k) in sorted(keyed):
        rows = keyed[(level, k)]
        out.append({
            "level": level,
            "k": k,
            "precision_mean": float(np.mean([r.precision for r in rows])),
            "precision_std": float(np.std([r.precision for r in rows])),
            "ndcg_mean": float(np.mean([r.ndcg for r in rows])),
            "ndcg_std": float(np.std([r.ndcg for r in rows])),
            "n_seeds": len(rows),
        })
    return out
