"""Dataset bundles: one directory holding everything training needs.

A bundle is produced from raw logs by the full preparation pipeline
(sparsity filter at the native level, upward aggregation, chronological
split, feature construction, context graphs, visit history) and can be
written to disk and reloaded byte-for-byte reproducibly.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

from .context_graph import ContextGraph, build_graph, save_graph_csv
from .dataset import (
    DatasetSplit,
    Event,
    aggregate_upward,
    filter_sparse,
    read_events_csv,
    read_user_profiles,
    split_chronological,
    write_events_csv,
    write_user_profiles,
)
from .errors import DataError, UnknownPoi
from .features import (
    FeatureMatrices,
    build_features,
    load_features,
    save_features,
)
from .model import TreeIndex, build_user_history
from .poi_tree import PoiTree, build_tree, load_poi_profiles, save_poi_profiles

BUNDLE_FORMAT = 1


@dataclass(frozen=True)
class PipelineConfig:
    min_user_checkins: int = 10
    min_poi_visitors: int = 10
    train_window_days: float = 60.0
    test_window_days: float = 15.0
    cosearch_window_s: int = 1800
    covisit_window_s: int = 1800
    t_history: int = 3
    user_quantiles: tuple[float, ...] = (0.5,)
    user_min_support: int = 1
    poi_min_support: int = 10

    def validate(self) -> None:
        if self.min_user_checkins < 1 or self.min_poi_visitors < 1:
            raise DataError("sparsity thresholds must be at least 1")
        if self.train_window_days <= 0 or self.test_window_days <= 0:
            raise DataError("split windows must be positive")
        if self.cosearch_window_s <= 0 or self.covisit_window_s <= 0:
            raise DataError("graph windows must be positive")
        if self.t_history < 1:
            raise DataError("t_history must be at least 1")


@dataclass
class Bundle:
    tree: PoiTree
    index: TreeIndex
    split: DatasetSplit
    user_profiles: dict
    features: FeatureMatrices
    graphs: dict[int, ContextGraph]
    history: dict[int, list]
    searches_train: list[Event]          # native-level, train window only
    meta: dict = field(default_factory=dict)

    @property
    def user_row(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.split.users)}


def _native_groups(events, tree: PoiTree) -> dict[int, list[Event]]:
    groups: dict[int, list[Event]] = {level: [] for level in range(1, tree.depth + 1)}
    for ev in events:
        if ev.poi_id not in tree:
            raise UnknownPoi(f"unknown poi in log: {ev.poi_id}")
        groups[tree.node(ev.poi_id).level].append(ev)
    return groups


def build_bundle(tree: PoiTree, checkins, searches, user_profiles,
                 pcfg: PipelineConfig) -> Bundle:
    """Run the preparation pipeline over raw logs."""
    pcfg.validate()
    filtered = filter_sparse(
        _native_groups(checkins, tree),
        min_user_checkins=pcfg.min_user_checkins,
        min_poi_visitors=pcfg.min_poi_visitors,
    )
    flat: list[Event] = []
    for level in sorted(filtered):
        flat.extend(filtered[level])
    flat.sort()
    per_level = aggregate_upward(flat, tree)
    split = split_chronological(
        per_level,
        train_window_days=pcfg.train_window_days,
        test_window_days=pcfg.test_window_days,
    )
    features = build_features(
        tree, split, user_profiles,
        user_quantiles=pcfg.user_quantiles,
        user_min_support=pcfg.user_min_support,
        poi_min_support=pcfg.poi_min_support,
    )
    searches_train = sorted(
        ev for ev in searches
        if ev.poi_id in tree and ev.timestamp < split.train_end
    )
    searches_agg = aggregate_upward(searches_train, tree)
    graphs = {}
    for level in range(1, tree.depth + 1):
        graphs[level] = build_graph(
            searches_agg.get(level, []),
            split.train.get(level, []),
            tree.coordinates(level),
            level,
            tuple(tree.level_nodes(level)),
            dt1=pcfg.cosearch_window_s,
            dt2=pcfg.covisit_window_s,
        )
    index = TreeIndex(tree)
    user_row = {u: i for i, u in enumerate(split.users)}
    history = build_user_history(split.train, user_row, index, t=pcfg.t_history)
    profiles = {u: user_profiles.get(u, {}) for u in split.users}
    meta = {
        "format": BUNDLE_FORMAT,
        "depth": tree.depth,
        "n_levels": list(tree.n_levels),
        "n_users": len(split.users),
        "train_end": split.train_end,
        "test_start": split.test_start,
        "pipeline": {
            "min_user_checkins": pcfg.min_user_checkins,
            "min_poi_visitors": pcfg.min_poi_visitors,
            "train_window_days": pcfg.train_window_days,
            "test_window_days": pcfg.test_window_days,
            "cosearch_window_s": pcfg.cosearch_window_s,
            "covisit_window_s": pcfg.covisit_window_s,
            "t_history": pcfg.t_history,
            "user_quantiles": list(pcfg.user_quantiles),
            "user_min_support": pcfg.user_min_support,
            "poi_min_support": pcfg.poi_min_support,
        },
        "counts": {
            "train": {str(l): len(split.train.get(l, [])) for l in sorted(split.train)},
            "validation": {str(l): len(split.validation.get(l, []))
                           for l in sorted(split.validation)},
            "test": {str(l): len(split.test.get(l, [])) for l in sorted(split.test)},
            "searches_train": len(searches_train),
        },
    }
    return Bundle(
        tree=tree, index=index, split=split, user_profiles=profiles,
        features=features, graphs=graphs, history=history,
        searches_train=searches_train, meta=meta,
    )


def save_bundle(bundle: Bundle, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "splits").mkdir(exist_ok=True)
    (out / "graphs").mkdir(exist_ok=True)
    save_poi_profiles(bundle.tree, out / "tree.jsonl")
    write_user_profiles(bundle.user_profiles, out / "users.jsonl")
    for part in ("train", "validation", "test"):
        per_level = bundle.split.part(part)
        for level in range(1, bundle.tree.depth + 1):
            events = sorted(per_level.get(level, []))
            write_events_csv(events, out / "splits" / f"{part}_l{level}.csv")
    write_events_csv(sorted(bundle.searches_train), out / "searches_train.csv")
    save_features(bundle.features, out / "features.bin")
    for level, graph in sorted(bundle.graphs.items()):
        save_graph_csv(graph, out / "graphs" / f"graph_l{level}.csv")
    with (out / "meta.json").open("w", encoding="utf-8") as fh:
        json.dump(bundle.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_bundle(in_dir) -> Bundle:
    src = Path(in_dir)
    if not (src / "meta.json").is_file():
        raise DataError(f"not a bundle directory: {src}")
    with (src / "meta.json").open("r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != BUNDLE_FORMAT:
        raise DataError(f"unsupported bundle format: {meta.get('format')!r}")
    tree = build_tree(load_poi_profiles(src / "tree.jsonl"))
    profiles = read_user_profiles(src / "users.jsonl")
    parts = {}
    for part in ("train", "validation", "test"):
        per_level = {}
        for level in range(1, tree.depth + 1):
            path = src / "splits" / f"{part}_l{level}.csv"
            per_level[level] = read_events_csv(path) if path.is_file() else []
        parts[part] = per_level
    users = tuple(sorted(profiles))
    universe = {}
    for level in range(1, tree.depth + 1):
        seen = set()
        for part in parts.values():
            seen.update(ev.poi_id for ev in part.get(level, []))
        universe[level] = tuple(sorted(seen))
    split = DatasetSplit(
        train=parts["train"], validation=parts["validation"], test=parts["test"],
        users=users, poi_universe=universe,
        train_end=float(meta["train_end"]), test_start=float(meta["test_start"]),
    )
    features = load_features(src / "features.bin")
    searches_train = read_events_csv(src / "searches_train.csv")
    searches_agg = aggregate_upward(searches_train, tree)
    pmeta = meta["pipeline"]
    graphs = {}
    for level in range(1, tree.depth + 1):
        graphs[level] = build_graph(
            searches_agg.get(level, []),
            split.train.get(level, []),
            tree.coordinates(level),
            level,
            tuple(tree.level_nodes(level)),
            dt1=int(pmeta["cosearch_window_s"]),
            dt2=int(pmeta["covisit_window_s"]),
        )
    index = TreeIndex(tree)
    user_row = {u: i for i, u in enumerate(split.users)}
    history = build_user_history(split.train, user_row, index,
                                 t=int(pmeta["t_history"]))
    return Bundle(
        tree=tree, index=index, split=split, user_profiles=profiles,
        features=features, graphs=graphs, history=history,
        searches_train=searches_train, meta=meta,
    )
