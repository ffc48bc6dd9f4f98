"""Check-in/search logs: ingestion, the sparsity filter, upward aggregation
over the tree, the chronological split, and a seeded synthetic generator.

The protocol order matters: sparse users and POIs are removed from the raw
log at its native level first (iterated to a fixed point), the surviving
events are then duplicated upward to every ancestor level, and only then is
the log split chronologically.  Train pairs are pruned from validation and
test so later evaluation never rewards memorization.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    EmptyAfterFilter,
    InvalidConfig,
    ParseError,
    UnknownPoi,
    WindowTooLarge,
)
from .poi_tree import PoiTree, build_tree


class Event(NamedTuple):
    user_id: str
    poi_id: str
    timestamp: int


EVENT_HEADER = ("user_id", "poi_id", "timestamp")


def read_events_csv(path) -> list[Event]:
    """Read a `user_id,poi_id,timestamp` CSV (header required)."""
    path = Path(path)
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file, expected header") from None
        if tuple(h.strip() for h in header) != EVENT_HEADER:
            raise ParseError(path, 1, f"expected header {','.join(EVENT_HEADER)}")
        for no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(path, no, f"expected 3 columns, got {len(row)}")
            user, poi, ts = (c.strip() for c in row)
            try:
                stamp = int(float(ts))
            except ValueError:
                raise ParseError(path, no, f"bad timestamp {ts!r}") from None
            if not user or not poi:
                raise ParseError(path, no, "empty user_id or poi_id")
            out.append(Event(user, poi, stamp))
    return out


def write_events_csv(events, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVENT_HEADER)
        for ev in events:
            writer.writerow([ev.user_id, ev.poi_id, ev.timestamp])


def read_user_profiles(path) -> dict[str, dict]:
    """Read user profiles from JSONL: user_id plus a raw attribute map."""
    path = Path(path)
    out: dict[str, dict] = {}
    with path.open(encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, no, f"invalid JSON: {exc.msg}") from None
            if not isinstance(rec, dict) or "user_id" not in rec:
                raise ParseError(path, no, "expected an object with user_id")
            attrs = rec.get("attrs") or {}
            if not isinstance(attrs, dict):
                raise ParseError(path, no, "attrs must be an object")
            out[str(rec["user_id"])] = attrs
    return out


def write_user_profiles(profiles: dict[str, dict], path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for uid in sorted(profiles):
            fh.write(json.dumps({"user_id": uid, "attrs": profiles[uid]}, sort_keys=True) + "\n")


@dataclass
class IngestResult:
    checkins: list[Event]
    searches: list[Event]
    user_profiles: dict[str, dict]
    skipped: dict[str, int] = field(default_factory=dict)


def ingest(checkin_path, search_path, user_profile_path, poi_profile_path=None,
           tree: PoiTree | None = None) -> IngestResult:
    """Load and validate the raw inputs.

    Rows whose poi_id is not in the tree or whose user_id has no profile are
    dropped; the counts of dropped rows are reported in ``skipped``.
    """
    if tree is None:
        if poi_profile_path is None:
            raise InvalidConfig("ingest needs either a tree or a POI profile path")
        from .poi_tree import load_poi_profiles

        tree = build_tree(load_poi_profiles(poi_profile_path))
    users = read_user_profiles(user_profile_path)
    skipped = {"checkin_unknown_poi": 0, "checkin_unknown_user": 0,
               "search_unknown_poi": 0, "search_unknown_user": 0}
    checkins = []
    for ev in read_events_csv(checkin_path):
        if ev.poi_id not in tree:
            skipped["checkin_unknown_poi"] += 1
        elif ev.user_id not in users:
            skipped["checkin_unknown_user"] += 1
        else:
            checkins.append(ev)
    searches = []
    for ev in read_events_csv(search_path):
        if ev.poi_id not in tree:
            skipped["search_unknown_poi"] += 1
        elif ev.user_id not in users:
            skipped["search_unknown_user"] += 1
        else:
            searches.append(ev)
    return IngestResult(checkins, searches, users, skipped)


# --- aggregation and filtering ---------------------------------------------


def aggregate_upward(events, tree: PoiTree) -> dict[int, list[Event]]:
    """Copy every event to all ancestor levels, partitioned by level.

    An event on a POI at level l produces one record at level l and one at
    each ancestor's level, all sharing the user and timestamp.  Raises
    UnknownPoi for events outside the tree.
    """
    per_level: dict[int, list[Event]] = {l: [] for l in range(1, tree.depth + 1)}
    ancestor_cache: dict[str, list[tuple[int, str]]] = {}
    for ev in events:
        if ev.poi_id not in tree:
            raise UnknownPoi(f"event references unknown poi {ev.poi_id!r}")
        chain = ancestor_cache.get(ev.poi_id)
        if chain is None:
            node = tree.node(ev.poi_id)
            chain = [(node.level, node.poi_id)]
            chain += [(tree.node(a).level, a) for a in tree.ancestors(ev.poi_id)]
            ancestor_cache[ev.poi_id] = chain
        for level, pid in chain:
            per_level[level].append(Event(ev.user_id, pid, ev.timestamp))
    return per_level


def filter_sparse(per_level: dict[int, list[Event]], min_user_checkins: int = 10,
                  min_poi_visitors: int = 10) -> dict[int, list[Event]]:
    """Iterate the sparsity filter to a fixed point, per level.

    A user survives with at least ``min_user_checkins`` distinct POIs and a
    POI with at least ``min_poi_visitors`` distinct users.  Removing one can
    drop the other below threshold, so the pass repeats until stable.
    Raises EmptyAfterFilter when a level loses all of its events.
    """
    out: dict[int, list[Event]] = {}
    for level, events in per_level.items():
        kept = list(events)
        while True:
            user_pois: dict[str, set] = {}
            poi_users: dict[str, set] = {}
            for ev in kept:
                user_pois.setdefault(ev.user_id, set()).add(ev.poi_id)
                poi_users.setdefault(ev.poi_id, set()).add(ev.user_id)
            bad_users = {u for u, ps in user_pois.items() if len(ps) < min_user_checkins}
            bad_pois = {p for p, us in poi_users.items() if len(us) < min_poi_visitors}
            if not bad_users and not bad_pois:
                break
            kept = [ev for ev in kept
                    if ev.user_id not in bad_users and ev.poi_id not in bad_pois]
        if events and not kept:
            raise EmptyAfterFilter(f"level {level} lost every event")
        out[level] = kept
    return out


# --- chronological split -----------------------------------------------------


@dataclass
class DatasetSplit:
    train: dict[int, list[Event]]
    validation: dict[int, list[Event]]
    test: dict[int, list[Event]]
    users: tuple[str, ...]                       # sorted union over all parts
    poi_universe: dict[int, tuple[str, ...]]     # sorted POIs seen per level
    train_end: int = 0
    test_start: int = 0

    def part(self, name: str) -> dict[int, list[Event]]:
        try:
            return {"train": self.train, "validation": self.validation,
                    "test": self.test}[name]
        except KeyError:
            raise InvalidConfig(f"unknown split part {name!r}") from None


def split_chronological(per_level: dict[int, list[Event]], train_window_days: float,
                        test_window_days: float = 15.0) -> DatasetSplit:
    """Split each level into train / validation / test by wall-clock time.

    Train covers the first ``train_window_days`` from the earliest event,
    test covers the final ``test_window_days``, validation is whatever lies
    between.  Any (user, poi) pair present in train at a level is pruned
    from that level's validation and test.  Raises WindowTooLarge when the
    two windows meet or overlap.
    """
    all_ts = [ev.timestamp for events in per_level.values() for ev in events]
    if not all_ts:
        raise WindowTooLarge("empty log")
    t0, t1 = min(all_ts), max(all_ts)
    span = t1 - t0
    train_w = int(round(train_window_days * 86400))
    test_w = int(round(test_window_days * 86400))
    if train_w <= 0 or test_w <= 0:
        raise InvalidConfig("window lengths must be positive")
    if train_w + test_w >= span:
        raise WindowTooLarge(
            f"windows cover {train_w + test_w}s but the log spans only {span}s"
        )
    train_end = t0 + train_w
    test_start = t1 - test_w

    train: dict[int, list[Event]] = {}
    validation: dict[int, list[Event]] = {}
    test: dict[int, list[Event]] = {}
    users: set[str] = set()
    universe: dict[int, tuple[str, ...]] = {}
    for level, events in per_level.items():
        tr, va, te = [], [], []
        for ev in events:
            if ev.timestamp < train_end:
                tr.append(ev)
            elif ev.timestamp >= test_start:
                te.append(ev)
            else:
                va.append(ev)
        seen = {(ev.user_id, ev.poi_id) for ev in tr}
        va = [ev for ev in va if (ev.user_id, ev.poi_id) not in seen]
        te = [ev for ev in te if (ev.user_id, ev.poi_id) not in seen]
        train[level], validation[level], test[level] = tr, va, te
        users.update(ev.user_id for part in (tr, va, te) for ev in part)
        universe[level] = tuple(sorted({ev.poi_id for part in (tr, va, te) for ev in part}))
    return DatasetSplit(train, validation, test, tuple(sorted(users)), universe,
                        train_end=train_end, test_start=test_start)


# --- synthetic data -----------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the seeded generator.

    Users and POIs share a latent space; POIs inherit most of their parent's
    latent vector, so preference correlates along the tree, and children sit
    geographically inside their parent's neighborhood, so short within-
    session hops carry the same signal as the latents.  ``noise_rate`` mixes
    uniform choice into every draw: at 1.0 check-ins are uniform over leaves.
    """

    m: int = 200
    levels: tuple[int, ...] = (10, 50, 200)
    latent_dim: int = 8
    noise_rate: float = 0.1
    events_per_user: int = 60
    span_days: float = 90.0
    search_rate: float = 0.6
    hier_mix: float = 0.75
    temperature: float = 0.8
    geo_neighbors: int = 8
    n_poi_tags: int = 24
    n_user_numeric: int = 2
    n_user_flags: int = 4

    def validate(self) -> None:
        if self.m <= 0:
            raise InvalidConfig("m must be positive")
        if not self.levels or any(n <= 0 for n in self.levels):
            raise InvalidConfig("levels must be positive sizes")
        if self.latent_dim <= 0:
            raise InvalidConfig("latent_dim must be positive")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise InvalidConfig("noise_rate must lie in [0, 1]")
        if self.events_per_user <= 0:
            raise InvalidConfig("events_per_user must be positive")
        if self.span_days <= 0:
            raise InvalidConfig("span_days must be positive")
        if not 0.0 <= self.search_rate <= 1.0:
            raise InvalidConfig("search_rate must lie in [0, 1]")
        if not 0.0 <= self.hier_mix <= 1.0:
            raise InvalidConfig("hier_mix must lie in [0, 1]")
        if self.temperature <= 0:
            raise InvalidConfig("temperature must be positive")


@dataclass
class SyntheticData:
    tree: PoiTree
    checkins: list[Event]
    searches: list[Event]
    user_profiles: dict[str, dict]
    coordinates: dict[str, tuple[float, float]]
    user_latents: dict[str, np.ndarray]
    poi_latents: dict[str, np.ndarray]


_CITY_LAT, _CITY_LON = 40.0, 116.35
_LEVEL_RADIUS_DEG = (0.15, 0.02, 0.006)


def _level_radius(level: int) -> float:
    if level - 2 < len(_LEVEL_RADIUS_DEG):
        return _LEVEL_RADIUS_DEG[level - 2]
    return _LEVEL_RADIUS_DEG[-1] / (2 ** (level - len(_LEVEL_RADIUS_DEG) - 1))


def generate_synthetic(cfg: SynthConfig, seed: int) -> SyntheticData:
    """Generate a tree, logs, and profiles; byte-identical per seed."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    L = len(cfg.levels)
    width = max(4, len(str(max(cfg.levels))))

    # Tree: ids, parents, latents, coordinates, tags -- level by level.
    ids_by_level: list[list[str]] = []
    parent_of: dict[str, str | None] = {}
    latents: dict[str, np.ndarray] = {}
    coords: dict[str, tuple[float, float]] = {}
    for level in range(1, L + 1):
        n = cfg.levels[level - 1]
        ids = [f"p{level}-{i:0{width}d}" for i in range(n)]
        ids_by_level.append(ids)
        if level == 1:
            for pid in ids:
                parent_of[pid] = None
                latents[pid] = rng.normal(size=cfg.latent_dim)
                coords[pid] = (
                    _CITY_LAT + rng.uniform(-0.3, 0.3),
                    _CITY_LON + rng.uniform(-0.3, 0.3),
                )
        else:
            parents = ids_by_level[level - 2]
            # Guarantee every parent at least one child where counts allow,
            # then spread the rest uniformly.
            assigned = list(rng.permutation(len(parents)))[: len(ids)]
            while len(assigned) < len(ids):
                assigned.append(int(rng.integers(len(parents))))
            radius = _level_radius(level)
            mix = cfg.hier_mix
            for pid, pidx in zip(ids, assigned):
                par = parents[int(pidx)]
                parent_of[pid] = par
                fresh = rng.normal(size=cfg.latent_dim)
                latents[pid] = mix * latents[par] + math.sqrt(1 - mix * mix) * fresh
                plat, plon = coords[par]
                ang = rng.uniform(0, 2 * math.pi)
                rad = radius * math.sqrt(rng.uniform())
                coords[pid] = (plat + rad * math.sin(ang), plon + rad * math.cos(ang))

    tag_dirs = rng.normal(size=(cfg.n_poi_tags, cfg.latent_dim))
    tag_dirs /= np.linalg.norm(tag_dirs, axis=1, keepdims=True)
    profiles = []
    for level in range(1, L + 1):
        for pid in ids_by_level[level - 1]:
            scores = tag_dirs @ latents[pid]
            tags = [f"tag{k:02d}" for k in range(cfg.n_poi_tags) if scores[k] > 0.6]
            profiles.append({
                "poi_id": pid,
                "parent_id": parent_of[pid],
                "lat": coords[pid][0],
                "lon": coords[pid][1],
                "attrs": tags,
            })
    tree = build_tree(profiles)

    # Users: latents and raw attributes derived from them.
    uw = max(4, len(str(cfg.m)))
    user_ids = [f"u{i:0{uw}d}" for i in range(cfg.m)]
    user_latents = {uid: rng.normal(size=cfg.latent_dim) for uid in user_ids}
    user_profiles: dict[str, dict] = {}
    for uid in user_ids:
        z = user_latents[uid]
        attrs: dict[str, object] = {}
        for k in range(cfg.n_user_numeric):
            attrs[f"num{k}"] = round(float(50 + 15 * z[k % cfg.latent_dim]), 2)
        for k in range(cfg.n_user_flags):
            j = (k + cfg.n_user_numeric) % cfg.latent_dim
            attrs[f"flag{k}"] = "yes" if z[j] > 0 else "no"
        user_profiles[uid] = attrs

    # Leaf preference distributions and spatial neighbor pools.
    leaf_ids = ids_by_level[-1]
    n_leaf = len(leaf_ids)
    leaf_z = np.stack([latents[p] for p in leaf_ids])
    leaf_xy = np.array([coords[p] for p in leaf_ids])
    d2 = ((leaf_xy[:, None, :] - leaf_xy[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    k_nn = min(cfg.geo_neighbors, max(1, n_leaf - 1))
    neighbor_rows = np.argsort(d2, axis=1, kind="stable")[:, :k_nn]

    span_secs = int(cfg.span_days * 86400)
    session_len_p = np.array([0.35, 0.45, 0.2])
    checkins: list[Event] = []
    searches: list[Event] = []
    for uid in user_ids:
        z = user_latents[uid]
        raw = leaf_z @ z / cfg.temperature
        raw -= raw.max()
        pref = np.exp(raw)
        pref /= pref.sum()
        pref = (1 - cfg.noise_rate) * pref + cfg.noise_rate / n_leaf

        remaining = cfg.events_per_user
        n_sessions = max(1, int(math.ceil(cfg.events_per_user / 1.85)))
        starts = np.sort(rng.integers(0, max(1, span_secs - 3600), size=n_sessions))
        for s_idx in range(n_sessions):
            if remaining <= 0:
                break
            length = min(int(rng.choice((1, 2, 3), p=session_len_p)), remaining)
            t = int(starts[s_idx])
            current = int(rng.choice(n_leaf, p=pref))
            checkins.append(Event(uid, leaf_ids[current], t))
            remaining -= 1
            visited = [current]
            for _ in range(length - 1):
                if remaining <= 0:
                    break
                if rng.uniform() < cfg.noise_rate:
                    nxt = int(rng.integers(n_leaf))
                else:
                    pool = neighbor_rows[current]
                    w = pref[pool]
                    tot = w.sum()
                    if tot <= 0:
                        nxt = int(pool[int(rng.integers(len(pool)))])
                    else:
                        nxt = int(rng.choice(pool, p=w / tot))
                t += int(rng.integers(120, 900))
                checkins.append(Event(uid, leaf_ids[nxt], t))
                remaining -= 1
                current = nxt
                visited.append(nxt)
            if rng.uniform() < cfg.search_rate:
                t_search = max(0, int(starts[s_idx]) - int(rng.integers(60, 900)))
                searches.append(Event(uid, leaf_ids[visited[0]], t_search))
                if rng.uniform() < 0.5:
                    pool = neighbor_rows[visited[0]]
                    w = pref[pool]
                    tot = w.sum()
                    if tot > 0:
                        extra = int(rng.choice(pool, p=w / tot))
                    else:
                        extra = int(pool[int(rng.integers(len(pool)))])
                else:
                    extra = int(rng.choice(n_leaf, p=pref))
                searches.append(Event(uid, leaf_ids[extra],
                                      t_search + int(rng.integers(30, 600))))

    checkins.sort(key=lambda e: (e.timestamp, e.user_id, e.poi_id))
    searches.sort(key=lambda e: (e.timestamp, e.user_id, e.poi_id))
    return SyntheticData(
        tree=tree,
        checkins=checkins,
        searches=searches,
        user_profiles=user_profiles,
        coordinates=dict(coords),
        user_latents=user_latents,
        poi_latents=latents,
    )
