"""Spatial containment tree of points of interest.

Every node except a root has exactly one parent, and a node's level is its
parent's level plus one (roots sit at level 1).  Ragged trees are accepted:
a branch may stop above the deepest level.  Node ordering is deterministic
— the nodes of a level are sorted by poi_id, which fixes the row index of
every POI in the per-level matrices used elsewhere.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    CycleDetected,
    DuplicateNode,
    LevelMismatch,
    LevelOutOfRange,
    ParseError,
    UnknownNode,
    UnknownParent,
)


@dataclass(frozen=True)
class PoiNode:
    poi_id: str
    parent_id: str | None
    level: int
    lat: float
    lon: float
    attribute_ids: frozenset[str] = field(default_factory=frozenset)


class PoiTree:
    """Immutable view of a validated POI hierarchy."""

    def __init__(self, nodes: dict[str, PoiNode]):
        self.nodes = nodes
        self.depth = max((n.level for n in nodes.values()), default=0)
        self._levels: list[list[str]] = [[] for _ in range(self.depth)]
        for node in nodes.values():
            self._levels[node.level - 1].append(node.poi_id)
        for ids in self._levels:
            ids.sort()
        self._rows: dict[str, int] = {}
        for ids in self._levels:
            for row, pid in enumerate(ids):
                self._rows[pid] = row
        self._children: dict[str, tuple[str, ...]] = {pid: () for pid in nodes}
        by_parent: dict[str, list[str]] = {}
        for node in nodes.values():
            if node.parent_id is not None:
                by_parent.setdefault(node.parent_id, []).append(node.poi_id)
        for pid, kids in by_parent.items():
            self._children[pid] = tuple(sorted(kids))

    # -- structure ---------------------------------------------------------

    @property
    def n_levels(self) -> tuple[int, ...]:
        """Node count per level, ordered from level 1 down."""
        return tuple(len(ids) for ids in self._levels)

    def level_nodes(self, level: int) -> list[str]:
        """poi_ids of a level, sorted; raises LevelOutOfRange."""
        if not 1 <= level <= self.depth:
            raise LevelOutOfRange(f"level {level} outside 1..{self.depth}")
        return self._levels[level - 1]

    def node(self, poi_id: str) -> PoiNode:
        try:
            return self.nodes[poi_id]
        except KeyError:
            raise UnknownNode(f"unknown poi_id {poi_id!r}") from None

    def children(self, poi_id: str) -> tuple[str, ...]:
        """Child poi_ids sorted ascending; empty tuple for leaves."""
        if poi_id not in self._children:
            raise UnknownNode(f"unknown poi_id {poi_id!r}")
        return self._children[poi_id]

    def row(self, poi_id: str) -> int:
        """Row index of the POI within its level's matrices."""
        if poi_id not in self._rows:
            raise UnknownNode(f"unknown poi_id {poi_id!r}")
        return self._rows[poi_id]

    def ancestors(self, poi_id: str) -> list[str]:
        """Ancestor chain from the node's parent up to its root."""
        node = self.node(poi_id)
        chain = []
        while node.parent_id is not None:
            node = self.nodes[node.parent_id]
            chain.append(node.poi_id)
        return chain

    def coordinates(self, level: int) -> dict[str, tuple[float, float]]:
        return {pid: (self.nodes[pid].lat, self.nodes[pid].lon) for pid in self.level_nodes(level)}

    def __contains__(self, poi_id: str) -> bool:
        return poi_id in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)


def build_tree(profiles) -> PoiTree:
    """Validate profile records and assemble the tree.

    Each record is a mapping with poi_id, parent_id (None for roots), lat,
    lon, an optional attrs collection, and an optional declared level.
    Raises UnknownParent, CycleDetected, LevelMismatch, or DuplicateNode.
    The result does not depend on the input order.
    """
    records: dict[str, dict] = {}
    for rec in profiles:
        pid = rec["poi_id"]
        if pid in records:
            raise DuplicateNode(f"poi_id {pid!r} appears more than once")
        records[pid] = rec

    for pid, rec in records.items():
        parent = rec.get("parent_id")
        if parent is not None and parent not in records:
            raise UnknownParent(f"{pid!r} references missing parent {parent!r}")

    # Depth assignment with explicit cycle detection (iterative: profile
    # chains can be deep and recursion limits are not a data property).
    depth: dict[str, int] = {}
    for start in records:
        if start in depth:
            continue
        chain = []
        seen_in_chain = set()
        node = start
        while node is not None and node not in depth:
            if node in seen_in_chain:
                raise CycleDetected(f"parent cycle through {node!r}")
            seen_in_chain.add(node)
            chain.append(node)
            node = records[node].get("parent_id")
        base = 0 if node is None else depth[node]
        for pid in reversed(chain):
            base += 1
            depth[pid] = base

    nodes: dict[str, PoiNode] = {}
    for pid, rec in sorted(records.items()):
        declared = rec.get("level")
        if declared is not None and int(declared) != depth[pid]:
            raise LevelMismatch(
                f"{pid!r} declares level {declared} but sits at depth {depth[pid]}"
            )
        attrs = frozenset(rec.get("attrs") or ())
        nodes[pid] = PoiNode(
            poi_id=pid,
            parent_id=rec.get("parent_id"),
            level=depth[pid],
            lat=float(rec["lat"]),
            lon=float(rec["lon"]),
            attribute_ids=attrs,
        )
    return PoiTree(nodes)


def load_poi_profiles(path) -> list[dict]:
    """Read POI profiles from a JSONL file; ParseError carries the line."""
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, no, f"invalid JSON: {exc.msg}") from None
            if not isinstance(rec, dict) or "poi_id" not in rec:
                raise ParseError(path, no, "expected an object with poi_id")
            for key in ("lat", "lon"):
                if key not in rec:
                    raise ParseError(path, no, f"missing {key}")
            out.append(rec)
    return out


def save_poi_profiles(tree: PoiTree, path) -> None:
    """Write the tree back out as JSONL, one node per line, sorted."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for level in range(1, tree.depth + 1):
            for pid in tree.level_nodes(level):
                node = tree.nodes[pid]
                rec = {
                    "poi_id": node.poi_id,
                    "parent_id": node.parent_id,
                    "level": node.level,
                    "lat": node.lat,
                    "lon": node.lon,
                    "attrs": sorted(node.attribute_ids),
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
