"""Explicit attribute features for users and POIs.

Raw attributes become binary decision features: numeric attributes split at
a quantile threshold into a below/at-or-above pair, categorical values with
enough support become equality features.  On top of the direct 0/1 matrices
sit the inverse matrices: visit counts of the opposite side's features,
min-max normalized per row over the features that were actually touched.
The model consumes the concatenation — users as [direct | inverse], POIs as
[direct | inverse] — so both sides share one feature width f = f_u + f_p.
"""

import json
from dataclasses import dataclass
from numbers import Real
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, InvalidConfig, UnknownAttribute


@dataclass(frozen=True)
class DecisionRule:
    attribute_id: str
    kind: str                 # "numeric" | "categorical"
    polarity: str             # "lt" / "ge" for numeric, "eq" / "ne" for categorical
    value: object             # threshold or category

    def label(self) -> str:
        op = {"lt": "<", "ge": ">=", "eq": "=", "ne": "!="}[self.polarity]
        shown = f"{self.value:.6g}" if isinstance(self.value, float) else self.value
        return f"[{self.attribute_id}{op}{shown}]"

    def matches(self, attrs: dict) -> bool:
        """Whether a raw attribute map satisfies this rule.

        A missing attribute satisfies nothing, including negative polarity.
        """
        if self.attribute_id not in attrs:
            return False
        raw = attrs[self.attribute_id]
        if self.kind == "numeric":
            if not isinstance(raw, Real) or isinstance(raw, bool):
                return False
            if self.polarity == "lt":
                return float(raw) < float(self.value)
            return float(raw) >= float(self.value)
        if self.polarity == "eq":
            return raw == self.value
        return raw != self.value

    def to_dict(self) -> dict:
        return {"attribute_id": self.attribute_id, "kind": self.kind,
                "polarity": self.polarity, "value": self.value}

    @staticmethod
    def from_dict(d: dict) -> "DecisionRule":
        return DecisionRule(d["attribute_id"], d["kind"], d["polarity"], d["value"])


def _is_numeric(value) -> bool:
    return isinstance(value, Real) and not isinstance(value, bool)


def compile_rules(profiles: dict[str, dict], quantiles: tuple[float, ...] = (0.5,),
                  min_categorical_support: int = 1) -> list[DecisionRule]:
    """Derive the decision features from raw profiles.

    Numeric attributes produce a below/at-or-above pair per quantile of the
    observed values; categorical values produce an equality feature when at
    least ``min_categorical_support`` profiles carry them.  The rule order
    is deterministic: sorted by attribute, then kind, then value.
    """
    if any(not 0.0 < q < 1.0 for q in quantiles):
        raise InvalidConfig("quantiles must lie strictly inside (0, 1)")
    numeric_values: dict[str, list[float]] = {}
    categorical_support: dict[tuple[str, object], int] = {}
    for attrs in profiles.values():
        for key, raw in attrs.items():
            if _is_numeric(raw):
                numeric_values.setdefault(key, []).append(float(raw))
            else:
                categorical_support[(key, raw)] = categorical_support.get((key, raw), 0) + 1

    rules: list[DecisionRule] = []
    for key in sorted(numeric_values):
        values = np.asarray(numeric_values[key], dtype=float)
        for q in sorted(quantiles):
            theta = float(np.quantile(values, q))
            rules.append(DecisionRule(key, "numeric", "lt", theta))
            rules.append(DecisionRule(key, "numeric", "ge", theta))
    cats = [(key, value) for (key, value), cnt in categorical_support.items()
            if cnt >= min_categorical_support]
    for key, value in sorted(cats, key=lambda kv: (kv[0], str(kv[1]))):
        rules.append(DecisionRule(key, "categorical", "eq", value))
    return rules


def poi_attr_profiles(tree, level: int) -> dict[str, dict]:
    """Present a level's attribute-id sets as raw profile maps."""
    out = {}
    for pid in tree.level_nodes(level):
        out[pid] = {tag: "present" for tag in sorted(tree.node(pid).attribute_ids)}
    return out


def build_direct(profiles: list[dict], rules: list[DecisionRule],
                 vocabulary: set[str] | None = None) -> np.ndarray:
    """Binary matrix: row per profile, column per rule, 1 when satisfied.

    Raises UnknownAttribute if a rule references an attribute outside the
    vocabulary (by default the attributes present in ``profiles`` — pass
    the compile-time vocabulary when scoring a subset of the profiles).
    """
    if vocabulary is None:
        vocabulary = {key for attrs in profiles for key in attrs}
    if profiles:
        for rule in rules:
            if rule.attribute_id not in vocabulary:
                raise UnknownAttribute(
                    f"rule {rule.label()} references an attribute absent from the vocabulary"
                )
    out = np.zeros((len(profiles), len(rules)))
    for i, attrs in enumerate(profiles):
        for k, rule in enumerate(rules):
            if rule.matches(attrs):
                out[i, k] = 1.0
    return out


def minmax_normalize_rows(counts: np.ndarray) -> np.ndarray:
    """Per-row min-max over the touched (nonzero) entries.

    Untouched entries stay exactly 0.  When every touched entry of a row
    shares one value, those entries become 1.0.
    """
    out = np.zeros_like(counts, dtype=float)
    for i in range(counts.shape[0]):
        row = counts[i]
        touched = row > 0
        if not touched.any():
            continue
        lo = row[touched].min()
        hi = row[touched].max()
        if hi == lo:
            out[i, touched] = 1.0
        else:
            out[i, touched] = (row[touched] - lo) / (hi - lo)
    return out


def build_inverse_user(events_by_level: dict[int, list], user_row: dict[str, int],
                       poi_row_by_level: dict[int, dict[str, int]],
                       y_direct_by_level: dict[int, np.ndarray],
                       n_users: int) -> np.ndarray:
    """Users-by-POI-features counts from train visits, normalized per user.

    Every train event adds the visited POI's direct feature row to its
    user's counts, across all levels, so an event contributes once at its
    own level and once per ancestor copy.
    """
    widths = {m.shape[1] for m in y_direct_by_level.values()}
    if len(widths) > 1:
        raise DimensionMismatch("POI feature widths differ between levels")
    f_poi = widths.pop() if widths else 0
    counts = np.zeros((n_users, f_poi))
    for level, events in events_by_level.items():
        y_a = y_direct_by_level[level]
        rows = poi_row_by_level[level]
        for ev in events:
            counts[user_row[ev.user_id]] += y_a[rows[ev.poi_id]]
    return minmax_normalize_rows(counts)


def build_inverse_poi(events: list, user_row: dict[str, int], poi_row: dict[str, int],
                      x_direct: np.ndarray, n_pois: int) -> np.ndarray:
    """POIs-by-user-features counts from one level's train visits."""
    counts = np.zeros((n_pois, x_direct.shape[1]))
    for ev in events:
        counts[poi_row[ev.poi_id]] += x_direct[user_row[ev.user_id]]
    return minmax_normalize_rows(counts)


@dataclass
class FeatureMatrices:
    user_ids: tuple[str, ...]
    user_rules: list[DecisionRule]
    poi_rules: list[DecisionRule]
    x_direct: np.ndarray                    # m x f_u
    x_inverse: np.ndarray                   # m x f_p
    y_direct: dict[int, np.ndarray]         # level -> n_l x f_p
    y_inverse: dict[int, np.ndarray]        # level -> n_l x f_u

    @property
    def f_user(self) -> int:
        return len(self.user_rules)

    @property
    def f_poi(self) -> int:
        return len(self.poi_rules)

    @property
    def f(self) -> int:
        return self.f_user + self.f_poi

    @property
    def x(self) -> np.ndarray:
        """User target matrix, m x f, columns = [user features | POI features]."""
        return np.hstack([self.x_direct, self.x_inverse])

    def y(self, level: int) -> np.ndarray:
        """POI target matrix for one level, n_l x f.

        Columns follow the same order as ``x``: the first f_user columns are
        user features (filled from visitors), the rest are the POI's own
        attribute features.  Keeping one column space is what lets a single
        feature factor serve both reconstruction targets.
        """
        return np.hstack([self.y_inverse[level], self.y_direct[level]])

    def feature_labels(self) -> tuple[str, ...]:
        """Human-readable label per shared feature column."""
        return tuple([r.label() for r in self.user_rules]
                     + [r.label() for r in self.poi_rules])

    def validate(self) -> None:
        m = len(self.user_ids)
        if self.x_direct.shape != (m, self.f_user):
            raise DimensionMismatch("x_direct shape mismatch")
        if self.x_inverse.shape != (m, self.f_poi):
            raise DimensionMismatch("x_inverse shape mismatch")
        for level, y_a in self.y_direct.items():
            if y_a.shape[1] != self.f_poi:
                raise DimensionMismatch(f"y_direct[{level}] width mismatch")
            if self.y_inverse[level].shape != (y_a.shape[0], self.f_user):
                raise DimensionMismatch(f"y_inverse[{level}] shape mismatch")


def build_features(tree, split, user_profiles: dict[str, dict],
                   user_quantiles: tuple[float, ...] = (0.5,),
                   user_min_support: int = 1,
                   poi_min_support: int = 10) -> FeatureMatrices:
    """Run the full feature pipeline against a split's train events."""
    user_ids = split.users
    user_row = {uid: i for i, uid in enumerate(user_ids)}
    profiles_in_order = [user_profiles.get(uid, {}) for uid in user_ids]
    user_rules = compile_rules(
        {uid: user_profiles.get(uid, {}) for uid in user_ids},
        quantiles=user_quantiles, min_categorical_support=user_min_support)
    x_direct = build_direct(profiles_in_order, user_rules)

    poi_profiles_all: dict[str, dict] = {}
    for level in range(1, tree.depth + 1):
        poi_profiles_all.update(poi_attr_profiles(tree, level))
    poi_rules = compile_rules(poi_profiles_all, min_categorical_support=poi_min_support)
    poi_vocabulary = {key for attrs in poi_profiles_all.values() for key in attrs}

    y_direct: dict[int, np.ndarray] = {}
    y_inverse: dict[int, np.ndarray] = {}
    poi_rows: dict[int, dict[str, int]] = {}
    for level in range(1, tree.depth + 1):
        ids = tree.level_nodes(level)
        poi_rows[level] = {pid: i for i, pid in enumerate(ids)}
        level_profiles = [poi_profiles_all[pid] for pid in ids]
        y_direct[level] = build_direct(level_profiles, poi_rules, vocabulary=poi_vocabulary)
        y_inverse[level] = build_inverse_poi(
            split.train.get(level, []), user_row, poi_rows[level], x_direct, len(ids))
    x_inverse = build_inverse_user(split.train, user_row, poi_rows, y_direct, len(user_ids))

    fm = FeatureMatrices(tuple(user_ids), user_rules, poi_rules,
                         x_direct, x_inverse, y_direct, y_inverse)
    fm.validate()
    return fm


# --- persistence: dense binary container with a JSON header -------------------

_FEATURE_MAGIC = b"LRFM"
_FEATURE_VERSION = 1


def save_features(fm: FeatureMatrices, path) -> None:
    """One file: magic, version, JSON header, then raw float64 matrices."""
    matrices: list[tuple[str, np.ndarray]] = [("x_direct", fm.x_direct),
                                              ("x_inverse", fm.x_inverse)]
    for level in sorted(fm.y_direct):
        matrices.append((f"y_direct_{level}", fm.y_direct[level]))
        matrices.append((f"y_inverse_{level}", fm.y_inverse[level]))
    header = {
        "user_ids": list(fm.user_ids),
        "user_rules": [r.to_dict() for r in fm.user_rules],
        "poi_rules": [r.to_dict() for r in fm.poi_rules],
        "levels": sorted(fm.y_direct),
        "matrices": [{"name": n, "shape": list(a.shape)} for n, a in matrices],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_FEATURE_MAGIC)
        fh.write(_FEATURE_VERSION.to_bytes(4, "little"))
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, arr in matrices:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_features(path) -> FeatureMatrices:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _FEATURE_MAGIC:
        raise DimensionMismatch(f"{path} is not a feature container")
    version = int.from_bytes(raw[4:8], "little")
    if version != _FEATURE_VERSION:
        raise DimensionMismatch(f"unsupported feature container version {version}")
    hlen = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays: dict[str, np.ndarray] = {}
    for spec in header["matrices"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        arrays[spec["name"]] = arr.reshape(shape).copy()
    y_direct = {lvl: arrays[f"y_direct_{lvl}"] for lvl in header["levels"]}
    y_inverse = {lvl: arrays[f"y_inverse_{lvl}"] for lvl in header["levels"]}
    fm = FeatureMatrices(
        tuple(header["user_ids"]),
        [DecisionRule.from_dict(d) for d in header["user_rules"]],
        [DecisionRule.from_dict(d) for d in header["poi_rules"]],
        arrays["x_direct"], arrays["x_inverse"], y_direct, y_inverse)
    fm.validate()
    return fm
