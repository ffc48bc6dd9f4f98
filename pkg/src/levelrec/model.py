"""Model state and scoring.

Parameters per level: explicit-factor matrices (users, POIs, and a shared
projection onto the attribute features), implicit embeddings, and — on
non-leaf levels — the inter-level blocks: a user matrix plus an attention
network that summarizes a parent's children into a propagated embedding.
Scoring concatenates the blocks on each side and takes the inner product;
a geospatial term adds the match between the user's implicit embedding and
a context-weighted average of their recent POIs' embeddings.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptCheckpoint,
    DimensionMismatch,
    IndexOutOfRange,
    InvalidConfig,
    LeafLevel,
    LevelOutOfRange,
    VersionMismatch,
)
from .poi_tree import PoiTree


@dataclass(frozen=True)
class ModelDims:
    m: int
    n: tuple[int, ...]            # POI count per level, 1..L
    f: int                        # attribute feature width
    r: int                        # explicit latent size
    r_impl: tuple[int, ...]       # implicit embedding size per level
    d_attn: tuple[int, ...]       # attention hidden size per non-leaf level
    t_history: int = 3
    use_attention: bool = True

    @property
    def depth(self) -> int:
        return len(self.n)

    def validate(self) -> None:
        if self.m <= 0 or self.f < 0 or self.r <= 0:
            raise InvalidConfig("m, f, r must be positive (f may be zero)")
        if len(self.r_impl) != self.depth or any(r <= 0 for r in self.r_impl):
            raise InvalidConfig("r_impl must give a positive size per level")
        expect = self.depth - 1 if self.use_attention else 0
        if len(self.d_attn) != expect or any(d <= 0 for d in self.d_attn):
            raise InvalidConfig("d_attn must give a positive size per non-leaf level")
        if self.t_history <= 0:
            raise InvalidConfig("t_history must be positive")

    @staticmethod
    def create(m: int, n, f: int, r: int = 50, r_impl=150, d_attn=None,
               t_history: int = 3, use_attention: bool = True) -> "ModelDims":
        """Expand scalar sizes; d_attn defaults to the child level's r_impl."""
        n = tuple(int(x) for x in n)
        depth = len(n)
        if isinstance(r_impl, int):
            r_impl = (r_impl,) * depth
        else:
            r_impl = tuple(int(x) for x in r_impl)
        if not use_attention:
            d_attn = ()
        elif d_attn is None:
            d_attn = tuple(r_impl[l] for l in range(1, depth))
        elif isinstance(d_attn, int):
            d_attn = (d_attn,) * (depth - 1)
        else:
            d_attn = tuple(int(x) for x in d_attn)
        dims = ModelDims(m=m, n=n, f=f, r=r, r_impl=r_impl, d_attn=d_attn,
                         t_history=t_history, use_attention=use_attention)
        dims.validate()
        return dims

    def to_dict(self) -> dict:
        return {"m": self.m, "n": list(self.n), "f": self.f, "r": self.r,
                "r_impl": list(self.r_impl), "d_attn": list(self.d_attn),
                "t_history": self.t_history, "use_attention": self.use_attention}

    @staticmethod
    def from_dict(d: dict) -> "ModelDims":
        return ModelDims(m=d["m"], n=tuple(d["n"]), f=d["f"], r=d["r"],
                         r_impl=tuple(d["r_impl"]), d_attn=tuple(d["d_attn"]),
                         t_history=d["t_history"], use_attention=d["use_attention"])


@dataclass
class ModelParams:
    """All trainable tensors.  Levels are 1-based: list index l-1 holds level l."""

    dims: ModelDims
    u_w: np.ndarray                      # m x r
    p_w: list[np.ndarray]                # per level: n_l x r
    v: np.ndarray                        # r x f
    h_u: list[np.ndarray]                # per level: m x r_l
    h_p: list[np.ndarray]                # per level: n_l x r_l
    a_u: list[np.ndarray]                # per non-leaf level: m x r_{l+1}
    attn_w1: list[np.ndarray]            # per non-leaf level: d_1 x r_{l+1}
    attn_b1: list[np.ndarray]            # per non-leaf level: d_1
    attn_d: list[np.ndarray]             # per non-leaf level: d_1
    attn_b2: list[np.ndarray]            # per non-leaf level: shape (1,)

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """Canonical (name, array) pairs.

        The order is load-bearing: initialization draws follow it, so the
        attention-free variant shares its random draws with the full model
        for every tensor both have; checkpoints store tensors in it too.
        """
        out = [("U_W", self.u_w)]
        for l, arr in enumerate(self.p_w, start=1):
            out.append((f"P_W[{l}]", arr))
        out.append(("V", self.v))
        for l, arr in enumerate(self.h_u, start=1):
            out.append((f"H_u[{l}]", arr))
        for l, arr in enumerate(self.h_p, start=1):
            out.append((f"H_p[{l}]", arr))
        for l, arr in enumerate(self.a_u, start=1):
            out.append((f"A_u[{l}]", arr))
        for l in range(len(self.attn_w1)):
            out.append((f"attn_w1[{l + 1}]", self.attn_w1[l]))
            out.append((f"attn_b1[{l + 1}]", self.attn_b1[l]))
            out.append((f"attn_d[{l + 1}]", self.attn_d[l]))
            out.append((f"attn_b2[{l + 1}]", self.attn_b2[l]))
        return out

    def tensor(self, name: str) -> np.ndarray:
        for n, arr in self.named_tensors():
            if n == name:
                return arr
        raise KeyError(name)

    def copy(self) -> "ModelParams":
        return ModelParams(
            dims=self.dims,
            u_w=self.u_w.copy(),
            p_w=[a.copy() for a in self.p_w],
            v=self.v.copy(),
            h_u=[a.copy() for a in self.h_u],
            h_p=[a.copy() for a in self.h_p],
            a_u=[a.copy() for a in self.a_u],
            attn_w1=[a.copy() for a in self.attn_w1],
            attn_b1=[a.copy() for a in self.attn_b1],
            attn_d=[a.copy() for a in self.attn_d],
            attn_b2=[a.copy() for a in self.attn_b2],
        )

    def frobenius_sq(self) -> float:
        return float(sum((arr * arr).sum() for _, arr in self.named_tensors()))

    def scale(self, factor: float) -> "ModelParams":
        out = self.copy()
        for _, arr in out.named_tensors():
            arr *= factor
        return out


def init_params(dims: ModelDims, seed: int, scale: float = 0.01) -> ModelParams:
    """Uniform [-scale, scale] init, drawn in canonical tensor order."""
    dims.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    L = dims.depth

    def draw(*shape):
        return rng.uniform(-scale, scale, size=shape)

    u_w = draw(dims.m, dims.r)
    p_w = [draw(dims.n[l], dims.r) for l in range(L)]
    v = draw(dims.r, dims.f)
    h_u = [draw(dims.m, dims.r_impl[l]) for l in range(L)]
    h_p = [draw(dims.n[l], dims.r_impl[l]) for l in range(L)]
    a_u, w1s, b1s, ds, b2s = [], [], [], [], []
    if dims.use_attention:
        a_u = [draw(dims.m, dims.r_impl[l + 1]) for l in range(L - 1)]
        for l in range(L - 1):
            d1 = dims.d_attn[l]
            w1s.append(draw(d1, dims.r_impl[l + 1]))
            b1s.append(draw(d1))
            ds.append(draw(d1))
            b2s.append(draw(1))
    return ModelParams(dims=dims, u_w=u_w, p_w=p_w, v=v, h_u=h_u, h_p=h_p,
                       a_u=a_u, attn_w1=w1s, attn_b1=b1s, attn_d=ds, attn_b2=b2s)


# --- tree index ---------------------------------------------------------------


class TreeIndex:
    """Row-index view of a tree for matrix work.

    ``child_rows[l-1][i]`` holds the level-(l+1) row indices of the children
    of the level-l POI at row i.
    """

    def __init__(self, tree: PoiTree):
        self.tree = tree
        self.level_ids: list[tuple[str, ...]] = [
            tuple(tree.level_nodes(l)) for l in range(1, tree.depth + 1)
        ]
        self.child_rows: list[list[np.ndarray]] = []
        for l in range(1, tree.depth):
            child_row = {pid: i for i, pid in enumerate(self.level_ids[l])}
            rows_for_level = []
            for pid in self.level_ids[l - 1]:
                kids = [child_row[c] for c in tree.children(pid) if c in child_row]
                rows_for_level.append(np.asarray(sorted(kids), dtype=np.intp))
            self.child_rows.append(rows_for_level)

    @property
    def depth(self) -> int:
        return self.tree.depth

    @property
    def n(self) -> tuple[int, ...]:
        return self.tree.n_levels

    def poi_id(self, level: int, row: int) -> str:
        return self.level_ids[level - 1][row]

    def row_of(self, poi_id: str) -> tuple[int, int]:
        node = self.tree.node(poi_id)
        return node.level, self.tree.row(poi_id)


# --- attention propagation ------------------------------------------------------


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    e = np.exp(z)
    return e / e.sum()


def attention_scores(params: ModelParams, level: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw child weights for one propagation level, before the softmax.

    Returns (s, w_raw) over all level-(l+1) POIs: s is the pre-activation
    scalar per child, w_raw = relu(s) + b2.
    """
    li = level - 1
    h_child = params.h_p[level]          # children live one level down
    z = h_child @ params.attn_w1[li].T + params.attn_b1[li]
    s = z @ params.attn_d[li]
    return s, np.maximum(s, 0.0) + params.attn_b2[li][0]


def attention_propagate(params: ModelParams, index: TreeIndex,
                        level: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Propagated embeddings for one non-leaf level.

    For each parent: softmax-normalize its children's raw weights and take
    the weighted sum of the children's implicit embeddings.  Childless
    parents get a zero row and an empty weight vector.  Returns the n_l x
    r_{l+1} matrix plus the per-parent normalized weights.
    """
    dims = params.dims
    if not dims.use_attention:
        raise InvalidConfig("attention propagation is disabled for these dims")
    if not 1 <= level <= dims.depth - 1:
        raise LeafLevel(f"level {level} has no child level to propagate from")
    _, w_raw = attention_scores(params, level)
    h_child = params.h_p[level]
    a_p = np.zeros((dims.n[level - 1], dims.r_impl[level]))
    weights: list[np.ndarray] = []
    for i, rows in enumerate(index.child_rows[level - 1]):
        if len(rows) == 0:
            weights.append(np.zeros(0))
            continue
        w = softmax(w_raw[rows])
        a_p[i] = w @ h_child[rows]
        weights.append(w)
    return a_p, weights


def propagate_all(params: ModelParams, index: TreeIndex) -> list[np.ndarray | None]:
    """A_p per level (index l-1); None on the leaf level or without attention."""
    out: list[np.ndarray | None] = [None] * params.dims.depth
    if params.dims.use_attention:
        for level in range(1, params.dims.depth):
            out[level - 1] = attention_propagate(params, index, level)[0]
    return out


# --- user history -----------------------------------------------------------------


def build_user_history(train_by_level: dict[int, list], user_row: dict[str, int],
                       index: TreeIndex, t: int = 3) -> dict[int, list[np.ndarray]]:
    """Per level, each user's top-t most visited POI rows from train.

    Frequency counts keep multiplicity; ties break toward the smaller row
    (i.e. the lexicographically smaller poi_id).
    """
    out: dict[int, list[np.ndarray]] = {}
    for level in range(1, index.depth + 1):
        row_of = {pid: i for i, pid in enumerate(index.level_ids[level - 1])}
        counts: list[dict[int, int]] = [dict() for _ in range(len(user_row))]
        for ev in train_by_level.get(level, []):
            u = user_row.get(ev.user_id)
            if u is None:
                continue
            p = row_of[ev.poi_id]
            counts[u][p] = counts[u].get(p, 0) + 1
        per_user = []
        for u in range(len(user_row)):
            top = sorted(counts[u].items(), key=lambda kv: (-kv[1], kv[0]))[:t]
            per_user.append(np.asarray([p for p, _ in top], dtype=np.intp))
        out[level] = per_user
    return out


# --- scoring -------------------------------------------------------------------------


class Scorer:
    """Frozen scoring view over one parameter state.

    Attention outputs are cached at construction; call ``refresh`` after
    the parameters change.  ``gamma`` scales the geospatial term; with
    gamma = 0 the context graph and history are never consulted.
    """

    def __init__(self, params: ModelParams, index: TreeIndex, graphs=None,
                 history=None, gamma: float = 1.0):
        self.params = params
        self.index = index
        self.graphs = graphs or {}
        self.history = history or {}
        self.gamma = float(gamma)
        self.a_p: list[np.ndarray | None] = []
        self.refresh()

    def refresh(self) -> None:
        self.a_p = propagate_all(self.params, self.index)

    # -- bounds ------------------------------------------------------------------

    def _check(self, u: int, level: int, p: int | None = None) -> None:
        dims = self.params.dims
        if not 1 <= level <= dims.depth:
            raise LevelOutOfRange(f"level {level} outside 1..{dims.depth}")
        if not 0 <= u < dims.m:
            raise IndexOutOfRange(f"user row {u} outside 0..{dims.m - 1}")
        if p is not None and not 0 <= p < dims.n[level - 1]:
            raise IndexOutOfRange(f"poi row {p} outside level {level}")

    def _history_rows(self, u: int, level: int) -> np.ndarray:
        rows = self.history.get(level)
        if rows is None:
            return np.zeros(0, dtype=np.intp)
        return rows[u]

    # -- feature (explicit + implicit + inter-level) score -------------------------

    def feature_score(self, u: int, p: int, level: int) -> float:
        self._check(u, level, p)
        params = self.params
        li = level - 1
        score = float(params.u_w[u] @ params.p_w[li][p])
        score += float(params.h_u[li][u] @ params.h_p[li][p])
        if params.dims.use_attention and level < params.dims.depth:
            score += float(params.a_u[li][u] @ self.a_p[li][p])
        return score

    def feature_score_level(self, u: int, level: int) -> np.ndarray:
        self._check(u, level)
        params = self.params
        li = level - 1
        scores = params.p_w[li] @ params.u_w[u]
        scores += params.h_p[li] @ params.h_u[li][u]
        if params.dims.use_attention and level < params.dims.depth:
            scores += self.a_p[li] @ params.a_u[li][u]
        return scores

    # -- geospatial influence ---------------------------------------------------------

    def geo_influence(self, u: int, p: int, level: int) -> np.ndarray:
        """Context-weighted mean of the user's recent POI embeddings.

        Empty history yields the zero vector.  The mean divides by the
        actual history size, which is at most t.
        """
        self._check(u, level, p)
        li = level - 1
        rows = self._history_rows(u, level)
        mu = np.zeros(self.params.dims.r_impl[li])
        if len(rows) == 0:
            return mu
        graph = self.graphs[level]
        for j in rows:
            mu += graph.factor_product(p, int(j)) * self.params.h_p[li][int(j)]
        return mu / len(rows)

    def historical_score(self, u: int, p: int, level: int) -> float:
        mu = self.geo_influence(u, p, level)
        return float(self.params.h_u[level - 1][u] @ mu)

    def historical_score_level(self, u: int, level: int) -> np.ndarray:
        """The geospatial term against every candidate of a level at once."""
        self._check(u, level)
        li = level - 1
        rows = self._history_rows(u, level)
        n_l = self.params.dims.n[li]
        if len(rows) == 0:
            return np.zeros(n_l)
        graph = self.graphs[level]
        h_u = self.params.h_u[li][u]
        out = np.zeros(n_l)
        for j in rows:
            out += float(h_u @ self.params.h_p[li][int(j)]) * graph.factor_product_vector(int(j))
        return out / len(rows)

    # -- totals --------------------------------------------------------------------------

    def total_score(self, u: int, p: int, level: int) -> float:
        score = self.feature_score(u, p, level)
        if self.gamma != 0.0:
            score += self.gamma * self.historical_score(u, p, level)
        return score

    def score_level(self, u: int, level: int, zero_implicit: bool = False) -> np.ndarray:
        """Scores of every candidate at a level for one user.

        ``zero_implicit`` scores the user as cold: implicit and propagated
        user blocks are zeroed, leaving the explicit attribute match.
        """
        self._check(u, level)
        params = self.params
        li = level - 1
        scores = params.p_w[li] @ params.u_w[u]
        if not zero_implicit:
            scores = scores + params.h_p[li] @ params.h_u[li][u]
            if params.dims.use_attention and level < params.dims.depth:
                scores += self.a_p[li] @ params.a_u[li][u]
            if self.gamma != 0.0:
                scores += self.gamma * self.historical_score_level(u, level)
        return scores

    def recommend_topk(self, u: int, level: int, k: int,
                       exclude=()) -> list[tuple[str, float]]:
        """Top-k (poi_id, score), descending score, ties toward smaller id."""
        if k <= 0:
            raise InvalidConfig("k must be positive")
        scores = self.score_level(u, level)
        excluded = set(int(e) for e in exclude)
        order = np.lexsort((np.arange(len(scores)), -scores))
        out = []
        for row in order:
            if int(row) in excluded:
                continue
            out.append((self.index.poi_id(level, int(row)), float(scores[row])))
            if len(out) == k:
                break
        return out


# --- checkpoints -------------------------------------------------------------------------

_CKPT_MAGIC = b"LRCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    """Single binary file: magic, version, JSON header, tensors, checksum.

    Tensors are float64, row-major, written in canonical order; a SHA-256
    digest of everything before it closes the file.
    """
    tensors = params.named_tensors()
    header = {
        "dims": params.dims.to_dict(),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = bytearray()
    payload += _CKPT_MAGIC
    payload += CHECKPOINT_VERSION.to_bytes(4, "little")
    payload += len(blob).to_bytes(8, "little")
    payload += blob
    for _, arr in tensors:
        payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    digest = hashlib.sha256(bytes(payload)).digest()
    Path(path).write_bytes(bytes(payload) + digest)


def load_checkpoint(path, expected_dims: ModelDims | None = None) -> ModelParams:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 48 or raw[:4] != _CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path} is not a checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    version = int.from_bytes(raw[4:8], "little")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    hlen = int.from_bytes(raw[8:16], "little")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptCheckpoint(f"{path}: unreadable header") from None
    dims = ModelDims.from_dict(header["dims"])
    if expected_dims is not None and dims != expected_dims:
        raise VersionMismatch(
            f"{path}: checkpoint dimensions {dims.to_dict()} do not match the current setup")
    offset = 16 + hlen
    arrays: dict[str, np.ndarray] = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(body):
            raise CorruptCheckpoint(f"{path}: truncated tensor data")
        arrays[spec["name"]] = np.frombuffer(
            body, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset = end
    L = dims.depth
    try:
        params = ModelParams(
            dims=dims,
            u_w=arrays["U_W"],
            p_w=[arrays[f"P_W[{l}]"] for l in range(1, L + 1)],
            v=arrays["V"],
            h_u=[arrays[f"H_u[{l}]"] for l in range(1, L + 1)],
            h_p=[arrays[f"H_p[{l}]"] for l in range(1, L + 1)],
            a_u=[arrays[f"A_u[{l}]"] for l in range(1, L)] if dims.use_attention else [],
            attn_w1=[arrays[f"attn_w1[{l}]"] for l in range(1, L)] if dims.use_attention else [],
            attn_b1=[arrays[f"attn_b1[{l}]"] for l in range(1, L)] if dims.use_attention else [],
            attn_d=[arrays[f"attn_d[{l}]"] for l in range(1, L)] if dims.use_attention else [],
            attn_b2=[arrays[f"attn_b2[{l}]"] for l in range(1, L)] if dims.use_attention else [],
        )
    except KeyError as exc:
        raise CorruptCheckpoint(f"{path}: missing tensor {exc}") from None
    return params
