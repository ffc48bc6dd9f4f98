"""Joint training: squared attribute reconstruction plus pairwise ranking.

The loss is lambda1 * L_A + lambda2 * L_I + lambda_theta * ||params||^2.
L_A reconstructs the user and per-level POI feature matrices through the
shared projection; L_I is the pairwise log loss over (user, positive,
negative) triples scored by the full model, geospatial term included.
Gradients are computed analytically — including the softmax/ReLU chain of
the attention network — and applied with per-parameter Adagrad.  Each batch
re-propagates attention from the current parameters and contributes the
reconstruction rows of the users and POIs it touches, rescaled so the
expectation matches the full L_A.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import evaluation
from .errors import DimensionMismatch, InvalidConfig, NoNegativeAvailable
from .model import (
    ModelDims,
    ModelParams,
    Scorer,
    TreeIndex,
    build_user_history,
    init_params,
    softmax,
)


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 0.01
    lambda2: float = 0.1
    lambda_theta: float = 1.0
    gamma: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0
    r: int = 50
    r_impl: int = 150
    t_history: int = 3
    use_attention: bool = True
    init_scale: float = 0.01
    k_select: int = 10

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise InvalidConfig("learning_rate must be positive")
        if self.epochs < 0:
            raise InvalidConfig("epochs must be non-negative")
        if self.batch_size <= 0:
            raise InvalidConfig("batch_size must be positive")
        if self.r <= 0 or self.r_impl <= 0 or self.t_history <= 0:
            raise InvalidConfig("r, r_impl, t_history must be positive")
        for name in ("lambda1", "lambda2", "lambda_theta"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be non-negative")


class Triple(NamedTuple):
    u: int
    pos: int
    neg: int
    level: int


@dataclass
class TrainEnv:
    """Everything the loop needs, resolved to row indices."""

    index: TreeIndex
    x: np.ndarray                                   # m x f user targets
    y: dict[int, np.ndarray]                        # level -> n_l x f POI targets
    graphs: dict[int, object]
    history: dict[int, list[np.ndarray]]
    train_pairs: dict[int, list[tuple[int, int]]]   # distinct (u, p) per level
    train_pos: dict[int, list[set[int]]]            # per level, per user row
    val_relevant: dict[int, dict[int, set[int]]]
    user_row: dict[str, int] = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.x.shape[0]


def make_env(index: TreeIndex, features, split, graphs, history) -> TrainEnv:
    user_row = {uid: i for i, uid in enumerate(features.user_ids)}
    x = features.x
    y = {level: features.y(level) for level in range(1, index.depth + 1)}
    train_pairs: dict[int, list[tuple[int, int]]] = {}
    train_pos: dict[int, list[set[int]]] = {}
    val_relevant: dict[int, dict[int, set[int]]] = {}
    for level in range(1, index.depth + 1):
        row_of = {pid: i for i, pid in enumerate(index.level_ids[level - 1])}
        pos_sets: list[set[int]] = [set() for _ in range(len(user_row))]
        for ev in split.train.get(level, []):
            u = user_row.get(ev.user_id)
            if u is not None:
                pos_sets[u].add(row_of[ev.poi_id])
        train_pos[level] = pos_sets
        train_pairs[level] = sorted(
            (u, p) for u in range(len(pos_sets)) for p in pos_sets[u])
        rel: dict[int, set[int]] = {}
        for ev in split.validation.get(level, []):
            u = user_row.get(ev.user_id)
            if u is not None:
                rel.setdefault(u, set()).add(row_of[ev.poi_id])
        val_relevant[level] = rel
    return TrainEnv(index=index, x=x, y=y, graphs=graphs, history=history,
                    train_pairs=train_pairs, train_pos=train_pos,
                    val_relevant=val_relevant, user_row=user_row)


def dims_for(env: TrainEnv, cfg: TrainConfig) -> ModelDims:
    return ModelDims.create(
        m=env.m, n=env.index.n, f=env.x.shape[1], r=cfg.r, r_impl=cfg.r_impl,
        t_history=cfg.t_history, use_attention=cfg.use_attention)


# --- losses ---------------------------------------------------------------------


def _log_sigmoid(x: float) -> float:
    # ln sigma(x), stable on both tails
    return -float(np.logaddexp(0.0, -x))


def _sigmoid_neg(x: float) -> float:
    # sigma(-x), stable on both tails
    return float(0.5 * (1.0 - np.tanh(0.5 * x)))


def attribute_loss(params: ModelParams, x: np.ndarray, y: dict[int, np.ndarray]) -> float:
    """Full squared reconstruction error over users and every level."""
    if x.shape != (params.dims.m, params.dims.f):
        raise DimensionMismatch(f"user targets are {x.shape}, "
                                f"expected {(params.dims.m, params.dims.f)}")
    total = float(((params.u_w @ params.v - x) ** 2).sum())
    for level in range(1, params.dims.depth + 1):
        target = y[level]
        n_l = params.dims.n[level - 1]
        if target.shape != (n_l, params.dims.f):
            raise DimensionMismatch(f"level {level} targets are {target.shape}")
        total += float(((params.p_w[level - 1] @ params.v - target) ** 2).sum())
    return total


def interaction_loss(scorer: Scorer, triples) -> float:
    """Pairwise log loss: -sum ln sigma(score(pos) - score(neg))."""
    total = 0.0
    for t in triples:
        gap = scorer.total_score(t.u, t.pos, t.level) - scorer.total_score(t.u, t.neg, t.level)
        total -= _log_sigmoid(gap)
    return total


def total_loss(params: ModelParams, scorer: Scorer, triples, x, y,
               cfg: TrainConfig) -> float:
    return (cfg.lambda1 * attribute_loss(params, x, y)
            + cfg.lambda2 * interaction_loss(scorer, triples)
            + cfg.lambda_theta * params.frobenius_sq())


# --- analytic gradients -------------------------------------------------------------


class LossParts(NamedTuple):
    total: float
    l_a: float          # batch-rescaled attribute reconstruction, unweighted
    l_i: float          # pairwise log loss, unweighted
    reg: float          # squared Frobenius norm of all tensors


class _AttnState(NamedTuple):
    z: np.ndarray              # n_child x d1 hidden activations
    s: np.ndarray              # n_child pre-activation scalars
    weights: list[np.ndarray]  # per parent, softmax-normalized
    a_p: np.ndarray            # n_parent x r_child


def _attention_forward(params: ModelParams, index: TreeIndex) -> list:
    """Propagation caches per non-leaf level (list index level-1)."""
    states: list = [None] * params.dims.depth
    if not params.dims.use_attention:
        return states
    for level in range(1, params.dims.depth):
        li = level - 1
        h_child = params.h_p[level]
        z = h_child @ params.attn_w1[li].T + params.attn_b1[li]
        s = z @ params.attn_d[li]
        w_raw = np.maximum(s, 0.0) + params.attn_b2[li][0]
        a_p = np.zeros((params.dims.n[li], params.dims.r_impl[level]))
        weights: list[np.ndarray] = []
        for i, rows in enumerate(index.child_rows[li]):
            if len(rows) == 0:
                weights.append(np.zeros(0))
                continue
            w = softmax(w_raw[rows])
            a_p[i] = w @ h_child[rows]
            weights.append(w)
        states[li] = _AttnState(z=z, s=s, weights=weights, a_p=a_p)
    return states


def _geo_terms(params: ModelParams, env: TrainEnv, u: int, p: int, level: int):
    """(historical score, history rows, factor products, mu) for one pair."""
    li = level - 1
    rows = env.history[level][u]
    if len(rows) == 0:
        return 0.0, rows, (), np.zeros(params.dims.r_impl[li])
    graph = env.graphs[level]
    h_p = params.h_p[li]
    factors = tuple(graph.factor_product(p, int(j)) for j in rows)
    mu = np.zeros(params.dims.r_impl[li])
    for j, c in zip(rows, factors):
        mu += c * h_p[int(j)]
    mu /= len(rows)
    return float(params.h_u[li][u] @ mu), rows, factors, mu


def batch_parts(params: ModelParams, triples, env: TrainEnv, cfg: TrainConfig,
                with_grads: bool = True):
    """Loss parts of one batch and, optionally, their exact gradients.

    The attribute term covers only the rows the batch touches, scaled by
    (total rows / touched rows) per side.  The returned gradients are the
    exact derivatives of the returned total.
    """
    dims = params.dims
    depth = dims.depth
    attn = _attention_forward(params, env.index)
    grads: dict[str, np.ndarray] | None = None
    if with_grads:
        grads = {name: np.zeros_like(arr) for name, arr in params.named_tensors()}

    # -- pairwise ranking term ----------------------------------------------------
    l_i = 0.0
    ap_grads: list[np.ndarray | None] = [None] * depth
    touched_parents: list[set[int]] = [set() for _ in range(depth)]
    gamma = cfg.gamma
    for t in triples:
        li = t.level - 1
        u_w, p_w = params.u_w, params.p_w[li]
        h_u, h_p = params.h_u[li], params.h_p[li]
        inter = dims.use_attention and t.level < depth
        sides = []
        gap = 0.0
        for p, sign in ((t.pos, 1.0), (t.neg, -1.0)):
            score = float(u_w[t.u] @ p_w[p]) + float(h_u[t.u] @ h_p[p])
            if inter:
                score += float(params.a_u[li][t.u] @ attn[li].a_p[p])
            if gamma != 0.0:
                o_h, rows, factors, mu = _geo_terms(params, env, t.u, p, t.level)
                score += gamma * o_h
            else:
                rows, factors, mu = (), (), None
            gap += sign * score
            sides.append((p, sign, rows, factors, mu))
        l_i -= _log_sigmoid(gap)
        if grads is None:
            continue
        coef = -cfg.lambda2 * _sigmoid_neg(gap)  # lambda2 * (sigma(gap) - 1)
        g_uw = grads["U_W"]
        g_pw = grads[f"P_W[{t.level}]"]
        g_hu = grads[f"H_u[{t.level}]"]
        g_hp = grads[f"H_p[{t.level}]"]
        for p, sign, rows, factors, mu in sides:
            c = coef * sign
            g_uw[t.u] += c * p_w[p]
            g_pw[p] += c * u_w[t.u]
            if gamma != 0.0 and mu is not None:
                g_hu[t.u] += c * (h_p[p] + gamma * mu)
                g_hp[p] += c * h_u[t.u]
                if len(rows):
                    scale = c * gamma / len(rows)
                    for j, fac in zip(rows, factors):
                        g_hp[int(j)] += (scale * fac) * h_u[t.u]
            else:
                g_hu[t.u] += c * h_p[p]
                g_hp[p] += c * h_u[t.u]
            if inter:
                grads[f"A_u[{t.level}]"][t.u] += c * attn[li].a_p[p]
                if ap_grads[li] is None:
                    ap_grads[li] = np.zeros_like(attn[li].a_p)
                ap_grads[li][p] += c * params.a_u[li][t.u]
                touched_parents[li].add(p)

    # -- attention backward: softmax and ReLU chain --------------------------------
    if grads is not None:
        for li in range(depth - 1):
            if ap_grads[li] is None:
                continue
            state = attn[li]
            level = li + 1
            h_child = params.h_p[level]
            w1 = params.attn_w1[li]
            d_vec = params.attn_d[li]
            g_hp_child = grads[f"H_p[{level + 1}]"]
            g_w1 = grads[f"attn_w1[{level}]"]
            g_b1 = grads[f"attn_b1[{level}]"]
            g_d = grads[f"attn_d[{level}]"]
            g_b2 = grads[f"attn_b2[{level}]"]
            for i in sorted(touched_parents[li]):
                g = ap_grads[li][i]
                rows = env.index.child_rows[li][i]
                if len(rows) == 0:
                    continue
                w = state.weights[i]
                q = h_child[rows] @ g                      # dL/dw_tilde
                dw = w * (q - float(w @ q))                # softmax backward
                g_hp_child[rows] += np.outer(w, g)         # direct path
                g_b2[0] += dw.sum()
                ds = dw * (state.s[rows] > 0.0)            # ReLU gate
                if ds.any():
                    g_d += state.z[rows].T @ ds
                    dz = np.outer(ds, d_vec)               # |rows| x d1
                    g_w1 += dz.T @ h_child[rows]
                    g_b1 += dz.sum(axis=0)
                    g_hp_child[rows] += dz @ w1

    # -- subsampled attribute reconstruction ---------------------------------------
    l_a = 0.0
    batch_users = sorted({t.u for t in triples})
    if batch_users:
        scale_u = dims.m / len(batch_users)
        v = params.v
        for u in batch_users:
            err = params.u_w[u] @ v - env.x[u]
            l_a += scale_u * float(err @ err)
            if grads is not None:
                cu = 2.0 * cfg.lambda1 * scale_u
                grads["U_W"][u] += cu * (v @ err)
                grads["V"] += cu * np.outer(params.u_w[u], err)
        for level in range(1, depth + 1):
            rows = sorted({t.pos for t in triples if t.level == level}
                          | {t.neg for t in triples if t.level == level})
            if not rows:
                continue
            scale_p = dims.n[level - 1] / len(rows)
            y = env.y[level]
            p_w = params.p_w[level - 1]
            for p in rows:
                err = p_w[p] @ v - y[p]
                l_a += scale_p * float(err @ err)
                if grads is not None:
                    cp = 2.0 * cfg.lambda1 * scale_p
                    grads[f"P_W[{level}]"][p] += cp * (v @ err)
                    grads["V"] += cp * np.outer(p_w[p], err)

    # -- Frobenius regularizer -------------------------------------------------------
    reg = params.frobenius_sq()
    if grads is not None and cfg.lambda_theta != 0.0:
        for name, arr in params.named_tensors():
            grads[name] += (2.0 * cfg.lambda_theta) * arr

    total = cfg.lambda1 * l_a + cfg.lambda2 * l_i + cfg.lambda_theta * reg
    return LossParts(total=total, l_a=l_a, l_i=l_i, reg=reg), grads


def batch_loss(params: ModelParams, triples, env: TrainEnv, cfg: TrainConfig) -> LossParts:
    parts, _ = batch_parts(params, triples, env, cfg, with_grads=False)
    return parts


def gradients(params: ModelParams, triples, env: TrainEnv,
              cfg: TrainConfig) -> tuple[LossParts, dict[str, np.ndarray]]:
    parts, grads = batch_parts(params, triples, env, cfg, with_grads=True)
    assert grads is not None
    return parts, grads


# --- negative sampling -----------------------------------------------------------------


def sample_negative(positives: set[int], n_pois: int, rng) -> int:
    """Uniform draw over the level's POIs the user has not visited in train."""
    free = n_pois - len(positives)
    if free <= 0:
        raise NoNegativeAvailable(
            f"user's positives cover all {n_pois} POIs of the level")
    if len(positives) * 2 < n_pois:
        while True:
            cand = int(rng.integers(n_pois))
            if cand not in positives:
                return cand
    pool = [p for p in range(n_pois) if p not in positives]
    return pool[int(rng.integers(len(pool)))]


# --- Adagrad ----------------------------------------------------------------------------


def init_adagrad(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.named_tensors()}


def adagrad_step(params: ModelParams, grads: dict[str, np.ndarray],
                 state: dict[str, np.ndarray], lr: float, eps: float = 1e-8) -> None:
    """acc += g^2; theta -= lr * g / (sqrt(acc) + eps), per entry."""
    for name, arr in params.named_tensors():
        g = grads[name]
        acc = state[name]
        acc += g * g
        arr -= lr * g / (np.sqrt(acc) + eps)


# --- the loop ------------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    total_loss: float
    l_a: float
    l_i: float
    val_precision: float
    val_ndcg: float


@dataclass
class TrainResult:
    params: ModelParams          # best validation state (final when no validation)
    final_params: ModelParams
    history: list[EpochStats]
    best_epoch: int
    dims: ModelDims


HISTORY_HEADER = ("epoch", "total_loss", "L_A", "L_I", "val_P@10", "val_NDCG@10")


def write_history_csv(history: list[EpochStats], path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for row in history:
            writer.writerow([row.epoch, f"{row.total_loss:.12g}", f"{row.l_a:.12g}",
                             f"{row.l_i:.12g}", f"{row.val_precision:.12g}",
                             f"{row.val_ndcg:.12g}"])


def _validation_metrics(params: ModelParams, env: TrainEnv, cfg: TrainConfig):
    """Pooled validation P@k_select and NDCG@10 over (user, level) pairs."""
    scorer = Scorer(params, env.index, graphs=env.graphs, history=env.history,
                    gamma=cfg.gamma)
    precisions: list[float] = []
    ndcgs: list[float] = []
    for level in range(1, env.index.depth + 1):
        relevant = env.val_relevant.get(level, {})
        for u in sorted(relevant):
            rel = relevant[u]
            if not rel:
                continue
            scores = scorer.score_level(u, level)
            exclude = env.train_pos[level][u]
            order = np.lexsort((np.arange(len(scores)), -scores))
            ranked = [int(r) for r in order if int(r) not in exclude]
            precisions.append(evaluation.precision_at_k(ranked, rel, cfg.k_select))
            ndcgs.append(evaluation.ndcg_at_k(ranked, rel, 10))
    if not precisions:
        return 0.0, 0.0, False
    return float(np.mean(precisions)), float(np.mean(ndcgs)), True


def train(env: TrainEnv, cfg: TrainConfig) -> TrainResult:
    """Run the full loop and return the best-validation parameters.

    Only train events drive gradients and negative sampling; validation
    events are consulted solely for the per-epoch metrics used to pick the
    returned checkpoint.  With zero epochs the initial state comes back
    with an empty history.
    """
    cfg.validate()
    dims = dims_for(env, cfg)
    params = init_params(dims, seed=cfg.seed, scale=cfg.init_scale)
    if cfg.epochs == 0:
        return TrainResult(params=params.copy(), final_params=params,
                           history=[], best_epoch=0, dims=dims)
    state = init_adagrad(params)
    loop_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    n_levels = env.index.n
    # positives of a user who has seen an entire level cannot form a valid
    # pair — there is no unvisited POI to rank below them — so they are
    # left out of the epoch enumeration
    all_pos = [(level, u, p)
               for level in sorted(env.train_pairs)
               for (u, p) in env.train_pairs[level]
               if len(env.train_pos[level][u]) < n_levels[level - 1]]
    if not all_pos:
        raise InvalidConfig("no training pairs: the train split is empty")

    history: list[EpochStats] = []
    best_params = None
    best_p = -1.0
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = loop_rng.permutation(len(all_pos))
        sum_total = sum_la = sum_li = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            triples = []
            for idx in chunk:
                level, u, p = all_pos[int(idx)]
                neg = sample_negative(env.train_pos[level][u],
                                      n_levels[level - 1], loop_rng)
                triples.append(Triple(u=u, pos=p, neg=neg, level=level))
            parts, grads = gradients(params, triples, env, cfg)
            adagrad_step(params, grads, state, cfg.learning_rate)
            sum_total += parts.total
            sum_la += parts.l_a
            sum_li += parts.l_i
            n_batches += 1
        val_p, val_ndcg, has_val = _validation_metrics(params, env, cfg)
        history.append(EpochStats(
            epoch=epoch,
            total_loss=sum_total / n_batches,
            l_a=sum_la / n_batches,
            l_i=sum_li / n_batches,
            val_precision=val_p,
            val_ndcg=val_ndcg,
        ))
        if has_val and val_p > best_p:
            best_p = val_p
            best_epoch = epoch
            best_params = params.copy()
    if best_params is None:
        best_params = params.copy()
        best_epoch = len(history)
    return TrainResult(params=best_params, final_params=params, history=history,
                       best_epoch=best_epoch, dims=dims)
