"""Ten end-to-end checks that gate the package as a whole.

Each numbered test prints one verdict line (visible under ``pytest -s``)
and asserts the property named in the line.  The heavy artifacts — the
m=200 benchmark bundle and its 50-epoch training run, plus the eight-seed
variant comparison — are session fixtures shared by every test that needs
them, so the whole module costs a few minutes, not per-test retraining.
"""

import dataclasses
import time
from contextlib import contextmanager

import numpy as np
import pytest

from levelrec.bundle import PipelineConfig, build_bundle
from levelrec.dataset import SynthConfig, generate_synthetic
from levelrec.evaluation import (
    ablation, evaluate_model, ndcg_at_k, precision_at_k, relevance_rows)
from levelrec.hints import interaction_aspect, poi_aspect, user_aspect
from levelrec.model import (
    ModelDims, Scorer, TreeIndex, attention_propagate, init_params,
    load_checkpoint, save_checkpoint)
from levelrec.poi_tree import build_tree
from levelrec.training import (
    TrainConfig, Triple, attribute_loss, gradients, interaction_loss,
    make_env, train)

from conftest import random_params, tiny_dims
from test_evaluation import _brute_ndcg, _brute_precision
from test_training import _fd_triples, _hand_env, _numeric_grads

# pinned tolerances
GRAD_TOL = 1e-4          # max relative error vs central differences
METRIC_TOL = 1e-12       # ranking metrics vs brute force
ATTN_TOL = 1e-9          # attention weight sums
LN2_TOL = 1e-9           # equal-score pairwise loss spot value
RECON_TOL = 1e-12        # perfect-reconstruction attribute loss
SCORE_TOL = 1e-12        # factor product vs dense matrix product
HAND_NDCG = 0.9197207891481877   # hits at ranks 1 and 3, two relevant, k=3

# the seeded benchmark: strong preference structure, light noise, and a
# model capped well below interpolation so the learning signal is clean
BENCH_SYNTH = SynthConfig(m=200, levels=(10, 50, 200), events_per_user=60,
                          span_days=90.0, noise_rate=0.02, hier_mix=0.95,
                          latent_dim=4, temperature=0.35)
BENCH_TRAIN = TrainConfig(epochs=50, r=16, r_impl=32, lambda_theta=1e-3,
                          learning_rate=0.05, batch_size=256, seed=0)
BENCH_SEED = 0
RANDOM_MARGIN = 3.0      # trained NDCG@10 must beat random by this factor
BENCH_BUDGET_S = 300.0

# the variant comparison: sparse check-ins and a small embedding budget,
# where the inter-level and geospatial pathways have room to matter
TREND_SYNTH = SynthConfig(m=160, levels=(12, 48, 192), events_per_user=24,
                          span_days=90.0, noise_rate=0.02, hier_mix=0.7,
                          latent_dim=4, temperature=0.35)
TREND_PIPE = PipelineConfig(min_user_checkins=5, min_poi_visitors=5,
                            cosearch_window_s=3600, covisit_window_s=3600)
TREND_TRAIN = TrainConfig(epochs=40, r=8, r_impl=8, lambda_theta=1e-3,
                          learning_rate=0.05, batch_size=256)
TREND_SEEDS = range(8)
TREND_SLACK = 0.005      # allowed mean shortfall of M2 under M1
TREND_BUDGET_S = 1200.0


@contextmanager
def _verdict(num, label):
    try:
        yield
    except BaseException:
        print(f"[{num:2d}/10] FAIL {label}")
        raise
    print(f"[{num:2d}/10] PASS {label}")


# --- shared heavy artifacts --------------------------------------------------------


@pytest.fixture(scope="session")
def bench_bundle():
    data = generate_synthetic(BENCH_SYNTH, seed=BENCH_SEED)
    return build_bundle(data.tree, data.checkins, data.searches,
                        data.user_profiles, PipelineConfig())


@pytest.fixture(scope="session")
def bench_env(bench_bundle):
    b = bench_bundle
    return make_env(b.index, b.features, b.split, b.graphs, b.history)


@pytest.fixture(scope="session")
def bench_run(bench_env):
    t0 = time.monotonic()
    result = train(bench_env, BENCH_TRAIN)
    return result, time.monotonic() - t0


@pytest.fixture(scope="session")
def bench_eval(bench_bundle, bench_env, bench_run):
    """Test-split NDCG@10 per level plus a Monte Carlo random baseline."""
    result, train_secs = bench_run
    t0 = time.monotonic()
    table = evaluate_model(result.params, bench_env, bench_bundle.split.test,
                           ks=(10,), gamma=BENCH_TRAIN.gamma)
    rel = relevance_rows(bench_bundle.split.test, bench_env.user_row,
                         bench_env.index)
    rng = np.random.default_rng(123)
    baselines = {}
    for level in (1, 2, 3):
        n_l = bench_env.index.n[level - 1]
        sample_means = []
        for _ in range(100):
            per_user = []
            for u, relevant in rel[level].items():
                if not relevant:
                    continue
                exclude = bench_env.train_pos[level][u]
                ranked = [int(r) for r in rng.permutation(n_l)
                          if int(r) not in exclude]
                per_user.append(ndcg_at_k(ranked, relevant, 10))
            sample_means.append(np.mean(per_user))
        baselines[level] = float(np.mean(sample_means))
    secs = train_secs + (time.monotonic() - t0)
    return table, baselines, secs


# --- 1. analytic gradients ---------------------------------------------------------


def test_c01_gradients_match_central_differences():
    t0 = time.monotonic()
    env = _hand_env()
    cfg = TrainConfig(lambda1=0.3, lambda2=0.7, lambda_theta=0.05, gamma=0.8,
                      r=3, r_impl=4, t_history=2)
    params = random_params(tiny_dims(), seed=11, scale=50.0)
    triples = _fd_triples()
    _, analytic = gradients(params, triples, env, cfg)
    numeric = _numeric_grads(params, triples, env, cfg)
    worst = 0.0
    with _verdict(1, "analytic gradients match central differences"):
        for name, gn in numeric.items():
            err = float(np.max(np.abs(analytic[name] - gn)
                               / np.maximum(np.abs(gn), 1e-3)))
            worst = max(worst, err)
            assert err < GRAD_TOL, f"{name}: max rel err {err:.3e}"
        assert time.monotonic() - t0 < 10.0


# --- 2. ranking metric oracles -----------------------------------------------------


def test_c02_metrics_agree_with_brute_force():
    rng = np.random.default_rng(20260501)
    with _verdict(2, "P@k and NDCG@k match brute force on 1000 instances"):
        for _ in range(1000):
            n = int(rng.integers(3, 30))
            take = int(rng.integers(1, n + 1))
            ranked = [int(r) for r in rng.permutation(n)[:take]]
            relevant = {int(r) for r in
                        rng.choice(n, size=int(rng.integers(1, n + 1)),
                                   replace=False)}
            k = int(rng.integers(1, n + 2))
            assert abs(precision_at_k(ranked, relevant, k)
                       - _brute_precision(ranked, relevant, k)) < METRIC_TOL
            assert abs(ndcg_at_k(ranked, relevant, k)
                       - _brute_ndcg(ranked, relevant, k)) < METRIC_TOL
        # two relevant items ranked first and third, cut at three
        assert abs(ndcg_at_k([7, 3, 9], {7, 9}, 3) - HAND_NDCG) < METRIC_TOL


# --- 3. attention weight invariants ------------------------------------------------


def _random_two_level_tree(rng):
    """A parent level of five nodes; parent p0 always has a single child."""
    recs = [{"poi_id": f"p{i}", "parent_id": None,
             "lat": 40.0 + 0.01 * i, "lon": 116.3 + 0.01 * i}
            for i in range(5)]
    counts = [1] + [int(rng.integers(1, 7)) for _ in range(4)]
    child = 0
    for parent, c in enumerate(counts):
        for _ in range(c):
            recs.append({"poi_id": f"c{child}", "parent_id": f"p{parent}",
                         "lat": 40.0 + 0.001 * child,
                         "lon": 116.3 + 0.001 * child})
            child += 1
    return build_tree(recs), counts, child


def test_c03_attention_weights_are_proper():
    rng = np.random.default_rng(31)
    parents_checked = 0
    with _verdict(3, "attention weights: sum 1, non-negative, uniform on "
                     "duplicates, single child verbatim"):
        while parents_checked < 100:
            tree, counts, n_child = _random_two_level_tree(rng)
            index = TreeIndex(tree)
            dims = ModelDims.create(m=3, n=(5, n_child), f=4, r=3, r_impl=4)
            params = random_params(dims, seed=int(rng.integers(1 << 30)),
                                   scale=rng.uniform(0.5, 30.0))
            # duplicated children: every child of p4 shares one embedding
            dup_rows = index.child_rows[0][4]
            params.h_p[1][dup_rows] = params.h_p[1][dup_rows[0]]
            a_p, weights = attention_propagate(params, index, 1)
            for parent, w in enumerate(weights):
                assert abs(float(w.sum()) - 1.0) < ATTN_TOL
                assert (w >= 0.0).all()
                parents_checked += 1
            single_row = index.child_rows[0][0][0]
            assert np.allclose(a_p[0], params.h_p[1][single_row],
                               rtol=0.0, atol=ATTN_TOL)
            dup_w = weights[4]
            assert np.max(np.abs(dup_w - 1.0 / len(dup_w))) < ATTN_TOL


# --- 4. loss spot values -----------------------------------------------------------


def test_c04_loss_spot_values():
    env = _hand_env()
    zero = random_params(tiny_dims(), seed=5).scale(0.0)
    scorer = Scorer(zero, env.index, graphs=env.graphs, history=env.history,
                    gamma=1.0)
    with _verdict(4, "equal scores give ln 2; exact reconstruction gives 0"):
        loss = interaction_loss(scorer, [Triple(u=0, pos=0, neg=1, level=3)])
        assert abs(loss - np.log(2.0)) < LN2_TOL
        params = random_params(tiny_dims(), seed=9, scale=2.0)
        x = params.u_w @ params.v
        y = {level: params.p_w[level - 1] @ params.v
             for level in (1, 2, 3)}
        assert abs(attribute_loss(params, x, y)) < RECON_TOL


# --- 5. factor product against a dense oracle --------------------------------------


def test_c05_feature_scores_equal_dense_product():
    # 20 parents x 5 children gives the 100-leaf level
    recs = [{"poi_id": f"a{i}", "parent_id": None,
             "lat": 40.0 + 0.01 * i, "lon": 116.0 + 0.01 * i}
            for i in range(20)]
    recs += [{"poi_id": f"b{i}", "parent_id": f"a{i % 20}",
              "lat": 40.0 + 0.001 * i, "lon": 116.0 + 0.001 * i}
             for i in range(100)]
    index = TreeIndex(build_tree(recs))
    dims = ModelDims.create(m=50, n=(20, 100), f=8, r=6, r_impl=5)
    params = random_params(dims, seed=17, scale=3.0)
    scorer = Scorer(params, index, gamma=0.0)
    with _verdict(5, "feature scores equal the dense factor product"):
        for level in (1, 2):
            li = level - 1
            blocks_u = [params.u_w, params.h_u[li]]
            blocks_p = [params.p_w[li], params.h_p[li]]
            if level < dims.depth:
                blocks_u.append(params.a_u[li])
                blocks_p.append(attention_propagate(params, index, level)[0])
            dense = np.hstack(blocks_u) @ np.hstack(blocks_p).T
            for u in range(dims.m):
                row = scorer.feature_score_level(u, level)
                assert np.max(np.abs(row - dense[u])) < SCORE_TOL
                for p in (0, dims.n[li] // 2, dims.n[li] - 1):
                    got = scorer.feature_score(u, p, level)
                    assert abs(got - dense[u, p]) < SCORE_TOL


# --- 6. end-to-end learning signal -------------------------------------------------


def test_c06_benchmark_beats_random_ranking(bench_run, bench_eval):
    result, _ = bench_run
    table, baselines, secs = bench_eval
    first10 = [h.total_loss for h in result.history[:10]]
    with _verdict(6, "benchmark: loss falls and mid/leaf levels beat "
                     "3x random"):
        assert all(b < a for a, b in zip(first10, first10[1:])), \
            f"first-10 losses not decreasing: {first10}"
        for level in (2, 3):
            got = table.get(level, 10).ndcg
            floor = RANDOM_MARGIN * baselines[level]
            assert got > floor, (f"level {level}: NDCG@10 {got:.4f} "
                                 f"<= {floor:.4f}")
        assert secs < BENCH_BUDGET_S, f"took {secs:.0f}s"


@pytest.mark.xfail(strict=False, reason="ten top-level candidates leave a "
                   "uniform random ranking with NDCG@10 near 0.45, so a 3x "
                   "margin is arithmetically out of reach at that level")
def test_c06_top_level_margin_over_random(bench_eval):
    table, baselines, _ = bench_eval
    got = table.get(1, 10).ndcg
    assert got > RANDOM_MARGIN * baselines[1]


# --- 7. variant ordering across seeds ----------------------------------------------


def test_c07_variant_ordering_over_seeds():
    t0 = time.monotonic()
    sums = {v: np.zeros(3) for v in ("M1", "M2", "M3")}
    n_seeds = 0
    for seed in TREND_SEEDS:
        data = generate_synthetic(TREND_SYNTH, seed=seed)
        bundle = build_bundle(data.tree, data.checkins, data.searches,
                              data.user_profiles, TREND_PIPE)
        env = make_env(bundle.index, bundle.features, bundle.split,
                       bundle.graphs, bundle.history)
        cfg = dataclasses.replace(TREND_TRAIN, seed=seed)
        out = ablation(env, bundle.split.test, cfg, ks=(10,))
        for variant, (_, table) in out.items():
            sums[variant] += [table.get(level, 10).ndcg
                              for level in (1, 2, 3)]
        n_seeds += 1
    mean = {v: sums[v] / n_seeds for v in sums}
    secs = time.monotonic() - t0
    with _verdict(7, f"variant ordering holds over {n_seeds} seeds"):
        assert n_seeds >= 5
        for li in (0, 1):
            assert mean["M3"][li] >= mean["M2"][li], \
                (li + 1, mean["M3"][li], mean["M2"][li])
            assert mean["M2"][li] >= mean["M1"][li] - TREND_SLACK, \
                (li + 1, mean["M2"][li], mean["M1"][li])
        assert mean["M3"][2] >= mean["M1"][2], (mean["M3"][2], mean["M1"][2])
        assert secs < TREND_BUDGET_S, f"took {secs:.0f}s"


# --- 8. zero geospatial weight collapses the full model -----------------------------


def test_c08_zero_geo_weight_reproduces_reduced_variant(env_small,
                                                        bundle_small):
    cfg = TrainConfig(epochs=3, r=8, r_impl=8, lambda_theta=1e-3,
                      learning_rate=0.05, batch_size=128, gamma=0.0, seed=4)
    out = ablation(env_small, bundle_small.split.test, cfg, ks=(5, 10))
    with _verdict(8, "full model at zero geo weight equals the reduced "
                     "variant exactly"):
        assert out["M2"][1].rows == out["M3"][1].rows
        m2, m3 = out["M2"][0].params, out["M3"][0].params
        for (name, a), (_, b) in zip(m2.named_tensors(), m3.named_tensors()):
            assert np.array_equal(a, b), name


# --- 9. hint invariants ------------------------------------------------------------


def test_c09_hint_invariants():
    env = _hand_env()
    with _verdict(9, "hints: shares sum to 1, exact top-K count, "
                     "scale-invariant ratio"):
        for seed in range(20):
            params = random_params(tiny_dims(), seed=seed, scale=2.0)
            for level in (1, 2):
                for p in range(params.dims.n[level - 1]):
                    hint = poi_aspect(params, env.index, u=seed % 4, p=p,
                                      level=level)
                    assert abs(sum(hint.ratios) - 1.0) < ATTN_TOL
                    if len(hint.child_rows) == 1:
                        assert hint.ratios == (1.0,)
        params = random_params(tiny_dims(), seed=3)
        for k in range(1, params.dims.f + 1):
            hint = user_aspect(params, u=1, p=2, level=3, k=k)
            assert len(hint.feature_columns) == k
            assert len(hint.feature_values) == k
        base = interaction_aspect(0.3, 0.8)
        assert interaction_aspect(0.3 * 4.0, 0.8 * 4.0).eta == base.eta
        scaled = interaction_aspect(0.3 * 3.7, 0.8 * 3.7)
        assert abs(scaled.eta - base.eta) <= 1e-12 * abs(base.eta)


# --- 10. data protocol and persistence ----------------------------------------------


def test_c10_data_protocol_and_checkpoint(bench_bundle, bench_run, tmp_path):
    bundle = bench_bundle
    leaf = bundle.index.depth
    with _verdict(10, "sparsity floor, leak-free split, bit-exact "
                      "checkpoint"):
        events = (bundle.split.train[leaf] + bundle.split.validation[leaf]
                  + bundle.split.test[leaf])
        by_user, by_poi = {}, {}
        for ev in events:
            by_user.setdefault(ev.user_id, set()).add(ev.poi_id)
            by_poi.setdefault(ev.poi_id, set()).add(ev.user_id)
        assert by_user and min(len(v) for v in by_user.values()) >= 10
        assert by_poi and min(len(v) for v in by_poi.values()) >= 10
        for level in range(1, bundle.index.depth + 1):
            train_pairs = {(ev.user_id, ev.poi_id)
                           for ev in bundle.split.train[level]}
            for part in ("validation", "test"):
                held = {(ev.user_id, ev.poi_id)
                        for ev in bundle.split.part(part)[level]}
                assert not (train_pairs & held), (level, part)
        result, _ = bench_run
        path = tmp_path / "model.bin"
        save_checkpoint(result.params, path)
        loaded = load_checkpoint(path, expected_dims=result.dims)
        for name, arr in result.params.named_tensors():
            assert np.array_equal(arr, loaded.tensor(name)), name
