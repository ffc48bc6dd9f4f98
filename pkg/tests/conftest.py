import numpy as np
import pytest

from levelrec.bundle import PipelineConfig, build_bundle
from levelrec.dataset import SynthConfig, generate_synthetic
from levelrec.model import ModelDims, init_params
from levelrec.training import TrainConfig, make_env


def tiny_dims(m=4, n=(2, 3, 5), r=3, r_impl=4, use_attention=True):
    return ModelDims.create(m=m, n=tuple(n), f=6, r=r, r_impl=r_impl,
                            use_attention=use_attention)


def small_tree_profiles():
    """Two regions, four venues, eight shops; hand-placed coordinates."""
    recs = [
        {"poi_id": "r1", "parent_id": None, "lat": 40.00, "lon": 116.30,
         "attrs": ["north"]},
        {"poi_id": "r2", "parent_id": None, "lat": 39.90, "lon": 116.40,
         "attrs": ["south"]},
        {"poi_id": "v1", "parent_id": "r1", "lat": 40.01, "lon": 116.29,
         "attrs": ["mall"]},
        {"poi_id": "v2", "parent_id": "r1", "lat": 39.99, "lon": 116.31,
         "attrs": ["park"]},
        {"poi_id": "v3", "parent_id": "r2", "lat": 39.91, "lon": 116.39,
         "attrs": ["mall"]},
        {"poi_id": "v4", "parent_id": "r2", "lat": 39.89, "lon": 116.41,
         "attrs": ["museum"]},
    ]
    for i in range(8):
        parent = f"v{i // 2 + 1}"
        base = next(r for r in recs if r["poi_id"] == parent)
        recs.append({
            "poi_id": f"s{i + 1}", "parent_id": parent,
            "lat": base["lat"] + 0.001 * (i % 2), "lon": base["lon"] - 0.001 * (i % 2),
            "attrs": ["food"] if i % 2 else ["retail"],
        })
    return recs


@pytest.fixture(scope="session")
def synth_small():
    cfg = SynthConfig(m=60, levels=(5, 15, 45), events_per_user=50,
                      span_days=90.0)
    return generate_synthetic(cfg, seed=7)


@pytest.fixture(scope="session")
def bundle_small(synth_small):
    pcfg = PipelineConfig(min_user_checkins=5, min_poi_visitors=5,
                          train_window_days=60.0)
    return build_bundle(synth_small.tree, synth_small.checkins,
                        synth_small.searches, synth_small.user_profiles, pcfg)


@pytest.fixture(scope="session")
def env_small(bundle_small):
    b = bundle_small
    return make_env(b.index, b.features, b.split, b.graphs, b.history)


@pytest.fixture(scope="session")
def quick_cfg():
    return TrainConfig(epochs=4, r=8, r_impl=16, lambda_theta=1e-3,
                       learning_rate=0.05, batch_size=128, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_params(dims, seed=0, scale=1.0):
    """Init and rescale so ReLU pre-activations sit away from zero."""
    return init_params(dims, seed=seed).scale(scale)
