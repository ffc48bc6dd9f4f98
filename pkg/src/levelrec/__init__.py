"""Multi-level POI recommendation over a spatial containment hierarchy.

The model factorizes user and POI attribute matrices through a shared
feature factor, ranks check-ins with a pairwise objective over every level
of the POI tree, propagates child embeddings upward through attention, and
adds a context-graph geospatial term built from co-search, co-visit, and
distance relations.  Recommendation hints expose why a POI scored well.
"""

from .bundle import Bundle, PipelineConfig, build_bundle, load_bundle, save_bundle
from .context_graph import ContextGraph, build_graph
from .dataset import (
    DatasetSplit,
    Event,
    SynthConfig,
    SyntheticData,
    aggregate_upward,
    filter_sparse,
    generate_synthetic,
    ingest,
    split_chronological,
)
from .errors import DataError, LevelRecError, RuntimeFailure
from .evaluation import (
    MetricTable,
    ablation,
    evaluate,
    evaluate_model,
    ndcg_at_k,
    precision_at_k,
)
from .features import FeatureMatrices, build_features
from .hints import (
    interaction_aspect,
    poi_aspect,
    user_aspect,
)
from .model import (
    ModelDims,
    ModelParams,
    Scorer,
    TreeIndex,
    build_user_history,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .poi_tree import PoiTree, build_tree
from .training import TrainConfig, TrainResult, make_env, train

__version__ = "0.1.0"

__all__ = [
    "Bundle",
    "ContextGraph",
    "DataError",
    "DatasetSplit",
    "Event",
    "FeatureMatrices",
    "LevelRecError",
    "MetricTable",
    "ModelDims",
    "ModelParams",
    "PipelineConfig",
    "PoiTree",
    "RuntimeFailure",
    "Scorer",
    "SynthConfig",
    "SyntheticData",
    "TrainConfig",
    "TrainResult",
    "TreeIndex",
    "ablation",
    "aggregate_upward",
    "build_bundle",
    "build_features",
    "build_graph",
    "build_tree",
    "build_user_history",
    "evaluate",
    "evaluate_model",
    "filter_sparse",
    "generate_synthetic",
    "ingest",
    "init_params",
    "interaction_aspect",
    "load_bundle",
    "load_checkpoint",
    "make_env",
    "ndcg_at_k",
    "poi_aspect",
    "precision_at_k",
    "save_bundle",
    "save_checkpoint",
    "split_chronological",
    "train",
    "user_aspect",
    "__version__",
]
