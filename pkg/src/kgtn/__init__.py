"""Knowledge-graph transfer of classifier weights for few-shot recognition.

Classifier weight rows are treated as category prototypes, refined by gated
message passing over a category-correlation graph, and trained in two
stages (feature extractor first, then weights/gating/scale on balanced
base+novel batches).
"""

from . import backend
from .autodiff import ParamSet, Tape, finite_difference_check
from .config import ExperimentConfig, load_config
from .data import (FewShotDataset, FewShotSplit, SyntheticTaxonomyConfig,
                   generate_synthetic, load_features, make_kshot_split, save_features)
from .evaluation import EvalReport, run_trials, topk_accuracy
from .ggnn import (GGNNParams, WeightTable, aggregate, gated_update, init_hidden,
                   load_checkpoint, propagate, save_checkpoint)
from .graphs import (CategoryGraph, EmbeddingTable, HierarchyEdges,
                     build_hierarchy_graph, build_random_graph,
                     build_semantic_graph, build_uniform_graph, load_graph,
                     save_graph)
from .heads import METRICS, predict_probs, score
from .training import (FeatureExtractor, Stage1Config, Stage2Config,
                       sample_balanced_batch, sgd_step, stage1_loss, stage2_loss,
                       train_stage1, train_stage2)

__version__ = "0.1.0"

__all__ = [
    "ParamSet", "Tape", "finite_difference_check",
    "ExperimentConfig", "load_config",
    "FewShotDataset", "FewShotSplit", "SyntheticTaxonomyConfig",
    "generate_synthetic", "load_features", "make_kshot_split", "save_features",
    "EvalReport", "run_trials", "topk_accuracy",
    "GGNNParams", "WeightTable", "aggregate", "gated_update", "init_hidden",
    "load_checkpoint", "propagate", "save_checkpoint",
    "CategoryGraph", "EmbeddingTable", "HierarchyEdges",
    "build_hierarchy_graph", "build_random_graph", "build_semantic_graph",
    "build_uniform_graph", "load_graph", "save_graph",
    "METRICS", "predict_probs", "score",
    "FeatureExtractor", "Stage1Config", "Stage2Config",
    "sample_balanced_batch", "sgd_step", "stage1_loss", "stage2_loss",
    "train_stage1", "train_stage2",
    "backend",
]
