"""Adaptive hierarchical loss for long-tailed next-location prediction."""

from hiertail.hierarchy import LabelHierarchy, build_hierarchy
from hiertail.ahl import (
    AdaptiveWeights,
    LeafDistribution,
    LossConfig,
    LossOutput,
    ablation_config,
    aggregate_levels,
    ahl_backward,
    ahl_forward,
    ce_forward_backward,
    conditional_path_probs,
    gumbel_softmax,
    sample_gumbel,
)
from hiertail.metrics import EvalReport, evaluate, mrr_at_k, ndcg_at_k, rank_of_true

__version__ = "0.1.0"

__all__ = [
    "AdaptiveWeights",
    "EvalReport",
    "LabelHierarchy",
    "LeafDistribution",
    "LossConfig",
    "LossOutput",
    "ablation_config",
    "aggregate_levels",
    "ahl_backward",
    "ahl_forward",
    "build_hierarchy",
    "ce_forward_backward",
    "conditional_path_probs",
    "evaluate",
    "gumbel_softmax",
    "mrr_at_k",
    "ndcg_at_k",
    "rank_of_true",
    "sample_gumbel",
]
