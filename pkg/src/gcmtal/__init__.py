"""Graph convolutional module for temporal action localization.

Typed graph construction over temporal action units, residual graph
convolution with neighborhood-sampled training, detection heads with a
multi-task loss, and a tIoU/mAP evaluation pipeline.
"""

from gcmtal.core import (
    ActionUnit,
    GroundTruthInstance,
    Interval,
    ValidationError,
    interval_stats,
    validate_unit,
)
from gcmtal.graphbuild import (
    GraphParams,
    SparseAdjacency,
    UnitGraph,
    build_graph,
    build_graph_oracle,
    center_distance,
    compute_adjacency,
    semantic_candidates,
    tiou,
)

__version__ = "0.1.0"

__all__ = [
    "ActionUnit",
    "GraphParams",
    "GroundTruthInstance",
    "Interval",
    "SparseAdjacency",
    "UnitGraph",
    "ValidationError",
    "build_graph",
    "build_graph_oracle",
    "center_distance",
    "compute_adjacency",
    "interval_stats",
    "semantic_candidates",
    "tiou",
    "validate_unit",
]
