"""Batch characterizations of a trace, emitted as plot-ready tables."""

from kvtrace.analysis.metrics import (
    SPATIAL_NOTE,
    CapacityCurve,
    HitAccounting,
    TraceView,
    UserTurnStats,
    block_lifespans,
    clairvoyant_capacity_curve,
    cross_user_matrix,
    ideal_hit_ratio,
    kv_size_distribution,
    lifespan_distribution,
    lifespan_timeline,
    next_turn_frequency,
    per_type_contribution,
    reuse_skew,
    reuse_time_distribution,
    spatial_heatmap,
    turn_distribution,
    user_skew,
)
from kvtrace.analysis.tables import Curve, DistributionTable, HeatmapTable, lorenz

__all__ = [
    "SPATIAL_NOTE",
    "CapacityCurve",
    "Curve",
    "DistributionTable",
    "HeatmapTable",
    "HitAccounting",
    "TraceView",
    "UserTurnStats",
    "block_lifespans",
    "clairvoyant_capacity_curve",
    "cross_user_matrix",
    "ideal_hit_ratio",
    "kv_size_distribution",
    "lifespan_distribution",
    "lifespan_timeline",
    "lorenz",
    "next_turn_frequency",
    "per_type_contribution",
    "reuse_skew",
    "reuse_time_distribution",
    "spatial_heatmap",
    "turn_distribution",
    "user_skew",
]
