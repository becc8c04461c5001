"""Weakly supervised multi-view context-clustering pipeline."""

from ._mammoclu import (
    assign_clusters,
    auc,
    evaluate,
    f1,
    greedy_roi_select,
    mdr,
    params,
    synth,
    train,
    visualize,
)

__all__ = [
    "assign_clusters",
    "auc",
    "evaluate",
    "f1",
    "greedy_roi_select",
    "mdr",
    "params",
    "synth",
    "train",
    "visualize",
]
