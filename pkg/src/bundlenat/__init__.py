"""One-shot, order-agnostic bundle generation with a non-autoregressive decoder."""

from .compat_graph import CooccurrenceGraph, gnn_forward, graph_from_bundles
from .data import (
    DatasetSplit,
    GenerationInstance,
    InteractionTables,
    build_instances,
    bundles_from_instances,
    split_80_20,
    synth_planted,
)
from .evaluation import BPRBaseline, PopularityBaseline, precision_at_k, precision_plus_at_k, recall_at_k
from .pretrain import MFBPR, PreferenceEmbeddings, leave_one_out_split
from .training import BundleNAT, grid_search, hungarian_match, oaxe_slot_loss

__version__ = "0.1.0"

__all__ = [
    "BPRBaseline",
    "BundleNAT",
    "CooccurrenceGraph",
    "DatasetSplit",
    "GenerationInstance",
    "InteractionTables",
    "MFBPR",
    "PopularityBaseline",
    "PreferenceEmbeddings",
    "build_instances",
    "bundles_from_instances",
    "gnn_forward",
    "graph_from_bundles",
    "grid_search",
    "hungarian_match",
    "leave_one_out_split",
    "oaxe_slot_loss",
    "precision_at_k",
    "precision_plus_at_k",
    "recall_at_k",
    "split_80_20",
    "synth_planted",
]
