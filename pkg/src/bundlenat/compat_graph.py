"""Item co-occurrence graph and the weighted-aggregation GNN over it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import DataFormatError, DimensionError, IdRangeError
from .numerics import ParamStore, Tensor


@dataclass
class CooccurrenceGraph:
    """Symmetric, nonnegative, degree-normalised item-item matrix."""

    g: np.ndarray

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64)
        if self.g.ndim != 2 or self.g.shape[0] != self.g.shape[1]:
            raise DimensionError(f"co-occurrence matrix must be square, got {self.g.shape}")

    @property
    def n_items(self) -> int:
        return self.g.shape[0]

    def propagation_matrix(self) -> np.ndarray:
        """``I + G`` with the diagonal of G removed: the self term plus weighted neighbours."""
        a = self.g.copy()
        np.fill_diagonal(a, 0.0)
        a[np.diag_indices_from(a)] = 1.0
        return a


def build_frequency_matrix(bundle_item, n_items: int, n_bundles: int) -> np.ndarray:
    pairs = np.asarray(bundle_item, dtype=np.int64).reshape(-1, 2)
    F = np.zeros((n_items, n_bundles))
    if len(pairs):
        if pairs[:, 0].max() >= n_bundles or pairs[:, 1].max() >= n_items or pairs.min() < 0:
            raise IdRangeError("bundle-item pair outside declared vocabulary")
        F[pairs[:, 1], pairs[:, 0]] = 1.0
    return F


def normalize_cooccurrence(F) -> CooccurrenceGraph:
    """``D^-1/2 (F F^T) D^-1/2`` with ``0^-1/2 = 0`` for items in no bundle."""
    F = np.asarray(F, dtype=np.float64)
    A = F @ F.T
    deg = A.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    G = inv_sqrt[:, None] * A * inv_sqrt[None, :]
    G = 0.5 * (G + G.T)
    return CooccurrenceGraph(G)


def graph_from_bundles(bundle_item, n_items: int, n_bundles: int | None = None) -> CooccurrenceGraph:
    pairs = np.asarray(bundle_item, dtype=np.int64).reshape(-1, 2)
    if n_bundles is None:
        n_bundles = int(pairs[:, 0].max()) + 1 if len(pairs) else 0
    return normalize_cooccurrence(build_frequency_matrix(pairs, n_items, n_bundles))


def save_graph(graph: CooccurrenceGraph, path, metadata: dict | None = None) -> None:
    meta = {"stage": "build-graph", "n_items": graph.n_items}
    meta.update(metadata or {})
    save_checkpoint(path, {"g": graph.g}, meta)


def load_graph(path) -> CooccurrenceGraph:
    tensors, _ = load_checkpoint(path)
    if set(tensors) != {"g"}:
        raise DataFormatError(f"{path}: expected a single tensor 'g', found {sorted(tensors)}")
    return CooccurrenceGraph(tensors["g"])


# ---------------------------------------------------------------------------
# GNN


def init_gnn_params(store: ParamStore, n_items: int, d_c: int, n_layers: int, rng: np.random.Generator) -> None:
    if n_layers < 1:
        raise DimensionError("GNN needs at least one layer")
    store.add("gnn.z", rng.normal(0.0, 0.1, size=(n_items, d_c)))
    bound = np.sqrt(6.0 / (2 * d_c))
    for k in range(n_layers):
        store.add(f"gnn.{k}.w", rng.uniform(-bound, bound, size=(d_c, d_c)))
        store.add(f"gnn.{k}.b", np.zeros((1, d_c)))


def gnn_layers(store: ParamStore) -> int:
    return sum(1 for n in store.names() if n.startswith("gnn.") and n.endswith(".w"))


def gnn_forward(store: ParamStore, graph: CooccurrenceGraph, item_ids=None, propagation=None) -> Tensor:
    """Compatibility embeddings for ``item_ids`` (all items when None).

    Each layer computes ``relu((c + sum_{j != i} g_ij c_j) W + b)`` over the
    whole vocabulary. ``propagation`` may pass a cached ``I + offdiag(G)``.
    """
    z = store["gnn.z"]
    n_items = z.shape[0]
    if graph.n_items != n_items:
        raise DimensionError(f"graph covers {graph.n_items} items but node features cover {n_items}")
    A = graph.propagation_matrix() if propagation is None else propagation
    ids = None
    if item_ids is not None:
        ids = np.asarray(item_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= n_items):
            raise IdRangeError(f"item id outside vocabulary of {n_items}")
    n_layers = gnn_layers(store)
    c = z
    for k in range(n_layers):
        last = k == n_layers - 1
        if last and ids is not None:
            # only the requested rows of the final layer are ever read
            agg = nx.matmul(A[ids], c)
        else:
            agg = nx.matmul(A, c)
        c = nx.relu(nx.add(nx.matmul(agg, store[f"gnn.{k}.w"]), store[f"gnn.{k}.b"]))
    return c
