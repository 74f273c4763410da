"""Order-agnostic losses, Hungarian matching, Adam, and the BundleNAT estimator."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.model_selection import ParameterGrid
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .checkpoint import load_checkpoint, save_checkpoint
from .compat_graph import gnn_forward, init_gnn_params
from .data import GenerationInstance
from .decoder import (
    DecodeResult,
    PredictionDistribution,
    decode,
    decoder_hidden,
    infer_bundle,
    init_decoder_params,
    project,
)
from .encoder import assemble_batch, assemble_input, encode, init_encoder_params
from .exceptions import ConfigError, ContractError, DataFormatError, StateError, TrainingDivergedError
from .numerics import ParamStore, Tensor, stage_rng

logger = logging.getLogger(__name__)

LR_GRID = (1e-4, 1e-3, 1e-2, 1e-1)
DROPOUT_GRID = (0.0, 0.1, 0.2, 0.3, 0.4)
WEIGHT_DECAY_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


# ---------------------------------------------------------------------------
# losses


def candidate_labels(instance: GenerationInstance) -> np.ndarray:
    """1.0 at candidate positions holding a ground-truth item, else 0.0."""
    pos = set(instance.bundle)
    if not pos <= set(instance.candidates):
        raise DataFormatError("ground-truth item outside the candidate list")
    return np.array([1.0 if c in pos else 0.0 for c in instance.candidates])


def bundle_bce_loss(candidate_probs: Tensor, instance: GenerationInstance) -> Tensor:
    """Summed binary cross-entropy over the instance's candidate coordinates.

    ``candidate_probs`` is ``1 x M`` and aligned with ``instance.candidates``.
    The sum is order-free, so no ordering search is needed for a single
    shared output distribution.
    """
    if candidate_probs.shape != (1, instance.m):
        raise ContractError(f"expected probabilities of shape (1, {instance.m}), got {candidate_probs.shape}")
    return nx.binary_cross_entropy(candidate_probs, candidate_labels(instance))


@dataclass(frozen=True)
class Assignment:
    mapping: tuple[int, ...]  # slot -> target
    cost: float


def _hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of rows to columns for a square matrix (potentials method)."""
    n = cost.shape[0]
    INF = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based), 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign


def _path_cost(cost: np.ndarray, mapping) -> float:
    total = 0.0
    for s, t in enumerate(mapping):
        total += float(cost[s, t])
    return total


def hungarian_match(cost, lexicographic: bool = True) -> Assignment:
    """Minimum-total-cost bijection of slots (rows) to targets (columns).

    With ``lexicographic`` set, the lexicographically smallest mapping among
    co-optimal ones is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ContractError(f"cost matrix must be square, got shape {cost.shape}")
    if cost.shape[0] < 1:
        raise ContractError("cost matrix must be at least 1 x 1")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix has non-finite entries")
    n = cost.shape[0]
    best = _hungarian(cost)
    if not lexicographic or n == 1:
        return Assignment(tuple(int(t) for t in best), _path_cost(cost, best))

    opt = _path_cost(cost, best)
    tol = 1e-12 * max(1.0, float(np.abs(cost).max())) * n
    rows = list(range(n))
    cols = list(range(n))
    mapping = [0] * n
    fixed = 0.0
    for s in range(n):
        rest_rows = rows[1:]
        for t in sorted(cols):
            rest_cols = [c for c in cols if c != t]
            sub = 0.0
            if rest_rows:
                sub_cost = cost[np.ix_(rest_rows, rest_cols)]
                sub = _path_cost(sub_cost, _hungarian(sub_cost))
            if fixed + cost[s, t] + sub <= opt + tol:
                mapping[s] = t
                fixed += cost[s, t]
                cols = rest_cols
                break
        rows = rest_rows
    return Assignment(tuple(mapping), _path_cost(cost, mapping))


def oaxe_slot_loss(slot_dists, targets: Sequence[int]) -> Tensor:
    """Order-agnostic cross-entropy for slot-structured outputs.

    ``slot_dists`` is ``K x N``; slot s scored against target t costs
    ``-log p[s, t]``. The loss is the cost of the best slot/target matching.
    """
    slot_dists = nx.as_tensor(slot_dists)
    targets = np.asarray(targets, dtype=np.int64)
    k = slot_dists.shape[0]
    if len(targets) != k:
        raise ContractError(f"{k} slots but {len(targets)} targets")
    picked = np.maximum(slot_dists.data[:, targets], 1e-12)
    cost = -np.log(picked)
    match = hungarian_match(cost)
    return nx.neg_log_pick(slot_dists, np.arange(k), targets[list(match.mapping)])


# ---------------------------------------------------------------------------
# optimisation


def adam_step(
    params: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Bias-corrected Adam; ``weight_decay * param`` is added to the gradient first."""
    if not params.grads:
        raise StateError("adam_step called before backward() populated gradients")
    b1, b2 = betas
    params.step_count += 1
    t = params.step_count
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, tensor in params.items():
        if name not in params.grads:
            raise StateError(f"missing gradient for parameter {name!r}")
        g = params.grads[name]
        if weight_decay:
            g = g + weight_decay * tensor.data
        m = params.m.get(name)
        v = params.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        params.m[name] = m
        params.v[name] = v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params.set(name, tensor.data - update)
    params.zero_grad()


# ---------------------------------------------------------------------------
# the model


def identity_paths(store: ParamStore, n_heads: int) -> None:
    """Identity value/mix projections and zero feed-forward outputs, in place.

    Head ``h`` takes columns ``h*d_h:(h+1)*d_h`` of the identity, so the
    concatenated heads reproduce their input.
    """
    for name in store.names():
        parts = name.split(".")
        if parts[-1] == "wv":
            d, d_h = store[name].shape
            h = int(parts[-2])
            store.set(name, np.eye(d)[:, h * d_h : (h + 1) * d_h].copy())
        elif parts[-1] == "wm":
            store.set(name, np.eye(store[name].shape[0]))
        elif parts[-1] == "w2" and parts[0] in ("enc", "dec"):
            store.set(name, np.zeros(store[name].shape))


class BundleNAT(BaseEstimator):
    """Non-autoregressive bundle generator.

    Parameters
    ----------
    d_c : int, default=128
        Model width; must equal twice the preference embedding width when
        the preference signal is used.
    n_heads : int, default=4
    depth : int, default=2
        Blocks in both the encoder and the decoder.
    gnn_layers : int, default=2
    d_ff : int or None, default=None
        Encoder feed-forward width (``4 * d_c`` when None).
    dropout, lr, weight_decay : float
    epochs : int, default=10
    batch_size : int, default=1
        Instances whose losses are averaged per Adam step.
    use_preference, use_compatibility : bool, default=True
        Switching either off feeds zeros in place of that signal.
    layernorm : bool, default=False
    init : {"glorot", "identity"}, default="glorot"
        ``"identity"`` starts every attention value/mix projection at the
        identity and every feed-forward output weight at zero, so the
        untrained network passes its pooled input through unchanged.
    projection_init : {"glorot", "preference"}, default="glorot"
        ``"preference"`` ties the output projection to the pretrained item
        embeddings: column ``i`` of ``W_o`` starts as ``[e_i, e_i]``.
    output_bias : {"zero", "prior"}, default="zero"
        ``"prior"`` starts ``b_o`` at the log-odds of a candidate being
        positive in the training data.
    early_stopping : bool, default=False
        Hold out ``validation_fraction`` of the training instances, score
        Recall@K after every epoch and keep the best epoch's weights.
        Training stops after ``n_iter_no_change`` epochs without improvement.
    validation_fraction : float, default=0.1
    n_iter_no_change : int, default=3
    seed : int, default=0
    """

    def __init__(
        self,
        d_c=128,
        n_heads=4,
        depth=2,
        gnn_layers=2,
        d_ff=None,
        dropout=0.0,
        lr=1e-3,
        weight_decay=0.0,
        epochs=10,
        batch_size=1,
        use_preference=True,
        use_compatibility=True,
        layernorm=False,
        init="glorot",
        projection_init="glorot",
        output_bias="zero",
        early_stopping=False,
        validation_fraction=0.1,
        n_iter_no_change=3,
        seed=0,
    ):
        self.d_c = d_c
        self.n_heads = n_heads
        self.depth = depth
        self.gnn_layers = gnn_layers
        self.d_ff = d_ff
        self.dropout = dropout
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.use_preference = use_preference
        self.use_compatibility = use_compatibility
        self.layernorm = layernorm
        self.init = init
        self.projection_init = projection_init
        self.output_bias = output_bias
        self.early_stopping = early_stopping
        self.validation_fraction = validation_fraction
        self.n_iter_no_change = n_iter_no_change
        self.seed = seed

    # -- setup -------------------------------------------------------------

    def _validate(self, preference, graph):
        if self.d_c % self.n_heads:
            raise ConfigError(f"d_c={self.d_c} not divisible by n_heads={self.n_heads}")
        if self.depth < 1 or self.gnn_layers < 1:
            raise ConfigError("depth and gnn_layers must be at least 1")
        if not (self.use_preference or self.use_compatibility):
            raise ConfigError("at least one input signal must be enabled")
        if self.use_preference:
            if preference is None:
                raise ConfigError("preference embeddings are required when use_preference=True")
            if 2 * preference.d_e != self.d_c:
                raise ConfigError(
                    f"dimension mismatch: 2 x preference dim {preference.d_e} != model width {self.d_c}"
                )
        if self.use_compatibility and graph is None:
            raise ConfigError("a co-occurrence graph is required when use_compatibility=True")
        for name, allowed in (
            ("init", ("glorot", "identity")),
            ("projection_init", ("glorot", "preference")),
            ("output_bias", ("zero", "prior")),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.projection_init == "preference" and not self.use_preference:
            raise ConfigError("projection_init='preference' needs the preference signal")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        if self.n_iter_no_change < 1:
            raise ConfigError("n_iter_no_change must be at least 1")

    def _init_params(self, n_items: int, positive_rate: float | None = None) -> ParamStore:
        rng = stage_rng(self.seed, "bundlenat-init")
        store = ParamStore()
        d = self.d_c
        if self.use_compatibility:
            init_gnn_params(store, n_items, d, self.gnn_layers, rng)
        init_encoder_params(store, d, self.n_heads, self.depth, self.d_ff or 4 * d, rng)
        init_decoder_params(store, d, self.n_heads, self.depth, n_items, rng)
        if self.init == "identity":
            identity_paths(store, self.n_heads)
        if self.projection_init == "preference" and self.preference_ is not None:
            E = self.preference_.item_table
            store.set("dec.proj.wo", np.concatenate([E, E], axis=1).T.copy())
        if self.output_bias == "prior" and positive_rate is not None:
            store.set("dec.proj.bo", np.full((1, n_items), np.log(positive_rate / (1.0 - positive_rate))))
        return store

    def _bind(self, preference, graph, n_items):
        self.preference_ = preference if self.use_preference else None
        self.graph_ = graph if self.use_compatibility else None
        self._propagation = self.graph_.propagation_matrix() if self.graph_ is not None else None
        self.n_items_ = n_items

    # -- forward -----------------------------------------------------------

    def _compat_rows(self, item_ids):
        if self.graph_ is None:
            return None
        return gnn_forward(self.params_, self.graph_, item_ids, propagation=self._propagation)

    def _hidden(self, X: Tensor, rng=None, training=False) -> Tensor:
        kw = dict(dropout=self.dropout, rng=rng, training=training, layernorm=self.layernorm)
        X_F = encode(X, self.params_, self.depth, self.n_heads, **kw)
        return decoder_hidden(X_F, self.params_, self.depth, self.n_heads, **kw)

    def _stack(self, batch: Sequence[GenerationInstance], compat_all: Tensor | None = None, ids=None) -> Tensor:
        """Encoder input for a batch. ``compat_all`` holds GNN rows for ``ids`` (all items if None)."""
        if len({inst.m for inst in batch}) != 1:
            raise ConfigError("instances in one batch must share the candidate count")
        cand = np.array([inst.candidates for inst in batch], dtype=np.int64)
        compat = None
        if self.graph_ is not None:
            if compat_all is None:
                ids, inverse = np.unique(cand, return_inverse=True)
                compat_all = self._compat_rows(ids)
                rows = inverse.reshape(cand.shape)
            elif ids is None:
                rows = cand
            else:
                rows = np.searchsorted(ids, cand)
            compat = nx.gather_rows(compat_all, rows)
        return assemble_batch([inst.user for inst in batch], cand, self.preference_, compat)

    def _batch_loss(self, batch: Sequence[GenerationInstance], rng=None, training=False) -> Tensor:
        """Mean over the batch of the per-instance candidate BCE."""
        cand = np.array([inst.candidates for inst in batch], dtype=np.int64)
        h_d = self._hidden(self._stack(batch), rng, training)
        W = nx.gather_cols(self.params_["dec.proj.wo"], cand)
        b = nx.gather_cols(self.params_["dec.proj.bo"], cand)
        probs = nx.sigmoid(nx.add(nx.matmul(h_d, W), b))
        labels = np.stack([candidate_labels(inst) for inst in batch])[:, None, :]
        return nx.scale(nx.binary_cross_entropy(probs, labels), 1.0 / len(batch))

    def mean_loss(self, instances: Sequence[GenerationInstance], chunk: int = 64) -> float:
        """Average per-instance loss with dropout off and no taping."""
        check_is_fitted(self, "params_")
        total = 0.0
        with nx.no_tape():
            for start in range(0, len(instances), chunk):
                part = instances[start : start + chunk]
                total += self._batch_loss(part).item() * len(part)
        return total / len(instances)

    # -- public API ----------------------------------------------------------

    def fit(self, X, y=None, *, preference=None, graph=None, n_items=None):
        """Train on a sequence of :class:`GenerationInstance`.

        The preference embeddings stay frozen; GNN, encoder and decoder
        parameters are trained jointly.
        """
        instances = list(X)
        if not instances:
            raise ConfigError("no training instances")
        self._validate(preference, graph)
        if n_items is None:
            if graph is not None:
                n_items = graph.n_items
            elif preference is not None:
                n_items = preference.n_items
            else:
                raise ConfigError("cannot infer the item vocabulary size")
        self._bind(preference, graph, n_items)
        val_set = []
        if self.early_stopping:
            order = stage_rng(self.seed, "bundlenat-validation").permutation(len(instances))
            n_val = max(1, int(round(self.validation_fraction * len(instances))))
            if n_val >= len(instances):
                raise ConfigError("too few instances to hold out a validation set")
            val_set = [instances[i] for i in order[:n_val]]
            instances = [instances[i] for i in order[n_val:]]
        rate = float(np.mean([inst.k / inst.m for inst in instances]))
        self.params_ = self._init_params(n_items, positive_rate=rate)
        self.initial_loss_ = self.mean_loss(instances)
        self.loss_history_ = []
        self.validation_scores_ = []
        self.best_epoch_ = None
        best, best_arrays, stale = -np.inf, None, 0
        for epoch in range(self.epochs):
            self._run_epoch(instances, epoch)
            if not self.early_stopping:
                continue
            recall = self.score(val_set)
            self.validation_scores_.append(recall)
            logger.info("epoch %d validation recall %.4f", epoch, recall)
            if recall > best:
                best, best_arrays, stale, self.best_epoch_ = recall, self.params_.to_arrays(), 0, epoch
            else:
                stale += 1
                if stale >= self.n_iter_no_change:
                    break
        if best_arrays is not None:
            for name, value in best_arrays.items():
                self.params_.set(name, value)
        return self

    def _run_epoch(self, instances, epoch: int) -> float:
        rng = stage_rng(self.seed, f"bundlenat-epoch-{epoch}")
        order = rng.permutation(len(instances))
        total = 0.0
        for start in range(0, len(order), self.batch_size):
            batch = [instances[i] for i in order[start : start + self.batch_size]]
            with nx.taping() as tape:
                loss = self._batch_loss(batch, rng=rng, training=True)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"loss became {value} in epoch {epoch}; try a smaller learning rate (now {self.lr})"
                    )
                nx.backward(loss, self.params_, tape)
            adam_step(self.params_, self.lr, weight_decay=self.weight_decay)
            total += value * len(batch)
        mean = total / len(instances)
        self.loss_history_.append(mean)
        logger.info("epoch %d loss %.6f", epoch, mean)
        return mean

    def _all_compat(self) -> Tensor | None:
        if self.graph_ is None:
            return None
        with nx.no_tape():
            return self._compat_rows(None)

    def encode_instance(self, inst: GenerationInstance, compat_all=None) -> Tensor:
        """Encoder output ``M x d`` for one instance (dropout off)."""
        check_is_fitted(self, "params_")
        with nx.no_tape():
            if compat_all is None:
                compat_all = self._all_compat()
            compat = None if compat_all is None else nx.gather_rows(compat_all, inst.candidates)
            X = assemble_input(inst.user, inst.candidates, self.preference_, compat)
            return encode(X, self.params_, self.depth, self.n_heads, layernorm=self.layernorm)

    def decode_instance(self, inst: GenerationInstance, k: int | None = None, compat_all=None) -> DecodeResult:
        X_F = self.encode_instance(inst, compat_all)
        return decode(
            X_F,
            self.params_,
            inst.k if k is None else k,
            inst.candidates,
            self.depth,
            self.n_heads,
            layernorm=self.layernorm,
        )

    def predict_scores(self, X, chunk: int = 64) -> np.ndarray:
        """Sigmoid scores over the whole vocabulary, shape ``(n_instances, n_items)``."""
        check_is_fitted(self, "params_")
        instances = list(X)
        out = np.empty((len(instances), self.n_items_))
        compat_all = self._all_compat()
        with nx.no_tape():
            for start in range(0, len(instances), chunk):
                part = instances[start : start + chunk]
                groups: dict[int, list[int]] = {}
                for j, inst in enumerate(part):
                    groups.setdefault(inst.m, []).append(j)
                for idx in groups.values():
                    sub = [part[j] for j in idx]
                    h_d = self._hidden(self._stack(sub, compat_all))
                    out[[start + j for j in idx]] = project(h_d, self.params_).data[:, 0, :]
        return out

    def predict(self, X, k: int | None = None) -> list[list[int]]:
        """Generated bundles, one list of item ids per instance."""
        instances = list(X)
        scores = self.predict_scores(instances)
        bundles = []
        for inst, row in zip(instances, scores):
            mask = np.zeros(self.n_items_, dtype=bool)
            mask[list(inst.candidates)] = True
            bundles.append(infer_bundle(PredictionDistribution(row, mask), inst.k if k is None else k))
        return bundles

    def score(self, X, y=None) -> float:
        """Mean Recall@K of the generated bundles."""
        from .evaluation import recall_at_k

        instances = list(X)
        preds = self.predict(instances)
        return recall_at_k(preds, [inst.bundle for inst in instances], instances[0].k)

    # -- persistence -------------------------------------------------------

    def save(self, path, metadata: dict | None = None) -> None:
        check_is_fitted(self, "params_")
        meta = {
            "stage": "train",
            "config": self.get_params(),
            "n_items": int(self.n_items_),
            "d_e": None if self.preference_ is None else int(self.preference_.d_e),
            "loss_history": list(self.loss_history_),
        }
        meta.update(metadata or {})
        save_checkpoint(path, self.params_.to_arrays(), meta)

    @classmethod
    def load(cls, path, preference=None, graph=None) -> "BundleNAT":
        tensors, meta = load_checkpoint(path)
        if meta.get("stage") != "train":
            raise DataFormatError(f"{path}: not a trained-model checkpoint")
        model = cls(**meta["config"])
        model._validate(preference, graph)
        model._bind(preference, graph, meta["n_items"])
        model.params_ = ParamStore.from_arrays(tensors)
        reference = model._init_params(meta["n_items"])
        if reference.names() != model.params_.names():
            raise DataFormatError(f"{path}: parameter manifest does not match the stored configuration")
        for name, tensor in reference.items():
            if model.params_[name].shape != tensor.shape:
                raise DataFormatError(f"{path}: {name} has shape {model.params_[name].shape}, expected {tensor.shape}")
        model.loss_history_ = meta.get("loss_history", [])
        return model


def train(split, preference, graph, config: dict | None = None) -> tuple[BundleNAT, list[float]]:
    """Fit a model on ``split.train``; returns the fitted model and its loss curve."""
    model = BundleNAT(**(config or {}))
    model.fit(split.train, preference=preference, graph=graph, n_items=split.n_items)
    return model, model.loss_history_


# ---------------------------------------------------------------------------
# grid search


def default_grid() -> dict:
    return {"lr": list(LR_GRID), "dropout": list(DROPOUT_GRID), "weight_decay": list(WEIGHT_DECAY_GRID)}


def _grid_point(base, point, fit_set, val_set, preference, graph, n_items):
    model = clone(base).set_params(**point)
    try:
        model.fit(fit_set, preference=preference, graph=graph, n_items=n_items)
        recall = model.score(val_set)
    except TrainingDivergedError:
        recall = float("nan")
    return {**point, "recall": recall}


def grid_search(
    train_instances: Sequence[GenerationInstance],
    grid: dict,
    preference=None,
    graph=None,
    base: BundleNAT | None = None,
    n_items: int | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> tuple[dict, list[dict]]:
    """Select hyperparameters by Recall@K on a held-out tenth of the training set.

    Returns ``(best_point, table)`` with one table row per grid point, in
    grid order. Diverged points score NaN and are never selected.
    """
    if not grid or any(len(values) == 0 for values in grid.values()):
        raise ConfigError("empty grid")
    points = list(ParameterGrid(grid))
    base = base if base is not None else BundleNAT(seed=seed)
    order = stage_rng(seed, "grid-holdout").permutation(len(train_instances))
    n_val = max(1, len(train_instances) // 10)
    val_set = [train_instances[i] for i in order[:n_val]]
    fit_set = [train_instances[i] for i in order[n_val:]]
    if not fit_set:
        raise ConfigError("training set too small to hold out a validation tenth")
    args = (fit_set, val_set, preference, graph, n_items)
    if jobs > 1:
        from joblib import Parallel, delayed

        table = Parallel(n_jobs=jobs)(delayed(_grid_point)(base, p, *args) for p in points)
    else:
        table = [_grid_point(base, p, *args) for p in points]
    best_i = None
    for i, row in enumerate(table):
        if np.isnan(row["recall"]):
            continue
        if best_i is None or row["recall"] > table[best_i]["recall"]:
            best_i = i
    if best_i is None:
        raise TrainingDivergedError("every grid point diverged")
    return dict(points[best_i]), table

