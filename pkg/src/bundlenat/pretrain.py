"""Matrix-factorisation preference embeddings trained with the BPR objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import ConfigError, DataFormatError, TrainingDivergedError
from .numerics import stage_rng

logger = logging.getLogger(__name__)


@dataclass
class PreferenceEmbeddings:
    user_table: np.ndarray
    item_table: np.ndarray

    def __post_init__(self):
        self.user_table = np.asarray(self.user_table, dtype=np.float64)
        self.item_table = np.asarray(self.item_table, dtype=np.float64)
        if self.user_table.ndim != 2 or self.item_table.ndim != 2:
            raise DataFormatError("embedding tables must be 2-D")
        if self.user_table.shape[1] != self.item_table.shape[1]:
            raise DataFormatError(
                f"user/item embedding widths differ: {self.user_table.shape[1]} vs {self.item_table.shape[1]}"
            )

    @property
    def d_e(self) -> int:
        return self.item_table.shape[1]

    @property
    def n_users(self) -> int:
        return self.user_table.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_table.shape[0]

    def scores(self, user: int, items) -> np.ndarray:
        return self.item_table[np.asarray(items, dtype=np.int64)] @ self.user_table[user]


def bpr_loss(score_pos, score_neg):
    """``-ln sigmoid(pos - neg)`` evaluated as a softplus."""
    return np.logaddexp(0.0, -(np.asarray(score_pos, dtype=np.float64) - score_neg))


def leave_one_out_split(pairs, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Hold out one random interaction for every user with at least two."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    rng = stage_rng(seed, "leave-one-out")
    order = np.argsort(pairs[:, 0], kind="stable")
    pairs = pairs[order]
    users, starts, counts = np.unique(pairs[:, 0], return_index=True, return_counts=True)
    held = np.zeros(len(pairs), dtype=bool)
    for s, c in zip(starts, counts):
        if c >= 2:
            held[s + int(rng.integers(c))] = True
    return pairs[~held], pairs[held]


def _sample_negatives(users, positives_of, n_items, rng) -> np.ndarray:
    neg = rng.integers(n_items, size=len(users))
    for i, u in enumerate(users):
        seen = positives_of[u]
        if len(seen) >= n_items:
            continue
        while neg[i] in seen:
            neg[i] = rng.integers(n_items)
    return neg


class MFBPR(BaseEstimator):
    """Dot-product matrix factorisation fitted by mini-batch SGD on BPR triples.

    Parameters
    ----------
    d_e : int, default=64
        Width of each user and item embedding.
    epochs : int, default=50
    lr : float, default=0.05
    weight_decay : float, default=1e-4
        L2 coefficient applied to the embeddings touched by each triple.
    negatives_per_positive : int, default=1
    batch_size : int, default=256
    init_std : float, default=0.1
        Standard deviation of the Gaussian initialisation (variance 0.01).
    seed : int, default=0

    Attributes
    ----------
    embeddings_ : PreferenceEmbeddings
    loss_history_ : list of float
        Mean BPR loss per epoch.
    """

    def __init__(
        self,
        d_e=64,
        epochs=50,
        lr=0.05,
        weight_decay=1e-4,
        negatives_per_positive=1,
        batch_size=256,
        init_std=0.1,
        seed=0,
    ):
        self.d_e = d_e
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.negatives_per_positive = negatives_per_positive
        self.batch_size = batch_size
        self.init_std = init_std
        self.seed = seed

    def fit(self, X, y=None, *, n_users=None, n_items=None):
        pairs = np.asarray(X, dtype=np.int64).reshape(-1, 2)
        if len(pairs) == 0:
            raise ConfigError("MF-BPR needs at least one user-item interaction")
        if self.d_e < 1 or self.epochs < 0 or self.negatives_per_positive < 1:
            raise ConfigError("d_e >= 1, epochs >= 0 and negatives_per_positive >= 1 are required")
        n_users = int(pairs[:, 0].max()) + 1 if n_users is None else n_users
        n_items = int(pairs[:, 1].max()) + 1 if n_items is None else n_items

        init = stage_rng(self.seed, "mf-bpr-init")
        P = init.normal(0.0, self.init_std, size=(n_users, self.d_e))
        Q = init.normal(0.0, self.init_std, size=(n_items, self.d_e))

        positives_of: dict[int, set[int]] = {u: set() for u in range(n_users)}
        for u, i in pairs:
            positives_of[int(u)].add(int(i))

        history = []
        triples = np.repeat(pairs, self.negatives_per_positive, axis=0)
        for epoch in range(self.epochs):
            rng = stage_rng(self.seed, f"mf-bpr-epoch-{epoch}")
            order = rng.permutation(len(triples))
            users = triples[order, 0]
            pos = triples[order, 1]
            neg = _sample_negatives(users, positives_of, n_items, rng)
            total = 0.0
            for start in range(0, len(order), self.batch_size):
                sl = slice(start, start + self.batch_size)
                u, i, j = users[sl], pos[sl], neg[sl]
                pu, qi, qj = P[u], Q[i], Q[j]
                margin = np.einsum("bd,bd->b", pu, qi - qj)
                with np.errstate(invalid="ignore", over="ignore"):
                    total += float(bpr_loss(margin, 0.0).sum())
                # d(loss)/d(margin) = -sigmoid(-margin)
                coef = (0.5 * (1.0 - np.tanh(0.5 * margin)))[:, None]
                wd = self.weight_decay
                np.add.at(P, u, self.lr * (coef * (qi - qj) - wd * pu))
                np.add.at(Q, i, self.lr * (coef * pu - wd * qi))
                np.add.at(Q, j, self.lr * (-coef * pu - wd * qj))
            mean_loss = total / len(order)
            if not np.isfinite(mean_loss):
                raise TrainingDivergedError(f"MF-BPR loss became {mean_loss} at epoch {epoch}; try a smaller lr")
            history.append(mean_loss)
            logger.debug("mf-bpr epoch %d loss %.6f", epoch, mean_loss)

        self.embeddings_ = PreferenceEmbeddings(P, Q)
        self.loss_history_ = history
        self.n_users_ = n_users
        self.n_items_ = n_items
        return self

    def decision_function(self, X) -> np.ndarray:
        """Dot-product scores for ``(user, item)`` rows."""
        check_is_fitted(self)
        pairs = np.asarray(X, dtype=np.int64).reshape(-1, 2)
        emb = self.embeddings_
        return np.einsum("bd,bd->b", emb.user_table[pairs[:, 0]], emb.item_table[pairs[:, 1]])

    def score(self, X, y=None, *, n_neg_samples=100, seed=0, exclude=None):
        """Held-out AUC of ``X`` against sampled negatives."""
        check_is_fitted(self)
        return auc_eval(self.embeddings_, X, n_neg_samples, seed, exclude=exclude)


def auc_eval(embeddings: PreferenceEmbeddings, held_out, n_neg_samples: int, seed: int, exclude=None) -> float:
    """Mean fraction of sampled negatives scored strictly below the positive (ties count half).

    Negatives are drawn uniformly from items the user has no pair with in
    ``exclude`` (defaults to ``held_out``).
    """
    held = np.asarray(held_out, dtype=np.int64).reshape(-1, 2)
    if len(held) == 0:
        raise ConfigError("auc_eval needs at least one held-out pair")
    known = held if exclude is None else np.vstack([np.asarray(exclude, dtype=np.int64).reshape(-1, 2), held])
    seen: dict[int, set[int]] = {}
    for u, i in known:
        seen.setdefault(int(u), set()).add(int(i))
    rng = stage_rng(seed, "auc")
    n_items = embeddings.n_items
    per_pair = []
    for u, i in held:
        s_pos = embeddings.scores(u, [i])[0]
        negs = rng.integers(n_items, size=n_neg_samples)
        banned = seen.get(int(u), set())
        for t in range(n_neg_samples):
            while negs[t] in banned and len(banned) < n_items:
                negs[t] = rng.integers(n_items)
        s_neg = embeddings.scores(u, negs)
        per_pair.append(np.mean((s_neg < s_pos) + 0.5 * (s_neg == s_pos)))
    return float(np.mean(per_pair))


def export_embeddings(embeddings: PreferenceEmbeddings, path, metadata: dict | None = None) -> None:
    meta = {"stage": "pretrain", "d_e": embeddings.d_e}
    meta.update(metadata or {})
    save_checkpoint(path, {"item_table": embeddings.item_table, "user_table": embeddings.user_table}, meta)


def import_embeddings(path, d_e: int | None = None) -> PreferenceEmbeddings:
    tensors, _ = load_checkpoint(path)
    if set(tensors) != {"item_table", "user_table"}:
        raise DataFormatError(f"{path}: expected tensors item_table and user_table, found {sorted(tensors)}")
    emb = PreferenceEmbeddings(tensors["user_table"], tensors["item_table"])
    if d_e is not None and emb.d_e != d_e:
        raise DataFormatError(f"{path}: embedding dimension {emb.d_e} does not match configured --dim {d_e}")
    return emb
