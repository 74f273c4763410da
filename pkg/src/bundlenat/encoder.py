"""Compatibility-aware encoder: input assembly and attention/FFN blocks."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError
from .numerics import ParamStore, Tensor
from .pretrain import PreferenceEmbeddings


def assemble_input(user: int, candidates, pref: PreferenceEmbeddings | None, compat: Tensor | None) -> Tensor:
    """``X = P + C`` where row i of P is ``item_emb[cand_i] ++ user_emb[user]``.

    Either signal may be None (ablation), in which case it contributes zeros.
    """
    cand = np.asarray(candidates, dtype=np.int64)
    if pref is None and compat is None:
        raise ConfigError("at least one of the preference and compatibility signals is required")
    if pref is not None:
        if not 0 <= user < pref.n_users:
            raise ConfigError(f"user {user} outside preference vocabulary of {pref.n_users}")
        user_rows = np.broadcast_to(pref.user_table[user], (len(cand), pref.d_e))
        P = Tensor(np.concatenate([pref.item_table[cand], user_rows], axis=1))
        if compat is None:
            return P
        if compat.shape[1] != 2 * pref.d_e:
            raise ConfigError(
                f"compatibility width {compat.shape[1]} must equal twice the preference width {pref.d_e}"
            )
        return nx.add(P, compat)
    return compat


def assemble_batch(users, candidates, pref: PreferenceEmbeddings | None, compat: Tensor | None) -> Tensor:
    """Stacked ``B x M x d`` inputs for instances sharing the candidate count M."""
    cand = np.asarray(candidates, dtype=np.int64)
    users = np.asarray(users, dtype=np.int64)
    if pref is None:
        if compat is None:
            raise ConfigError("at least one of the preference and compatibility signals is required")
        return compat
    user_rows = np.broadcast_to(pref.user_table[users][:, None, :], cand.shape + (pref.d_e,))
    P = Tensor(np.concatenate([pref.item_table[cand], user_rows], axis=-1))
    if compat is None:
        return P
    if compat.shape[-1] != 2 * pref.d_e:
        raise ConfigError(f"compatibility width {compat.shape[-1]} must equal twice the preference width {pref.d_e}")
    return nx.add(P, compat)


def init_attention_params(
    store: ParamStore, prefix: str, d: int, n_heads: int, rng: np.random.Generator
) -> None:
    if d % n_heads:
        raise ConfigError(f"model width {d} is not divisible by {n_heads} heads")
    d_h = d // n_heads
    bound = np.sqrt(6.0 / (d + d_h))
    for h in range(n_heads):
        for w in ("wq", "wk", "wv"):
            store.add(f"{prefix}.{h}.{w}", rng.uniform(-bound, bound, size=(d, d_h)))
    mb = np.sqrt(6.0 / (2 * d))
    store.add(f"{prefix}.wm", rng.uniform(-mb, mb, size=(d, d)))


def init_ffn_params(store: ParamStore, prefix: str, d: int, d_ff: int, rng: np.random.Generator) -> None:
    b1 = np.sqrt(6.0 / (d + d_ff))
    store.add(f"{prefix}.w1", rng.uniform(-b1, b1, size=(d, d_ff)))
    store.add(f"{prefix}.w2", rng.uniform(-b1, b1, size=(d_ff, d)))


def init_encoder_params(
    store: ParamStore, d: int, n_heads: int, depth: int, d_ff: int, rng: np.random.Generator
) -> None:
    for b in range(depth):
        init_attention_params(store, f"enc.{b}", d, n_heads, rng)
        init_ffn_params(store, f"enc.{b}", d, d_ff, rng)


def attention(
    query_in: Tensor,
    source: Tensor,
    store: ParamStore,
    prefix: str,
    n_heads: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
    weights_out: list | None = None,
) -> Tensor:
    """Multi-head attention: rows of ``query_in`` attend over rows of ``source``.

    ``head_i = softmax((q W_Q^i)(s W_K^i)^T / sqrt(d_h)) (s W_V^i)`` and the
    heads are concatenated and mixed by ``W_M``. Self-attention passes the
    same tensor twice.
    """
    d = query_in.shape[-1]
    if d % n_heads:
        raise ConfigError(f"model width {d} is not divisible by {n_heads} heads")
    d_h = d // n_heads

    def stacked(role):
        ws = [store[f"{prefix}.{h}.{role}"] for h in range(n_heads)]
        return ws[0] if n_heads == 1 else nx.concat_cols(ws)

    def split_heads(t):
        # (..., n, d) -> (..., H, n, d_h); head h owns columns [h*d_h, (h+1)*d_h)
        lead = t.shape[:-2]
        t = nx.reshape(t, lead + (t.shape[-2], n_heads, d_h))
        nd = len(lead)
        return nx.permute(t, tuple(range(nd)) + (nd + 1, nd, nd + 2))

    q = split_heads(nx.matmul(query_in, stacked("wq")))
    k = split_heads(nx.matmul(source, stacked("wk")))
    v = split_heads(nx.matmul(source, stacked("wv")))
    w = nx.softmax_rows(nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / np.sqrt(d_h)))
    if weights_out is not None:
        weights_out.append(w.data)
    w = nx.dropout(w, dropout, rng, training)
    heads = nx.matmul(w, v)  # (..., H, n_q, d_h)
    nd = heads.ndim - 3
    heads = nx.permute(heads, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    cat = nx.reshape(heads, heads.shape[:-2] + (d,))
    return nx.matmul(cat, store[f"{prefix}.wm"])


def multihead_self_attention(X: Tensor, store: ParamStore, prefix: str, n_heads: int, **kw) -> Tensor:
    return attention(X, X, store, prefix, n_heads, **kw)


def feed_forward(
    x: Tensor,
    store: ParamStore,
    prefix: str,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """``x + relu(x W1) W2``; no normalisation."""
    branch = nx.matmul(nx.relu(nx.matmul(x, store[f"{prefix}.w1"])), store[f"{prefix}.w2"])
    branch = nx.dropout(branch, dropout, rng, training)
    return nx.add(x, branch)


encoder_ffn = feed_forward


def canonical_row_order(X) -> np.ndarray:
    """Per-instance permutation sorting rows lexicographically, shape ``X.shape[:-1]``.

    Running attention on canonically ordered rows makes the result
    independent of the caller's row order down to the last bit.
    """
    data = nx.as_tensor(X).data
    n, d = data.shape[-2:]
    blocks = data.reshape(-1, n, d)
    perms = np.stack([np.lexsort(block.T[::-1]) for block in blocks])
    return perms.reshape(data.shape[:-1])


def take_rows(t: Tensor, perm) -> Tensor:
    """Reorder the rows of every matrix in ``t`` by ``perm`` (same leading shape)."""
    perm = np.asarray(perm, dtype=np.int64)
    if t.ndim == 2:
        return nx.gather_rows(t, perm)
    n, d = t.shape[-2:]
    flat = nx.reshape(t, (-1, d))
    offsets = np.arange(flat.shape[0] // n)[:, None] * n
    return nx.reshape(nx.gather_rows(flat, perm.reshape(-1, n) + offsets), t.shape)


def inverse_order(perm) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    np.put_along_axis(inv, perm, np.broadcast_to(np.arange(perm.shape[-1]), perm.shape), axis=-1)
    return inv


def encode(
    X: Tensor,
    store: ParamStore,
    depth: int,
    n_heads: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
    layernorm: bool = False,
    first_block: int = 0,
) -> Tensor:
    """Stack of (self-attention, FFN) blocks; exactly row-permutation equivariant."""
    if depth < 1:
        raise ConfigError("encoder depth must be at least 1")
    X = nx.as_tensor(X)
    perm = canonical_row_order(X)
    h = take_rows(X, perm)
    for b in range(first_block, first_block + depth):
        h = multihead_self_attention(h, store, f"enc.{b}", n_heads, dropout=dropout, rng=rng, training=training)
        if layernorm:
            h = nx.layer_norm(h)
        h = feed_forward(h, store, f"enc.{b}", dropout=dropout, rng=rng, training=training)
        if layernorm:
            h = nx.layer_norm(h)
    return take_rows(h, inverse_order(perm))
