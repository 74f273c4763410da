"""One-shot decoder: copy, one-token attention, cross-attention, FFN, projection, top-K."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoder import (
    attention,
    canonical_row_order,
    feed_forward,
    init_attention_params,
    init_ffn_params,
    take_rows,
)
from .exceptions import ConfigError
from .numerics import ParamStore, Tensor


@dataclass
class PredictionDistribution:
    """Per-item sigmoid scores over the full vocabulary plus the candidate mask."""

    scores: np.ndarray
    mask: np.ndarray

    @property
    def candidates(self) -> np.ndarray:
        return np.flatnonzero(self.mask)


@dataclass
class DecodeResult:
    distribution: PredictionDistribution
    bundle: list[int]
    passes: int


def init_decoder_params(
    store: ParamStore, d: int, n_heads: int, depth: int, n_items: int, rng: np.random.Generator, d_ff: int | None = None
) -> None:
    d_ff = d if d_ff is None else d_ff
    for b in range(depth):
        init_attention_params(store, f"dec.{b}.self", d, n_heads, rng)
        init_attention_params(store, f"dec.{b}.cross", d, n_heads, rng)
        init_ffn_params(store, f"dec.{b}", d, d_ff, rng)
    bound = np.sqrt(6.0 / (d + n_items))
    store.add("dec.proj.wo", rng.uniform(-bound, bound, size=(d, n_items)))
    store.add("dec.proj.bo", np.zeros((1, n_items)))


def copy_from_encoder(X_F: Tensor) -> Tensor:
    """Column means of the encoder output: the decoder's starting vector."""
    return nx.mean_over_rows(X_F)


def one_token_attention(h: Tensor, store: ParamStore, prefix: str, n_heads: int, **kw) -> Tensor:
    # the softmax over a single logit is identically 1
    return attention(h, h, store, prefix, n_heads, **kw)


def cross_attention(h: Tensor, X_F: Tensor, store: ParamStore, prefix: str, n_heads: int, **kw) -> Tensor:
    """``h`` is the query; the encoder rows supply keys and values."""
    return attention(h, X_F, store, prefix, n_heads, **kw)


decoder_ffn = feed_forward


def project(h_d: Tensor, store: ParamStore, columns=None) -> Tensor:
    """``sigmoid(h_d W_o + b_o)``, optionally restricted to ``columns`` of the vocabulary."""
    W, b = store["dec.proj.wo"], store["dec.proj.bo"]
    if columns is not None:
        W = nx.gather_cols(W, columns)
        b = nx.gather_cols(b, columns)
    return nx.sigmoid(nx.add(nx.matmul(h_d, W), b))


def decoder_hidden(
    X_F: Tensor,
    store: ParamStore,
    depth: int,
    n_heads: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
    layernorm: bool = False,
) -> Tensor:
    kw = dict(dropout=dropout, rng=rng, training=training)
    # canonical row order keeps cross-attention sums independent of candidate order
    X_F = take_rows(X_F, canonical_row_order(X_F))
    h = copy_from_encoder(X_F)
    for b in range(depth):
        h = one_token_attention(h, store, f"dec.{b}.self", n_heads, **kw)
        h = cross_attention(h, X_F, store, f"dec.{b}.cross", n_heads, **kw)
        if layernorm:
            h = nx.layer_norm(h)
        h = feed_forward(h, store, f"dec.{b}", **kw)
        if layernorm:
            h = nx.layer_norm(h)
    return h


def infer_bundle(dist: PredictionDistribution, k: int) -> list[int]:
    """Top-``k`` candidate items by score, ties broken by ascending item id."""
    cand = dist.candidates
    if k < 1 or k > len(cand):
        raise ConfigError(f"cannot pick k={k} items from {len(cand)} candidates")
    order = np.lexsort((cand, -dist.scores[cand]))
    return [int(i) for i in cand[order[:k]]]


def decode(
    X_F: Tensor,
    store: ParamStore,
    k: int,
    candidates,
    depth: int,
    n_heads: int,
    layernorm: bool = False,
) -> DecodeResult:
    """Single decoder pass producing the whole size-``k`` bundle."""
    with nx.no_tape():
        h_d = decoder_hidden(X_F, store, depth, n_heads, layernorm=layernorm)
        probs = project(h_d, store).data[0]
    n_items = probs.shape[0]
    mask = np.zeros(n_items, dtype=bool)
    mask[np.asarray(candidates, dtype=np.int64)] = True
    dist = PredictionDistribution(probs.copy(), mask)
    return DecodeResult(dist, infer_bundle(dist, k), passes=1)
