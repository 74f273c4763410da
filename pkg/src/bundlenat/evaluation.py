"""Bundle metrics, POP/BPR baselines, decoder-pass accounting and reports."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .data import GenerationInstance
from .decoder import PredictionDistribution, decoder_hidden, infer_bundle, project
from .exceptions import ContractError
from .pretrain import PreferenceEmbeddings

PRECISION_MODES = ("first-match", "member")


def _check_pairs(predicted, truth):
    if len(predicted) != len(truth):
        raise ContractError(f"{len(predicted)} predicted bundles but {len(truth)} ground-truth bundles")
    if not len(truth):
        raise ContractError("no bundles to score")
    for p, t in zip(predicted, truth):
        if not len(p) or not len(t):
            raise ContractError("empty bundle")


def _fold(values) -> float:
    # fixed left-to-right order keeps aggregates bit-stable
    total = 0.0
    for v in values:
        total += v
    return total / len(values)


def precision_at_k(predicted, truth, mode: str = "first-match") -> float:
    """Share of instances whose top-ranked item matches the ground truth.

    ``first-match`` compares with the first stored ground-truth item,
    ``member`` accepts any ground-truth item.
    """
    _check_pairs(predicted, truth)
    if mode == "first-match":
        hits = [float(p[0] == t[0]) for p, t in zip(predicted, truth)]
    elif mode == "member":
        hits = [float(p[0] in set(t)) for p, t in zip(predicted, truth)]
    else:
        raise ContractError(f"unknown precision mode {mode!r}; choose from {PRECISION_MODES}")
    return _fold(hits)


def precision_plus_at_k(predicted, truth) -> float:
    _check_pairs(predicted, truth)
    return _fold([float(bool(set(p) & set(t))) for p, t in zip(predicted, truth)])


def recall_at_k(predicted, truth, k: int) -> float:
    _check_pairs(predicted, truth)
    return _fold([len(set(p) & set(t)) / k for p, t in zip(predicted, truth)])


def all_metrics(predicted, instances: Sequence[GenerationInstance], mode: str = "first-match") -> dict:
    truth = [inst.bundle for inst in instances]
    k = instances[0].k
    return {
        "precision": precision_at_k(predicted, truth, mode),
        "precision_plus": precision_plus_at_k(predicted, truth),
        "recall": recall_at_k(predicted, truth, k),
    }


def _top_k(candidates, scores, k) -> list[int]:
    cand = np.asarray(candidates, dtype=np.int64)
    order = np.lexsort((cand, -np.asarray(scores, dtype=np.float64)))
    return [int(i) for i in cand[order[:k]]]


class PopularityBaseline(BaseEstimator):
    """Ranks candidates by how often they appear in training bundles."""

    def fit(self, X, y=None, *, n_items=None):
        counts = Counter(item for inst in X for item in inst.bundle)
        n = n_items if n_items is not None else (max(counts) + 1 if counts else 0)
        pop = np.zeros(n)
        for item, c in counts.items():
            pop[item] = c
        self.popularity_ = pop
        return self

    def predict(self, X, k: int | None = None) -> list[list[int]]:
        check_is_fitted(self)
        pop = self.popularity_
        out = []
        for inst in X:
            cand = np.asarray(inst.candidates)
            scores = np.where(cand < len(pop), pop[np.minimum(cand, len(pop) - 1)], 0.0)
            out.append(_top_k(cand, scores, inst.k if k is None else k))
        return out


class BPRBaseline(BaseEstimator):
    """Ranks candidates by the pretrained user-item dot product."""

    def __init__(self, embeddings: PreferenceEmbeddings | None = None):
        self.embeddings = embeddings

    def fit(self, X=None, y=None):
        if self.embeddings is None:
            raise ContractError("BPRBaseline needs pretrained embeddings")
        self.embeddings_ = self.embeddings
        return self

    def predict(self, X, k: int | None = None) -> list[list[int]]:
        check_is_fitted(self)
        return [
            _top_k(inst.candidates, self.embeddings_.scores(inst.user, inst.candidates), inst.k if k is None else k)
            for inst in X
        ]


# ---------------------------------------------------------------------------
# decoder-pass accounting


def autoregressive_stub(model, inst: GenerationInstance, k: int, compat_all=None) -> tuple[list[int], int]:
    """Item-by-item generation reusing the trained encoder and decoder.

    Every step re-runs a full decoder pass and appends the best candidate
    not yet chosen. Returns ``(bundle, decoder_passes)``.
    """
    X_F = model.encode_instance(inst, compat_all)
    chosen: list[int] = []
    passes = 0
    with nx.no_tape():
        for _ in range(k):
            h_d = decoder_hidden(X_F, model.params_, model.depth, model.n_heads, layernorm=model.layernorm)
            probs = project(h_d, model.params_).data[0].copy()
            passes += 1
            mask = np.zeros(probs.shape[0], dtype=bool)
            mask[list(set(inst.candidates) - set(chosen))] = True
            chosen.append(infer_bundle(PredictionDistribution(probs, mask), 1)[0])
    return chosen, passes


def latency_account(model, instances: Sequence[GenerationInstance], k_values: Sequence[int]) -> list[dict]:
    """Decoder passes per generated bundle: one-shot decoding vs the autoregressive stub."""
    compat_all = model._all_compat()
    table = []
    for k in k_values:
        nat = ar = 0
        for inst in instances:
            nat += model.decode_instance(inst, k, compat_all).passes
            ar += autoregressive_stub(model, inst, k, compat_all)[1]
        n = len(instances)
        table.append(
            {
                "k": int(k),
                "nat_passes_per_bundle": nat / n,
                "ar_passes_per_bundle": ar / n,
                "ratio": (ar / n) / (nat / n),
            }
        )
    return table


# ---------------------------------------------------------------------------
# reports


@dataclass
class MethodResult:
    method: str
    precision: float
    precision_plus: float
    recall: float
    k: int
    m: int
    n_instances: int
    passes_per_bundle: float | None = None


@dataclass
class EvalReport:
    methods: list[MethodResult]
    fingerprint: dict
    config: dict = field(default_factory=dict)
    precision_mode: str = "first-match"
    pass_counts: list[dict] = field(default_factory=list)
    instances: list[dict] | None = None

    def to_dict(self) -> dict:
        return {
            "precision_mode": self.precision_mode,
            "methods": [asdict(m) for m in self.methods],
            "pass_counts": self.pass_counts,
            "fingerprint": self.fingerprint,
            "config": self.config,
            "instances": self.instances,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            methods=[MethodResult(**m) for m in d["methods"]],
            fingerprint=d["fingerprint"],
            config=d.get("config", {}),
            precision_mode=d.get("precision_mode", "first-match"),
            pass_counts=d.get("pass_counts", []),
            instances=d.get("instances"),
        )

    def table(self) -> str:
        """Plain-text comparison table, one row per method."""
        k = self.methods[0].k if self.methods else 0
        head = f"{'method':<12} {'Precision@' + str(k):>13} {'Precision+@' + str(k):>13} {'Recall@' + str(k):>10}"
        rows = [head, "-" * len(head)]
        for m in self.methods:
            rows.append(f"{m.method:<12} {m.precision:>13.4f} {m.precision_plus:>13.4f} {m.recall:>10.4f}")
        return "\n".join(rows)


def method_result(name, predicted, instances, mode="first-match", passes=None) -> MethodResult:
    scores = all_metrics(predicted, instances, mode)
    return MethodResult(
        method=name,
        k=instances[0].k,
        m=instances[0].m,
        n_instances=len(instances),
        passes_per_bundle=passes,
        **scores,
    )


def emit_report(report: EvalReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=False) + "\n", encoding="utf-8")


def read_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
