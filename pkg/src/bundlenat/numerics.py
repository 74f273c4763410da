"""Dense float64 tensors with a single-use reverse-mode tape.

Every forward op records a :class:`TapeNode` on the active :class:`Tape`
when at least one input requires a gradient. :func:`backward` replays the
tape in exact reverse order and writes parameter gradients into a
:class:`ParamStore`.
"""

from __future__ import annotations

import threading
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError, StateError

DTYPE = np.float64

_precision = threading.local()


def active_dtype():
    """Element type for newly built tensors: float64 unless :func:`precision` overrides it."""
    return getattr(_precision, "dtype", DTYPE)


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Build tensors in ``dtype`` inside the block (used for finite-difference references)."""
    previous = active_dtype()
    _precision.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _precision.dtype = previous


class Tensor:
    """Immutable float64 array, optionally tracked for differentiation.

    Scalars and vectors are promoted to ``1 x n`` matrices; arrays with more
    than two axes are treated as stacks of matrices over the leading axes.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=active_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeNode:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps dL/d(output) to a tuple of dL/d(input) (None for untracked inputs)
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    nodes: list[TapeNode] = field(default_factory=list)
    consumed: bool = False

    def record(self, node: TapeNode) -> None:
        if self.consumed:
            raise StateError("tape already consumed by backward(); run a new forward pass")
        self.nodes.append(node)


_local = threading.local()


def _active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


@contextmanager
def taping() -> Iterator[Tape]:
    """Record differentiable ops issued inside the block onto a fresh tape."""
    previous = _active_tape()
    tape = Tape()
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = previous


@contextmanager
def no_tape() -> Iterator[None]:
    previous = _active_tape()
    _local.tape = None
    try:
        yield
    finally:
        _local.tape = previous


def _emit(kind, inputs, out_data, backward_fn) -> Tensor:
    tape = _active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=tracked)
    if tracked:
        tape.record(TapeNode(kind, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# differentiable ops


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting any leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ _swap(B), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if B.ndim == 2 and A.ndim > 2:
                # stacked activations times a shared matrix: fold the stack into rows
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(_swap(A) @ g, b.shape)
        return (ga, gb)

    return _emit("matmul", (a, b), A @ B, bw)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _emit("add", (a, b), a.data + b.data, bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _emit("sub", (a, b), a.data - b.data, bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    A, B = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * B, a.shape), _unbroadcast(g * A, b.shape))

    return _emit("mul", (a, b), A * B, bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _emit("transpose", (a,), _swap(a.data), lambda g: (_swap(g),))


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("permute", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _emit("reshape", (a,), a.data.reshape(tuple(shape)), lambda g: (g.reshape(a.shape),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise ContractError("softmax_rows: non-finite input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", (a,), out, bw)


def mean_over_rows(a) -> Tensor:
    """Column means over the second-to-last axis; ``n x d`` gives ``1 x d``.

    The result is bitwise invariant to row order.
    """
    a = as_tensor(a)
    n = a.shape[-2]
    if n < 1:
        raise ContractError("mean_over_rows: empty input")
    # sorting each column first makes the floating-point sum order-independent
    out = np.sort(a.data, axis=-2).sum(axis=-2, keepdims=True) / n
    return _emit("mean_over_rows", (a,), out, lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _emit("sum", (a,), a.data.sum(), lambda g: (np.full(a.shape, g.reshape(-1)[0]),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    parts = [as_tensor(p) for p in parts]
    leads = {p.shape[:-1] for p in parts}
    if len(leads) != 1:
        raise DimensionError(f"concat_cols: leading shapes differ {[p.shape for p in parts]}")
    widths = np.cumsum([0] + [p.shape[-1] for p in parts])

    def bw(g):
        return tuple(g[..., widths[i] : widths[i + 1]] for i in range(len(parts)))

    return _emit("concat_cols", tuple(parts), np.concatenate([p.data for p in parts], axis=-1), bw)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        out = np.zeros(a.shape)
        out[..., start:stop] = g
        return (out,)

    return _emit("slice_cols", (a,), a.data[..., start:stop], bw)


def gather_rows(a, index) -> Tensor:
    """``a[index]`` along the first axis; ``index`` may be multi-dimensional."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)

    def bw(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("gather_rows", (a,), a.data[idx], bw)


def gather_cols(a, index) -> Tensor:
    """Columns of a matrix ``a``.

    A 1-D ``index`` gives ``rows x len(index)``; a 2-D ``(B, M)`` index gives a
    stack ``B x rows x M``.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"gather_cols expects a matrix, got shape {a.shape}")
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim == 1:
        out = a.data[:, idx]

        def bw(g):
            acc = np.zeros(a.shape)
            np.add.at(acc.T, idx, g.T)
            return (acc,)

    elif idx.ndim == 2:
        out = np.moveaxis(a.data[:, idx], 0, 1)

        def bw(g):
            acc = np.zeros(a.shape)
            np.add.at(acc.T, idx.reshape(-1), np.moveaxis(g, 1, -1).reshape(-1, a.shape[0]))
            return (acc,)

    else:
        raise DimensionError("gather_cols index must be 1-D or 2-D")
    return _emit("gather_cols", (a,), out, bw)


def dropout(a, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout. Identity when not training or ``p == 0``."""
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _emit("dropout", (a,), a.data * keep, lambda g: (g * keep,))


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Per-row standardisation without affine parameters."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    d = x.shape[-1]

    def bw(g):
        gs = g.sum(axis=-1, keepdims=True)
        gx = (g * xhat).sum(axis=-1, keepdims=True)
        return (inv / d * (d * g - gs - xhat * gx),)

    return _emit("layer_norm", (a,), xhat, bw)


def binary_cross_entropy(probs, targets, clamp: float = 1e-12) -> Tensor:
    """Summed BCE ``-sum y log p + (1-y) log(1-p)`` with log arguments clamped."""
    probs = as_tensor(probs)
    y = np.asarray(targets, dtype=active_dtype()).reshape(probs.shape)
    p = probs.data
    p_pos = np.maximum(p, clamp)
    p_neg = np.maximum(1.0 - p, clamp)
    loss = -(y * np.log(p_pos) + (1.0 - y) * np.log(p_neg)).sum()

    def bw(g):
        dpos = np.where(p > clamp, -y / p_pos, 0.0)
        dneg = np.where(1.0 - p > clamp, (1.0 - y) / p_neg, 0.0)
        return (g.reshape(-1)[0] * (dpos + dneg),)

    return _emit("bce", (probs,), loss, bw)


def neg_log_pick(a, rows, cols, clamp: float = 1e-12) -> Tensor:
    """``-sum_i log a[rows[i], cols[i]]`` with clamped arguments."""
    a = as_tensor(a)
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    picked = a.data[r, c]
    safe = np.maximum(picked, clamp)
    # summed in index order so callers can reproduce the value exactly
    loss = 0.0
    for v in -np.log(safe):
        loss += v

    def bw(g):
        out = np.zeros(a.shape)
        np.add.at(out, (r, c), np.where(picked > clamp, -g.reshape(-1)[0] / safe, 0.0))
        return (out,)

    return _emit("neg_log_pick", (a,), loss, bw)


# ---------------------------------------------------------------------------
# parameters, backward, gradient checking


class ParamStore:
    """Named trainable tensors with gradient and Adam moment slots.

    Names enumerate in lexicographic order regardless of insertion order.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=active_dtype()), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def set(self, name: str, value) -> None:
        old = self._params[name]
        arr = np.array(value, dtype=active_dtype()).reshape(old.shape)
        self._params[name] = Tensor(arr, requires_grad=True, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParamStore":
        store = cls()
        for name in sorted(arrays):
            store.add(name, arrays[name])
        return store

    def zero_grad(self) -> None:
        self.grads.clear()


def backward(loss: Tensor, params: ParamStore, tape: Tape | None = None) -> None:
    """Populate ``params.grads`` with d(loss)/d(param) and consume the tape."""
    tape = tape if tape is not None else _active_tape()
    if tape is None:
        raise StateError("backward() called without a taped forward pass")
    if tape.consumed:
        raise StateError("tape already consumed; backward() is single-use per forward pass")
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for name, t in params.items():
        params.grads[name] = grads.get(id(t), np.zeros(t.shape))
    tape.nodes.clear()
    tape.consumed = True


def finite_diff_check(
    f: Callable[[], Tensor],
    params: ParamStore,
    eps: float = 1e-6,
    samples_per_param: int = 64,
    seed: int = 0,
    reference_dtype=None,
) -> float:
    """Max relative error between taped gradients and central differences.

    ``f`` rebuilds the scalar loss from the current contents of ``params``.
    Up to ``samples_per_param`` coordinates are checked per parameter; the
    denominator is ``max(|g|, 1e-8)``.

    The taped gradients are always float64. ``reference_dtype`` (for example
    ``np.longdouble``) evaluates the perturbed losses in a wider type, which
    lowers the rounding floor of the difference quotient for coordinates
    whose true gradient is near zero.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ContractError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    ref = np.dtype(reference_dtype or DTYPE).type
    with no_tape():
        if f().item() != f().item():
            raise ContractError("f is not deterministic (repeated evaluation differs)")
    with taping() as tape:
        loss = f()
        backward(loss, params, tape)
    analytic = {n: g.copy() for n, g in params.grads.items()}

    def evaluate(name, value):
        with precision(ref), no_tape():
            params.set(name, value)
            return f().data.reshape(-1)[0]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in params.names():
        original = params[name].data.copy()
        base = original.astype(ref)
        flat_size = base.size
        if flat_size <= samples_per_param:
            coords = np.arange(flat_size)
        else:
            coords = rng.choice(flat_size, samples_per_param, replace=False)
        for c in coords:
            idx = np.unravel_index(c, base.shape)
            bumped = base.copy()
            bumped[idx] = base[idx] + ref(eps)
            up = evaluate(name, bumped)
            bumped[idx] = base[idx] - ref(eps)
            down = evaluate(name, bumped)
            numeric = float((up - down) / (2 * ref(eps)))
            g = analytic[name][idx]
            worst = max(worst, abs(numeric - g) / max(abs(g), 1e-8))
        params.set(name, original)
    return worst


# ---------------------------------------------------------------------------
# seeded randomness


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Generator derived from a base seed and a stage name."""
    key = zlib.crc32(stage.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
