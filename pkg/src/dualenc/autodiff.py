"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the dual encoding network needs are provided.  There is
no general broadcasting: elementwise ops require identical shapes, except that
``add`` accepts a 1-d bias whose length matches the last axis.

Graph construction is controlled per thread (see :func:`no_grad`), so frozen
models can be evaluated concurrently from several threads.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not fit an operation's signature."""


class ConfigurationError(ValueError):
    """An operation was called with an invalid hyperparameter."""


class GraphError(RuntimeError):
    """Misuse of the compute graph (non-scalar backward, freed graph...)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced while debug mode is on."""


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.dtype = np.dtype(np.float32)
        self.debug = False


_state = _State()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a graph (inference)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Set the dtype used for new tensors; float64 is meant for gradient checks."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype)
    if _state.dtype not in (np.float32, np.float64):
        _state.dtype = prev
        raise ConfigurationError(f"unsupported precision {dtype!r}")
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    prev = _state.debug
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


def default_dtype() -> np.dtype:
    return _state.dtype


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation.

    Leaf tensors created with ``requires_grad=True`` carry a ``grad``
    accumulator of the same shape.  Non-leaf tensors keep a reference to their
    inputs and a closure that maps the output gradient to input gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state.dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise GraphError(f"item() on tensor of shape {self.shape}")

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return rsub_scalar(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    if _state.debug and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._freed = False
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    The graph is released afterwards; a second call raises :class:`GraphError`.
    """
    if loss.data.size != 1 or loss.ndim != 0 and loss.shape != (1,):
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise GraphError("graph already freed by a previous backward")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._freed:
            raise GraphError(f"graph through {node.op} already freed")
        if node.is_leaf:
            if g is not None:
                node.grad += g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._backward = None
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._freed = True


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., n) and ``b`` of shape (n, m)."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make(out, (a, b), "matmul", bw)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b``; ``b`` is broadcast over all leading axes."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: x {x.shape}, w {w.shape}, b {b.shape} do not conform")
    out = x.data @ w.data + b.data

    def bw(g):
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, w.shape[1])
        return g @ w.data.T, x2.T @ g2, g2.sum(axis=0)

    return _make(out, (x, w, b), "affine", bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias over the last axis of ``a``."""
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return _make(
            a.data + b.data,
            (a, b),
            "add",
            lambda g: (g, g.reshape(-1, b.shape[0]).sum(axis=0)),
        )
    raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("elementwise_mul", a, b)
    return _make(a.data * b.data, (a, b), "elementwise_mul", lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), "scale", lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + a.data.dtype.type(c), (a,), "add_scalar", lambda g: (g,))


def rsub_scalar(a: Tensor, c: float) -> Tensor:
    """``c - a``."""
    return _make(a.data.dtype.type(c) - a.data, (a,), "rsub_scalar", lambda g: (-g,))


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), "sum",
                 lambda g: (np.full_like(a.data, g),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), "mean",
                 lambda g: (np.full_like(a.data, g / n),))


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), "relu",
                 lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# structural ops


def concat_last_axis(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_last_axis: no inputs")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_last_axis: shape mismatch {tensors[0].shape} vs {t.shape}")
    if len(tensors) == 1:
        return tensors[0]
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=-1)
    return _make(out, tuple(tensors), "concat_last_axis",
                 lambda g: np.split(g, splits, axis=-1))


def slice_last_axis(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"slice_last_axis: [{start}:{stop}] out of range for {a.shape}")

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[..., start:stop] = g
        return (ga,)

    return _make(a.data[..., start:stop].copy(), (a,), "slice_last_axis", bw)


def select_step(a: Tensor, t: int) -> Tensor:
    """``a[:, t]`` for a (B, T, ...) tensor."""
    if a.ndim < 2 or not 0 <= t < a.shape[1]:
        raise ShapeError(f"select_step: step {t} out of range for {a.shape}")

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[:, t] = g
        return (ga,)

    return _make(a.data[:, t].copy(), (a,), "select_step", bw)


def stack_steps(steps: Sequence[Tensor]) -> Tensor:
    """Stack T tensors of shape (B, ...) into (B, T, ...)."""
    if not steps:
        raise ShapeError("stack_steps: no inputs")
    for s in steps[1:]:
        _same_shape("stack_steps", steps[0], s)
    out = np.stack([s.data for s in steps], axis=1)
    return _make(out, tuple(steps), "stack_steps",
                 lambda g: [g[:, i] for i in range(len(steps))])


def gather_steps(a: Tensor, index: np.ndarray) -> Tensor:
    """``out[b, t] = a[b, index[b, t]]`` for a (B, T, ...) tensor.

    ``index`` must be a per-row permutation of ``range(T)``.
    """
    index = np.asarray(index)
    if index.shape != a.shape[:2]:
        raise ShapeError(f"gather_steps: index {index.shape} vs tensor {a.shape}")
    rows = np.arange(a.shape[0])[:, None]
    out = a.data[rows, index]

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[rows, index] = g
        return (ga,)

    return _make(out, (a,), "gather_steps", bw)


def gather_2d(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick ``a[rows[i], cols[i]]`` into a vector; gradient is scattered back."""
    if a.ndim != 2:
        raise ShapeError(f"gather_2d: expected a matrix, got {a.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _make(a.data[rows, cols].copy(), (a,), "gather_2d", bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {a.shape}")
    return _make(np.ascontiguousarray(a.data.T), (a,), "transpose", lambda g: (g.T,))


# ---------------------------------------------------------------------------
# reductions over a (possibly padded) axis


def _length_mask(shape: tuple[int, ...], axis: int, lengths) -> np.ndarray | None:
    if lengths is None:
        return None
    lengths = np.asarray(lengths)
    if axis != 1 or lengths.shape != (shape[0],):
        raise ShapeError(f"lengths {lengths.shape} need axis=1 and a leading batch axis, got {shape}")
    if np.any(lengths < 1) or np.any(lengths > shape[1]):
        raise ShapeError(f"lengths must lie in [1, {shape[1]}]")
    mask = np.arange(shape[1])[None, :] < lengths[:, None]
    return mask.reshape(mask.shape + (1,) * (len(shape) - 2))


def mean_axis(a: Tensor, axis: int = 0, lengths=None) -> Tensor:
    """Mean over ``axis``; with ``lengths`` only the first lengths[b] steps count."""
    if not -a.ndim <= axis < a.ndim or a.shape[axis] == 0:
        raise ShapeError(f"mean_axis: axis {axis} invalid for {a.shape}")
    mask = _length_mask(a.shape, axis, lengths)
    if mask is None:
        n = a.shape[axis]
        out = a.data.mean(axis=axis)

        def bw(g):
            return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

        return _make(out, (a,), "mean_axis", bw)
    counts = np.asarray(lengths, dtype=a.data.dtype).reshape((-1,) + (1,) * (a.ndim - 2))
    out = (a.data * mask).sum(axis=1) / counts

    def bw(g):
        return (np.expand_dims(g / counts, 1) * mask,)

    return _make(out, (a,), "mean_axis", bw)


def max_axis(a: Tensor, axis: int = 0, lengths=None) -> Tensor:
    """Max over ``axis``.  Gradient goes to the first maximal position only."""
    if not -a.ndim <= axis < a.ndim or a.shape[axis] == 0:
        raise ShapeError(f"max_axis: axis {axis} invalid for {a.shape}")
    axis = axis % a.ndim
    mask = _length_mask(a.shape, axis, lengths)
    src = a.data if mask is None else np.where(mask, a.data, -np.inf)
    idx = np.argmax(src, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _make(np.ascontiguousarray(out), (a,), "max_axis", bw)


# ---------------------------------------------------------------------------
# convolution, normalization, lookup


def conv_padding(k: int) -> tuple[int, int]:
    """Zero padding (left, right) that keeps sequence length for kernel size k."""
    return (k - 1) // 2, (k - 1) - (k - 1) // 2


def conv1d_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Length-preserving 1-d convolution over the time axis.

    x: (B, T, C) or (T, C); w: (k, C, r); b: (r,).  The sequence is padded with
    floor((k-1)/2) zeros on the left and the rest on the right, then each
    output step is ``sum_j x[t - left + j] @ w[j] + b``.
    """
    if w.ndim != 3:
        raise ShapeError(f"conv1d_same: weight must be (k, C, r), got {w.shape}")
    k, c, r = w.shape
    if k < 2:
        raise ConfigurationError(f"conv1d_same: kernel size must be >= 2, got {k}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or xd.shape[2] != c or b.shape != (r,):
        raise ShapeError(f"conv1d_same: x {x.shape}, w {w.shape}, b {b.shape} do not conform")
    bsz, t_len, _ = xd.shape
    left, right = conv_padding(k)
    padded = np.zeros((bsz, t_len + k - 1, c), dtype=xd.dtype)
    padded[:, left:left + t_len] = xd
    windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=1)  # (B, T, C, k)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(bsz * t_len, k * c)
    w2 = w.data.reshape(k * c, r)
    out = (cols @ w2 + b.data).reshape(bsz, t_len, r)
    if squeeze:
        out = out[0]

    def bw(g):
        g2 = g.reshape(bsz * t_len, r)
        gw = (cols.T @ g2).reshape(k, c, r)
        gb = g2.sum(axis=0)
        gcols = (g2 @ w2.T).reshape(bsz, t_len, k, c)
        gpad = np.zeros_like(padded)
        for j in range(k):
            gpad[:, j:j + t_len] += gcols[:, :, j]
        gx = gpad[:, left:left + t_len]
        return (gx[0] if squeeze else np.ascontiguousarray(gx)), gw, gb

    return _make(out, (x, w, b), "conv1d_same", bw)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
              mean: np.ndarray | None = None, var: np.ndarray | None = None) -> Tensor:
    """Batch normalization of an (N, D) tensor.

    Without ``mean``/``var`` the batch statistics (biased variance) are used
    and differentiated through; with them the op is a fixed affine map.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    dt = x.data.dtype
    if mean is None:
        mu = x.data.mean(axis=0)
        xc = x.data - mu
        v = (xc * xc).mean(axis=0)
        inv = 1.0 / np.sqrt(v + dt.type(eps))
        xhat = xc * inv
        n = x.shape[0]

        def bw(g):
            gxhat = g * gamma.data
            gx = inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
            return gx, (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        inv = (1.0 / np.sqrt(np.asarray(var, dtype=dt) + dt.type(eps))).astype(dt)
        xhat = (x.data - np.asarray(mean, dtype=dt)) * inv

        def bw(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    out = (xhat * gamma.data + beta.data).astype(dt, copy=False)
    return _make(out, (x, gamma, beta), "batchnorm", bw)


def batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mean, biased var, unbiased var) over the batch axis."""
    mu = x.mean(axis=0)
    var = x.var(axis=0)
    n = x.shape[0]
    unbiased = var * n / (n - 1) if n > 1 else var
    return mu, var, unbiased


def embedding_lookup(table: Tensor, index: np.ndarray) -> Tensor:
    """Rows of ``table`` (V, e) selected by an integer array of any shape."""
    index = np.asarray(index)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be (V, e), got {table.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: index out of range for table {table.shape}")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[index], (table,), "embedding_lookup", bw)


def l2_normalize(a: Tensor) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm; zero rows are an error."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise FloatingPointError("l2_normalize: zero vector has no direction")
    out = a.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make(out, (a,), "l2_normalize", bw)


# ---------------------------------------------------------------------------
# parameters and gradient checking


class ParameterSet:
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self[name] = t

    def __setitem__(self, name: str, tensor: Tensor) -> None:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must require grad")
        self._tensors[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._tensors[n]) for n in self.names()]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def num_values(self) -> int:
        return sum(t.data.size for t in self._tensors.values())


@dataclass
class GradCheckReport:
    tol: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tol}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(f: Callable[[], Tensor], params: ParameterSet, h: float = 1e-5,
                            tol: float = 1e-4, max_entries: int | None = None,
                            seed: int = 0) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` with central differences.

    ``f`` rebuilds the scalar loss from the current parameter values.  With
    ``max_entries`` only that many randomly chosen coordinates per parameter
    are perturbed.
    """
    for name, t in params.items():
        if t.data.dtype != np.float64:
            raise ConfigurationError(f"gradient check needs float64 parameters; {name} is {t.data.dtype}")
    params.zero_grad()
    loss = f()
    again = f()
    if loss.data.tobytes() != again.data.tobytes():
        raise GraphError("f is not deterministic: two forward passes differ")
    backward(loss)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        analytic = t.grad.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            coords = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            coords = np.arange(flat.size)
        numeric = np.empty(len(coords))
        with no_grad():
            for j, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                numeric[j] = (fp - fm) / (2 * h)
        err = relative_error(analytic[coords], numeric)
        report.errors[name] = float(err.max()) if err.size else 0.0
    params.zero_grad()
    return report
