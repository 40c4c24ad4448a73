"""Minimal dense-array reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major numpy array; executing an op while a ``Tape``
is active records the op and its backward rule. ``backward(loss)`` walks the
tape in reverse execution order (a valid reverse topological order, since an
op's output can only feed ops recorded later), visits every record exactly
once, accumulates gradients into ``Tensor.grad``, and clears the tape.

Ops run in whatever float dtype their inputs carry; gradient checks are
expected to be run in double precision.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from physio_recon import kernels
from physio_recon.errors import ShapeError

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """Dense n-dimensional array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self._grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; zeros if backward never reached this tensor."""
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_multiply(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops for one forward/backward cycle."""

    def __init__(self):
        self._records: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.remove(self)
        return False

    def __len__(self) -> int:
        return len(self._records)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Attach a backward rule to `out` on the active tape, if any input needs it."""
    if _TAPE_STACK and any(t.requires_grad for t in inputs):
        tape = _TAPE_STACK[-1]
        out.requires_grad = True
        out._tape = tape
        tape._records.append(_Node(out, tuple(inputs), backward_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # gradients are only ever rebound, never mutated in place, so holding a
    # view (or a shared reference from a same-shape fan-out) is safe
    if t._grad is None:
        t._grad = np.asarray(g)
    else:
        t._grad = t._grad + g


def backward(loss: Tensor) -> None:
    """Populate gradients of everything `loss` depends on; clears the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("backward: no recorded forward pass for this tensor")
    loss._grad = np.ones_like(loss.data)
    for node in reversed(tape._records):
        gout = node.out._grad
        if gout is None:
            continue
        for t, g in zip(node.inputs, node.backward_fn(gout)):
            if g is not None and t.requires_grad:
                _accumulate(t, g)
        node.out._tape = None
    tape._records.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scalar_multiply(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(s))
    return _record(out, (a,), lambda g: (g * a.data.dtype.type(s),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the last axis of x; w is (in, out), b is (out,)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    out = Tensor(x.data @ w.data + b.data)

    def bwd(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        gb = g.reshape(-1, w.shape[1]).sum(axis=0)
        return gx, gw, gb

    return _record(out, (x, w, b), bwd)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    out = Tensor(np.transpose(a.data, axes))
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


# ---------------------------------------------------------------------------
# reductions and normalization


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / a.data.dtype.type(n),)

    return _record(out, (a,), bwd)


def variance(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Population variance (divide by n) over `axis`."""
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu
    out = Tensor((centered * centered).mean(axis=axis, keepdims=keepdims))
    n = a.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) * centered * a.data.dtype.type(2.0 / n),)

    return _record(out, (a,), bwd)


def softmax(a: Tensor, axis: int = -1, scale: float | None = None) -> Tensor:
    """Softmax along `axis`, optionally of `scale * a` (fused for speed)."""
    z = a.data if scale is None else a.data * a.data.dtype.type(scale)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def bwd(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        gx = s * (g - inner)
        if scale is not None:
            gx *= a.data.dtype.type(scale)
        return (gx,)

    return _record(out, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learned gain and bias."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last axis of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g):
        dxhat = g * gain.data
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        ggain = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        gbias = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), bwd)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    return _record(out, (a,), lambda g: (g * (a.data > 0),))


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate); identity when not training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: an rng is required in training mode")
    draw_dtype = np.float32 if x.data.dtype == np.float32 else np.float64
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    mask = np.where(rng.random(x.shape, dtype=draw_dtype) >= rate, scale, x.data.dtype.type(0))
    out = Tensor(x.data * mask)
    return _record(out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# indexing and windowing


def select_index(x: Tensor, axis: int, index: int) -> Tensor:
    """Take the slice at `index` along `axis`, dropping that axis."""
    slicer = [slice(None)] * x.ndim
    slicer[axis] = index
    slicer = tuple(slicer)
    out = Tensor(x.data[slicer])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[slicer] = g
        return (gx,)

    return _record(out, (x,), bwd)


def gather_windows(x: Tensor, starts: np.ndarray, window: int) -> Tensor:
    """Stack slices x[s:s+window, :] into an (n_windows, window, d) tensor."""
    if x.ndim != 2:
        raise ShapeError(f"gather_windows: expected 2-D input, got {x.shape}")
    starts = np.asarray(starts, dtype=np.int64)
    out = Tensor(kernels.gather_windows(x.data, starts, window))
    return _record(
        out, (x,), lambda g: (kernels.scatter_add_windows(g, starts, x.shape[0]),)
    )


def overlap_mean(feats: Tensor, starts: np.ndarray, length: int) -> Tensor:
    """Per-position mean of overlapping window features.

    feats is (n_windows, window, d); output row t is the arithmetic mean of
    feats[w, t - starts[w]] over every window w covering position t. Raises if
    any of the `length` positions is covered by no window.
    """
    starts = np.asarray(starts, dtype=np.int64)
    window = feats.shape[1]
    counts = kernels.window_counts(starts, window, length)
    if (counts == 0).any():
        holes = np.flatnonzero(counts == 0)
        raise ValueError(f"overlap_mean: positions not covered by any window: {holes[:5]}")
    inv = (1.0 / counts).astype(feats.data.dtype)[:, None]
    out = Tensor(kernels.scatter_add_windows(feats.data, starts, length) * inv)
    return _record(
        out, (feats,), lambda g: (kernels.gather_windows(g * inv, starts, window),)
    )


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central finite differences.

    `f` must be deterministic and scalar-valued (run dropout with train=False);
    the relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if not np.array_equal(f(x).data, f(x).data):
        raise ValueError("grad_check: f is not deterministic")
    x.requires_grad = True
    x.zero_grad()
    with Tape():
        backward(f(x))
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()
