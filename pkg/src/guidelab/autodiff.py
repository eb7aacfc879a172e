"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough machinery to express small conv nets and differentiate scalar
losses with respect to their inputs and weights: elementwise arithmetic with
trailing-dimension broadcasting, 2-D matmul, a single-image conv2d, the usual
activations and reductions, dropout, and an AdamW optimizer.

Every forward op validates that its output is finite; NaN or Inf anywhere is
treated as a hard error rather than something to propagate silently.  The
graph is rebuilt on every forward pass: each produced tensor links back to the
entry that created it, and ``backward`` replays those entries in reverse
topological order exactly once.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeEntry",
    "as_tensor",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "clamp_min",
    "clamp",
    "matmul",
    "conv2d",
    "relu",
    "silu",
    "softmax",
    "log_softmax",
    "tsum",
    "tmean",
    "masked_mean",
    "concat",
    "reshape",
    "dropout",
    "AdamW",
]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure forward evaluation)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class TapeEntry:
    """One recorded operation: inputs, output, and the reverse-mode closure.

    ``vjp`` maps the output cotangent to a tuple of input cotangents (``None``
    for inputs that do not need gradients).
    """

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], output: "Tensor", vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tensor:
    """A float64 array plus optional gradient buffer.

    Tensors are value-semantic: ops never mutate their inputs.  ``grad`` of a
    tensor that requires gradients reads as zeros until a backward pass
    deposits something, so unreachable leaves report an exact zero gradient.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_entry")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._entry = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self):
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# -- graph plumbing ---------------------------------------------------------


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


def _make(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(op, out_data)
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._entry = TapeEntry(op, inputs, out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast cotangent back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


def backward(root: Tensor) -> None:
    """Propagate d(root)/d(node) through the recorded graph.

    The root must be scalar.  Every tensor in the reachable graph that
    requires gradients gets its ``grad`` buffer set (overwritten, not
    accumulated across calls); each recorded entry is visited exactly once.
    """
    if root.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")

    # Iterative topological sort over creator links.
    topo: list[TapeEntry] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        entry = node._entry
        if entry is None:
            continue
        if expanded:
            topo.append(entry)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in entry.inputs:
            stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    holders: dict[int, Tensor] = {id(root): root}
    for entry in reversed(topo):
        g = grads.get(id(entry.output))
        if g is None:
            continue
        partials = entry.vjp(g)
        for parent, pg in zip(entry.inputs, partials):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                holders[key] = parent

    for entry in topo:
        for parent in entry.inputs:
            if parent.requires_grad:
                parent._grad = grads.get(id(parent), np.zeros_like(parent.data))
    if root.requires_grad:
        root._grad = grads[id(root)]


def _needs(t: Tensor) -> bool:
    return t.requires_grad


# -- elementwise ops ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if _needs(a) else None,
            _unbroadcast(g, b.shape) if _needs(b) else None,
        )

    return _make("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if _needs(a) else None,
            _unbroadcast(-g, b.shape) if _needs(b) else None,
        )

    return _make("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape) if _needs(a) else None,
            _unbroadcast(g * a.data, b.shape) if _needs(b) else None,
        )

    return _make("mul", out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape) if _needs(a) else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if _needs(b) else None,
        )

    return _make("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g if _needs(a) else None,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out if _needs(a) else None,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log requires strictly positive input; clamp first")
    out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data if _needs(a) else None,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise ValueError("sqrt requires non-negative input")
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / out) if _needs(a) else None,)

    return _make("sqrt", out, (a,), vjp)


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, lo)

    def vjp(g):
        return (g * (a.data >= lo) if _needs(a) else None,)

    return _make("clamp_min", out, (a,), vjp)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} exceeds hi={hi}")
    out = np.clip(a.data, lo, hi)

    def vjp(g):
        return (g * ((a.data >= lo) & (a.data <= hi)) if _needs(a) else None,)

    return _make("clamp", out, (a,), vjp)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return (
            g @ b.data.T if _needs(a) else None,
            a.data.T @ g if _needs(b) else None,
        )

    return _make("matmul", out, (a, b), vjp)


def conv2d(x, k, padding: int = 0) -> Tensor:
    """Single-image 2-D cross-correlation.

    ``x`` has shape (c_in, h, w), ``k`` has shape (c_out, c_in, kh, kw) with
    odd kh, kw.  ``padding`` zero-pads both spatial dims.
    """
    x, k = as_tensor(x), as_tensor(k)
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise ValueError("conv2d expects input (c,h,w) and kernel (o,c,kh,kw)")
    c_out, c_in, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel extents must be odd")
    if x.shape[0] != c_in:
        raise ValueError(f"conv2d: input channels {x.shape[0]} != kernel channels {c_in}")
    if padding < 0:
        raise ValueError("conv2d padding must be non-negative")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    h_out = xp.shape[1] - kh + 1
    w_out = xp.shape[2] - kw + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError("conv2d: kernel larger than padded input")

    # im2col: (c_in*kh*kw, h_out*w_out) columns against a flattened kernel.
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, h_out * w_out)
    out = (k.data.reshape(c_out, c_in * kh * kw) @ cols).reshape(c_out, h_out, w_out)

    def vjp(g):
        gmat = g.reshape(c_out, h_out * w_out)
        gx = None
        if _needs(x):
            gxp = np.zeros_like(xp)
            # scatter each kernel tap's contribution back onto the padded input
            for i in range(kh):
                for j in range(kw):
                    tap = np.tensordot(k.data[:, :, i, j], g, axes=(0, 0))
                    gxp[:, i : i + h_out, j : j + w_out] += tap
            gx = gxp[:, padding : padding + x.shape[1], padding : padding + x.shape[2]] if padding else gxp
        gk = None
        if _needs(k):
            gk = (gmat @ cols.T).reshape(c_out, c_in, kh, kw)
        return (gx, gk)

    return _make("conv2d", out, (x, k), vjp)


# -- activations --------------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0) if _needs(a) else None,)

    return _make("relu", out, (a,), vjp)


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def vjp(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))) if _needs(a) else None,)

    return _make("silu", out, (a,), vjp)


def _normalize_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"{op}: axis {axis} out of range for {ndim}-D tensor")
    return axis % ndim


def softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = _normalize_axis(axis, a.data.ndim, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        if not _needs(a):
            return (None,)
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", out, (a,), vjp)


def log_softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = _normalize_axis(axis, a.data.ndim, "log_softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def vjp(g):
        if not _needs(a):
            return (None,)
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), vjp)


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    if axis is not None:
        axis = _normalize_axis(axis, a.data.ndim, "sum")
    out = a.data.sum(axis=axis)

    def vjp(g):
        if not _needs(a):
            return (None,)
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make("sum", out, (a,), vjp)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[_normalize_axis(axis, a.data.ndim, "mean")]
    return mul(tsum(a, axis=axis), 1.0 / n)


def masked_mean(a, mask) -> Tensor:
    """Mean of ``a`` over positions where ``mask`` is nonzero.

    The mask is a constant 0/1 array broadcastable to ``a``'s shape; when it
    broadcasts (e.g. a (h, w) mask against (c, h, w) values), the mean runs
    over every selected element of the broadcast result.
    """
    a = as_tensor(a)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    mb = np.broadcast_to(m, np.broadcast_shapes(a.shape, m.shape)).astype(np.float64)
    if mb.shape != a.shape:
        raise ValueError(f"masked_mean: mask shape {m.shape} does not broadcast to {a.shape}")
    count = mb.sum()
    if count == 0:
        raise ValueError("masked_mean: mask selects no elements")
    out = np.asarray((a.data * mb).sum() / count)

    def vjp(g):
        return (g * mb / count if _needs(a) else None, None)

    return _make("masked_mean", out, (a, as_tensor(m)), vjp)


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape) if _needs(a) else None,)

    return _make("reshape", out, (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("concat needs at least one tensor")
    axis = _normalize_axis(axis, ts[0].data.ndim, "concat")
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if _needs(t) else None for t, p in zip(ts, pieces))

    return _make("concat", out, ts, vjp)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with an explicit generator; identity when rate == 0."""
    a = as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def vjp(g):
        return (g * keep if _needs(a) else None,)

    return _make("dropout", a.data * keep, (a,), vjp)


# -- optimizer ----------------------------------------------------------------


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    State is positional: step ``i`` of ``params`` always refers to the same
    parameter across calls.  Updates mutate ``param.data`` in place; the step
    is deterministic given the gradient sequence.
    """

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: list[np.ndarray] = []
        self._v: list[np.ndarray] = []

    def step(self, params: Sequence[Tensor], grads: Sequence[np.ndarray] | None = None, lr: float | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in params]
        if len(grads) != len(params):
            raise ValueError("params and grads must align")
        if not self._m:
            self._m = [np.zeros_like(p.data) for p in params]
            self._v = [np.zeros_like(p.data) for p in params]
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            if g.shape != p.data.shape:
                raise ValueError(f"grad {i} shape {g.shape} != param shape {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(
                    f"non-finite gradient for parameter {i} (shape {p.data.shape}) at step {self.t}"
                )
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m = self._m[i]
            v = self._v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
