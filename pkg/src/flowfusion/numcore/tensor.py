"""Dense float64 tensors with reverse-mode automatic differentiation.

A thread-local tape records every primitive application whose inputs
require gradients, in execution order (which is already a topological
order). ``backward`` replays the tape in reverse, accumulating gradients
by summation over all paths. Forward values are never mutated, so
re-running a forward pass after ``backward`` reproduces the original
results bit for bit.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A dense float64 array plus gradient bookkeeping.

    ``grad`` buffers are allocated lazily during ``backward``; a tensor
    that never participates in the loss keeps ``grad is None``, which
    :func:`grad_of` reports as an all-zero gradient.
    """

    __slots__ = ("values", "requires_grad", "grad", "_grad_borrowed")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._grad_borrowed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_borrowed = False

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def grad_of(t: Tensor) -> np.ndarray:
    """Accumulated gradient; zeros for tensors the loss never touched."""
    return t.grad if t.grad is not None else np.zeros_like(t.values)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # First contribution borrows the array (copy-on-write): once a second
    # contribution arrives, the sum allocates a fresh owned buffer.
    if t.grad is None:
        t.grad = np.asarray(g, dtype=np.float64).reshape(t.values.shape)
        t._grad_borrowed = True
    elif t._grad_borrowed:
        t.grad = t.grad + np.asarray(g).reshape(t.values.shape)
        t._grad_borrowed = False
    else:
        t.grad += np.asarray(g).reshape(t.values.shape)


def _grad_buffer(t: Tensor) -> np.ndarray:
    """Owned, writable gradient buffer for indexed accumulation."""
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    elif t._grad_borrowed:
        t.grad = t.grad.copy()
    t._grad_borrowed = False
    return t.grad


# --------------------------------------------------------------------------
# Tape machinery. One tape per thread; independent tapes may run on
# separate threads, but a single tape must stay single-threaded.

_TLS = threading.local()


def _tape() -> dict:
    tape = getattr(_TLS, "tape", None)
    if tape is None:
        tape = {"entries": [], "consumed": False, "paused": 0}
        _TLS.tape = tape
    return tape


def tape_size() -> int:
    return len(_tape()["entries"])


def reset_tape(params=()) -> None:
    """Clear the tape and zero the gradients of the given tensors."""
    tape = _tape()
    tape["entries"].clear()
    tape["consumed"] = False
    for p in params:
        p.zero_grad()


class pause_recording:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        _tape()["paused"] += 1
        return self

    def __exit__(self, *exc):
        _tape()["paused"] -= 1
        return False


def _recording() -> bool:
    return _tape()["paused"] == 0


def _record(out: Tensor, backward_fn) -> None:
    tape = _tape()
    if tape["consumed"]:
        raise TapeError("tape already consumed by backward; call reset_tape first")
    tape["entries"].append((out, backward_fn))


def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into every recorded tensor's .grad."""
    tape = _tape()
    if tape["consumed"]:
        raise TapeError("backward called twice without reset_tape")
    if not isinstance(loss, Tensor) or loss.values.shape != ():
        raise ShapeError("backward expects a scalar Tensor loss")
    if not loss.requires_grad:
        raise TapeError("loss does not require gradients (nothing recorded)")
    if not tape["entries"]:
        raise TapeError("tape is empty")
    loss.grad = np.ones_like(loss.values)
    for out, fn in reversed(tape["entries"]):
        if out.grad is not None:  # branches off the loss path carry nothing
            fn(out.grad)
    tape["consumed"] = True


# --------------------------------------------------------------------------
# Helpers


def _wants_grad(*tensors: Tensor) -> bool:
    return _recording() and any(t.requires_grad for t in tensors)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over axes that numpy broadcasting introduced."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


# --------------------------------------------------------------------------
# Primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values + b.values, requires_grad=_wants_grad(a, b))
    if out.requires_grad:
        def backward_fn(g, a=a, b=b):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.values.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.values.shape))
        _record(out, backward_fn)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values - b.values, requires_grad=_wants_grad(a, b))
    if out.requires_grad:
        def backward_fn(g, a=a, b=b):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.values.shape))
            if b.requires_grad:
                _accum(b, -_unbroadcast(g, b.values.shape))
        _record(out, backward_fn)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.values, requires_grad=_wants_grad(a))
    if out.requires_grad:
        def backward_fn(g, a=a):
            _accum(a, -g)
        _record(out, backward_fn)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values * b.values, requires_grad=_wants_grad(a, b))
    if out.requires_grad:
        def backward_fn(g, a=a, b=b):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.values, a.values.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.values, b.values.shape))
        _record(out, backward_fn)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError(
            f"matmul requires >=2-D operands, got {a.values.shape} and {b.values.shape}"
        )
    if a.values.shape[-1] != b.values.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.values.shape} @ {b.values.shape}")
    out = Tensor(a.values @ b.values, requires_grad=_wants_grad(a, b))
    if out.requires_grad:
        def backward_fn(g, a=a, b=b):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.values, -1, -2)
                _accum(a, _unbroadcast(ga, a.values.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.values, -1, -2) @ g
                _accum(b, _unbroadcast(gb, b.values.shape))
        _record(out, backward_fn)
    return out


def dilated_causal_conv1d(x, w, dilation: int = 1) -> Tensor:
    """Valid (no padding) dilated convolution over the last axis.

    ``x`` is [..., C_in, T], ``w`` is [C_out, C_in, K]; the output is
    [..., C_out, T - (K-1)*dilation]. Output step t is aligned with input
    step t + (K-1)*dilation, i.e. the newest tap, so it never sees the
    future.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.values.ndim != 3:
        raise ShapeError(f"conv kernel must be [C_out, C_in, K], got {w.values.shape}")
    if x.values.ndim < 2:
        raise ShapeError(f"conv input must be at least 2-D, got {x.values.shape}")
    c_out, c_in, k = w.values.shape
    if x.values.shape[-2] != c_in:
        raise ShapeError(
            f"conv channel mismatch: input {x.values.shape} vs kernel {w.values.shape}"
        )
    t = x.values.shape[-1]
    t_out = t - (k - 1) * dilation
    if t_out < 1:
        raise ShapeError(
            f"conv input length {t} too short for kernel {k} with dilation {dilation}"
        )
    xv, wv = x.values, w.values
    out_vals = np.zeros(xv.shape[:-2] + (c_out, t_out))
    for i in range(k):
        seg = xv[..., :, i * dilation : i * dilation + t_out]
        out_vals += np.matmul(wv[:, :, i], seg)
    out = Tensor(out_vals, requires_grad=_wants_grad(x, w))
    if out.requires_grad:
        def backward_fn(g, x=x, w=w, dilation=dilation, t_out=t_out, k=k):
            if x.requires_grad:
                buf = _grad_buffer(x)
                for i in range(k):
                    buf[..., :, i * dilation : i * dilation + t_out] += np.matmul(
                        w.values[:, :, i].T, g
                    )
            if w.requires_grad:
                wbuf = _grad_buffer(w)
                gb = g.reshape(-1, g.shape[-2], g.shape[-1])
                xb = np.ascontiguousarray(x.values).reshape(
                    -1, x.values.shape[-2], x.values.shape[-1]
                )
                for i in range(k):
                    seg = xb[:, :, i * dilation : i * dilation + t_out]
                    wbuf[:, :, i] += np.matmul(gb, seg.swapaxes(-1, -2)).sum(axis=0)
        _record(out, backward_fn)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    vals = _sigmoid_values(x.values)
    out = Tensor(vals, requires_grad=_wants_grad(x))
    if out.requires_grad:
        def backward_fn(g, x=x, vals=vals):
            _accum(x, g * vals * (1.0 - vals))
        _record(out, backward_fn)
    return out


def tanh(x) -> Tensor:
    x = as_tensor(x)
    vals = np.tanh(x.values)
    out = Tensor(vals, requires_grad=_wants_grad(x))
    if out.requires_grad:
        def backward_fn(g, x=x, vals=vals):
            _accum(x, g * (1.0 - vals * vals))
        _record(out, backward_fn)
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.values, 0.0), requires_grad=_wants_grad(x))
    if out.requires_grad:
        def backward_fn(g, x=x):
            _accum(x, g * (x.values > 0.0))
        _record(out, backward_fn)
    return out


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    out = Tensor(
        np.where(x.values > 0.0, x.values, slope * x.values),
        requires_grad=_wants_grad(x),
    )
    if out.requires_grad:
        def backward_fn(g, x=x, slope=slope):
            _accum(x, g * np.where(x.values > 0.0, 1.0, slope))
        _record(out, backward_fn)
    return out


def absolute(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.abs(x.values), requires_grad=_wants_grad(x))
    if out.requires_grad:
        def backward_fn(g, x=x):
            _accum(x, g * np.sign(x.values))
        _record(out, backward_fn)
    return out


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.logaddexp(0.0, x.values), requires_grad=_wants_grad(x))
    if out.requires_grad:
        def backward_fn(g, x=x):
            _accum(x, g * _sigmoid_values(x.values))
        _record(out, backward_fn)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    vals = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(vals, requires_grad=_wants_grad(x))
    if out.requires_grad:
        def backward_fn(g, x=x, vals=vals, axis=axis):
            inner = (g * vals).sum(axis=axis, keepdims=True)
            _accum(x, vals * (g - inner))
        _record(out, backward_fn)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = Tensor(
        np.concatenate([t.values for t in tensors], axis=axis),
        requires_grad=_wants_grad(*tensors),
    )
    if out.requires_grad:
        sizes = [t.values.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward_fn(g, tensors=tensors, offsets=offsets, axis=axis):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    _accum(t, g[tuple(idx)])
        _record(out, backward_fn)
    return out


def take_slice(x, key) -> Tensor:
    """Basic slicing (tuple of slices, may include Ellipsis)."""
    x = as_tensor(x)
    out = Tensor(x.values[key].copy(), requires_grad=_wants_grad(x))
    if out.requires_grad:
        def backward_fn(g, x=x, key=key):
            _grad_buffer(x)[key] += g
        _record(out, backward_fn)
    return out


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(np.take(x.values, idx, axis=axis), requires_grad=_wants_grad(x))
    if out.requires_grad:
        def backward_fn(g, x=x, idx=idx, axis=axis):
            ax = axis % x.values.ndim
            key = (slice(None),) * ax + (idx,)
            np.add.at(_grad_buffer(x), key, g)
        _record(out, backward_fn)
    return out


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.values.sum(axis=axis, keepdims=keepdims), requires_grad=_wants_grad(x))
    if out.requires_grad:
        def backward_fn(g, x=x, axis=axis, keepdims=keepdims):
            _accum(x, _expand_reduced(g, x.values.shape, axis, keepdims))
        _record(out, backward_fn)
    return out


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.values.mean(axis=axis, keepdims=keepdims), requires_grad=_wants_grad(x))
    if out.requires_grad:
        n = x.values.size if axis is None else _axis_size(x.values.shape, axis)

        def backward_fn(g, x=x, axis=axis, keepdims=keepdims, n=n):
            _accum(x, _expand_reduced(g, x.values.shape, axis, keepdims) / n)
        _record(out, backward_fn)
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.values.reshape(shape), requires_grad=_wants_grad(x))
    if out.requires_grad:
        def backward_fn(g, x=x):
            _accum(x, g.reshape(x.values.shape))
        _record(out, backward_fn)
    return out


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.transpose(x.values, axes), requires_grad=_wants_grad(x))
    if out.requires_grad:
        inverse = np.argsort(axes)

        def backward_fn(g, x=x, inverse=inverse):
            _accum(x, np.transpose(g, inverse))
        _record(out, backward_fn)
    return out


def _axis_size(shape: tuple[int, ...], axis) -> int:
    if isinstance(axis, int):
        return shape[axis]
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)
