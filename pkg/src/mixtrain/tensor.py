"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a float32/float64 numpy array. Operations executed
while a :class:`GradientTape` is active append nodes to the tape;
:func:`backward` replays the tape in strict reverse append order,
accumulating gradients into every participating tensor in a fixed order, so
two backward passes over equal tapes produce bit-identical gradients.

Only the operations this project needs exist. Elementwise broadcasting is
deliberately restricted to scalar-vs-tensor and equal shapes; anything wider
must go through the explicit :func:`broadcast_to`.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Shapes passed to an op do not line up."""


class TapeError(RuntimeError):
    """Backward requested on a detached or already-consumed tape."""


_TLS = threading.local()


def _active_tape() -> Optional["GradientTape"]:
    return getattr(_TLS, "tape", None)


class _Node:
    __slots__ = ("op", "inputs", "out", "bwd")

    def __init__(self, op, inputs, out, bwd):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class GradientTape:
    """Append-only record of differentiable ops; one per training step.

    Use as a context manager; tapes are thread-local, so parallel head
    execution gives each thread its own tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._outer = None

    def __enter__(self) -> "GradientTape":
        self._outer = _active_tape()
        _TLS.tape = self
        return self

    def __exit__(self, *exc):
        _TLS.tape = self._outer
        self._outer = None
        return False

    def reset(self) -> None:
        """Clear every gradient this tape touched and allow another backward."""
        for node in self.nodes:
            node.out.grad = None
            for t in node.inputs:
                t.grad = None
        self.consumed = False


class Tensor:
    """N-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "tape_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[GradientTape] = None
        self.tape_id: Optional[int] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars only on the right
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            bwd: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        out.tape_id = len(tape.nodes)
        tape.nodes.append(_Node(op, tuple(inputs), out, bwd))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g if g.base is None and g.dtype == t.data.dtype else np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _sweep(tape: GradientTape, upto: int) -> None:
    for node in reversed(tape.nodes[:upto]):
        gy = node.out.grad
        if gy is None:
            continue
        parts = node.bwd(gy)
        for t, g in zip(node.inputs, parts):
            if g is None or not t.requires_grad:
                continue
            _accumulate(t, g)


def backward(loss: Tensor, seed: float = 1.0) -> None:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on."""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise TapeError("loss is not attached to an active tape")
    if tape.consumed:
        raise TapeError("tape already consumed; call reset() before reusing it")
    tape.consumed = True
    loss.grad = np.full_like(loss.data, seed)
    _sweep(tape, len(tape.nodes))


def backward_from(t: Tensor, grad: np.ndarray) -> None:
    """Continue a backward pass from ``t`` with an externally supplied gradient.

    Used by the parallel-heads path: head branches run on their own tapes,
    their feature gradients are reduced in a fixed order, and the shared
    backbone tape is then swept from ``t`` downward.
    """
    tape = t.tape
    if tape is None:
        raise TapeError("tensor is not attached to a tape")
    if tape.consumed:
        raise TapeError("tape already consumed; call reset() before reusing it")
    if grad.shape != t.data.shape:
        raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {t.data.shape}")
    tape.consumed = True
    t.grad = grad
    _sweep(tape, t.tape_id + 1)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def _check_equal_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not equal "
                             "(only scalar or equal-shape operands are supported)")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; inputs of equal rank >= 2 with matching leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError(f"matmul: ranks {a.ndim} and {b.ndim} unsupported")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = a.data @ b.data

    def bwd(gy):
        ga = gy @ b.data.swapaxes(-1, -2) if a.requires_grad else None
        gb = a.data.swapaxes(-1, -2) @ gy if b.requires_grad else None
        return ga, gb

    return _record("matmul", (a, b), out, bwd)


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_equal_shapes("add", a, b)
        return _record("add", (a, b), a.data + b.data, lambda gy: (gy, gy))
    c = a.dtype.type(b)
    return _record("add", (a,), a.data + c, lambda gy: (gy,))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_equal_shapes("sub", a, b)
        return _record("sub", (a, b), a.data - b.data, lambda gy: (gy, -gy))
    c = a.dtype.type(b)
    return _record("sub", (a,), a.data - c, lambda gy: (gy,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_equal_shapes("mul", a, b)
        return _record("mul", (a, b), a.data * b.data,
                       lambda gy: (gy * b.data, gy * a.data))
    return scale(a, b)


def scale(a: Tensor, s: float) -> Tensor:
    c = a.dtype.type(s)
    return _record("scale", (a,), a.data * c, lambda gy: (gy * c,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _record("relu", (a,), out, lambda gy: (gy * (a.data > 0),))


def gelu(a: Tensor) -> Tensor:
    """GELU in its tanh form (the approximation, not the erf definition)."""
    x = np.ascontiguousarray(a.data)
    out = kernels.gelu_forward(x)
    return _record("gelu", (a,), out,
                   lambda gy: (kernels.gelu_backward(x, np.ascontiguousarray(gy)),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda gy: (gy * out,))


def log(a: Tensor) -> Tensor:
    return _record("log", (a,), np.log(a.data), lambda gy: (gy / a.data,))


_ELEMENTWISE = {}


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch an elementwise op by name (add/sub/mul/scale/relu/gelu/exp/log)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


_ELEMENTWISE.update(add=add, sub=sub, mul=mul, scale=scale,
                    relu=relu, gelu=gelu, exp=exp, log=log)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _record("reshape", (a,), out, lambda gy: (gy.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _record("transpose", (a,), out, lambda gy: (gy.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    in_shape = (1,) * (len(shape) - a.ndim) + a.shape
    axes = tuple(i for i, (s_in, s_out) in enumerate(zip(in_shape, shape)) if s_in == 1 and s_out != 1)

    def bwd(gy):
        g = gy.sum(axis=axes, keepdims=True) if axes else gy
        return (g.reshape(a.data.shape),)

    return _record("broadcast_to", (a,), np.ascontiguousarray(out), bwd)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(gy):
        g = gy
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(np.asarray(g, dtype=a.dtype), a.data.shape).copy(),)

    return _record("sum", (a,), np.asarray(out), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)
    inv = a.dtype.type(1.0 / n)

    def bwd(gy):
        g = gy * inv
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(np.asarray(g, dtype=a.dtype), a.data.shape).copy(),)

    return _record("mean", (a,), np.asarray(out), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    rows = np.ascontiguousarray(x.data.reshape(-1, d))
    y, mu, rstd = kernels.layernorm_forward(rows, gain.data, bias.data, eps)

    def bwd(gy):
        gys = np.ascontiguousarray(gy.reshape(-1, d))
        gx, ggain, gbias = kernels.layernorm_backward(rows, gain.data, mu, rstd, gys)
        return gx.reshape(x.data.shape), ggain, gbias

    return _record("layer_norm", (x, gain, bias), y.reshape(x.data.shape), bwd)


def softmax(x: Tensor) -> Tensor:
    """Row-stabilized softmax over the last axis."""
    d = x.shape[-1]
    rows = np.ascontiguousarray(x.data.reshape(-1, d))
    s = kernels.softmax_rows(rows)

    def bwd(gy):
        gys = np.ascontiguousarray(gy.reshape(-1, d))
        return (kernels.softmax_backward_rows(s, gys).reshape(x.data.shape),)

    return _record("softmax", (x,), s.reshape(x.data.shape), bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"softmax_cross_entropy: labels shape {labels.shape} != ({b},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels out of range [0, {c}): min={labels.min()}, max={labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sm = ez / ez.sum(axis=1, keepdims=True)
    picked = z[np.arange(b), labels]
    loss = np.asarray((np.log(ez.sum(axis=1)) - picked).mean(), dtype=logits.dtype)

    def bwd(gy):
        g = sm.copy()
        g[np.arange(b), labels] -= 1.0
        g *= gy / b
        return (g,)

    return _record("softmax_cross_entropy", (logits,), loss, bwd)


def mse(pred: Tensor, target: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared difference over all (or mask-selected) positions."""
    _check_equal_shapes("mse", pred, target)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape:
            raise DimensionError(f"mse: mask shape {mask.shape} != {pred.shape}")
        n = int(mask.sum())
        if n == 0:
            raise ValueError("mse: mask selects no positions")
        sel = mask.astype(pred.dtype)
    else:
        n = pred.size
        sel = None
    diff = pred.data - target.data
    if sel is not None:
        diff = diff * sel
    loss = np.asarray(np.sum(diff * diff) / n, dtype=pred.dtype)
    coef = pred.dtype.type(2.0 / n)

    def bwd(gy):
        g = (gy * coef) * diff
        return g, -g

    return _record("mse", (pred, target), loss, bwd)
