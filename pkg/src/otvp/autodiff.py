"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is exactly what the small transformer and the transport objective
need: matmul, softmax, layer norm, gelu, elementwise arithmetic, token
concatenation/slicing, reductions, cross-entropy and prediction entropy.
Every op computes its forward value eagerly and, when a tape is active and
an input requires gradients, records a backward rule on that tape.

Tapes are define-by-run and rebuilt on every forward pass.  Nodes are
appended in execution order, so the tape is already topologically sorted and
a single reversed sweep computes all gradients.  Tapes are tracked per
thread; separate threads may each run their own tape concurrently.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "concat_tokens",
    "slice_token",
    "sum_reduce",
    "mean_reduce",
    "softmax",
    "layer_norm",
    "gelu",
    "cross_entropy",
    "entropy",
    "backward",
]

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """A dense float64 array, optionally participating in gradient tracking.

    ``data`` is a C-contiguous ndarray; ``grad`` is populated on leaf
    tensors by :func:`backward`.  Non-finite values are rejected at
    construction: any op that would produce NaN/Inf fails immediately
    instead of poisoning downstream results.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        # np.ascontiguousarray would promote 0-d to 1-d; scalars must stay 0-d
        arr = np.asarray(data, dtype=np.float64, order="C")
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = arr.copy(order="C")
        # Single-pass screen: NaN/Inf anywhere poisons the sum.  Finite values
        # cannot overflow to Inf at the magnitudes this library supports.
        if not np.isfinite(arr.sum()):
            raise FloatingPointError("tensor contains non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Small amount of operator sugar; the named functions are the real API.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Node:
    """One recorded op: inputs, output, and the rule mapping the output
    gradient to input gradients (None for inputs that need no gradient)."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of ops for one forward pass.

    Use as a context manager; ops executed inside the block are recorded
    when any of their inputs requires gradients.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tape contexts must nest"

    def __len__(self) -> int:
        return len(self.nodes)


def _make(value: np.ndarray, inputs: tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]) -> Tensor:
    """Wrap an op result, recording it if a tape is active and needed."""
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=track)
    if track:
        tape.nodes.append(_Node(inputs, out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    value = a.data + b.data

    def bw(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(value, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    value = a.data - b.data

    def bw(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(value, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    value = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(value, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    value = a.data * s

    def bw(g):
        return (g * s,)

    return _make(value, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; also handles stacked (batched) operands with numpy
    semantics.  Gradient rules: da = g @ b^T, db = a^T @ g, summed over any
    broadcast leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2  # shared weight under batched activations
    k, n = b.shape[-2], b.shape[-1]
    value = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, n) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if flat:
                # one flat GEMM instead of per-batch outer products
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(value, (a, b), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    value = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(value, (a,), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    value = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(value, (a,), bw)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    value = np.broadcast_to(a.data, shape).copy()

    def bw(g):
        return (_unbroadcast(g, a.shape),)

    return _make(value, (a,), bw)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)
    value = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _make(value, parts, bw)


def concat_tokens(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate token sequences along the token axis (second to last)."""
    return concat(parts, axis=-2)


def slice_token(a: Tensor, index: int) -> Tensor:
    """Select one token along the token axis, dropping that axis."""
    value = np.take(a.data, index, axis=-2)

    def bw(g):
        full = np.zeros(a.shape)
        idx = (Ellipsis, index, slice(None))
        full[idx] = g
        return (full,)

    return _make(value, (a,), bw)


def sum_reduce(a: Tensor, axis: int | None = None) -> Tensor:
    value = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.full(a.shape, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(value, (a,), bw)


def mean_reduce(a: Tensor, axis: int | None = None) -> Tensor:
    value = a.data.mean(axis=axis)
    n = a.size if axis is None else a.shape[axis]

    def bw(g):
        if axis is None:
            return (np.full(a.shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape) / n,)

    return _make(value, (a,), bw)


# ---------------------------------------------------------------------------
# nonlinear ops
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    p = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=axis, keepdims=True)

    def bw(g):
        gp = g * p
        dot = gp.sum(axis=axis, keepdims=True)
        np.subtract(g, dot, out=gp)
        gp *= p
        return (gp,)

    return _make(p, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply the
    affine (gain, bias).  A zero-variance row maps to zeros before the
    affine: the variance is clamped by eps rather than producing NaN."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    value = xhat * gain.data + bias.data

    def bw(g):
        gg = g * gain.data
        # d xhat/dx folded analytically: inv * (gg - mean(gg) - xhat * mean(gg*xhat))
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gg - m1 - xhat * m2)
        ggain = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        gbias = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(value, (x, gain, bias), bw)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation.  The backward rule
    differentiates the approximation itself, so gradient checks are exact."""
    x = a.data
    x2 = x * x
    # inner = c * (x + 0.044715 x^3), built without np.power
    inner = x2 * (0.044715 * _GELU_C)
    inner += _GELU_C
    inner *= x
    t = np.tanh(inner)
    value = t + 1.0
    value *= x
    value *= 0.5

    def bw(g):
        # d gelu = 0.5(1+t) + 0.5 x sech^2(inner) * c (1 + 3*0.044715 x^2)
        dinner = x2 * (3 * 0.044715 * _GELU_C)
        dinner += _GELU_C
        sech2 = 1.0 - t * t
        sech2 *= dinner
        sech2 *= x
        sech2 += t
        sech2 += 1.0
        sech2 *= 0.5
        sech2 *= g
        return (sech2,)

    return _make(value, (a,), bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under softmax(logits).

    `logits` is (batch, classes); computed via the log-sum-exp trick so huge
    logits do not overflow.
    """
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects (batch, classes) logits")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels must be one integer per row of logits")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    picked = z[np.arange(n), labels]
    value = np.mean(lse - picked)

    def bw(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(value, (logits,), bw)


def entropy(probs: Tensor, axis: int = -1) -> Tensor:
    """Shannon entropy of probability rows along `axis` (natural log),
    with the 0 * log 0 = 0 convention."""
    p = probs.data
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    value = -plogp.sum(axis=axis)

    def bw(g):
        ge = np.expand_dims(g, axis)
        contrib = np.where(p > 0, -(np.log(np.where(p > 0, p, 1.0)) + 1.0), 0.0)
        return (ge * contrib,)

    return _make(value, (probs,), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate gradients of a scalar `loss` into every requires_grad leaf
    reachable on `tape`.  Each node is visited exactly once, in reverse
    execution order, so repeated runs produce bit-identical gradients.
    """
    if loss.ndim != 0:
        raise ValueError("backward expects a scalar loss")
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    produced = {id(node.output) for node in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for tensor, ig in zip(node.inputs, input_grads):
            if ig is None or not tensor.requires_grad:
                continue
            ig = np.asarray(ig)
            if id(tensor) in produced:
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
            else:
                # leaf: accumulate into .grad
                if tensor.grad is None:
                    tensor.grad = ig.reshape(tensor.shape).copy()
                else:
                    tensor.grad = tensor.grad + ig.reshape(tensor.shape)
