"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable primitive records a :class:`Node` on the thread-local
:class:`Tape`.  :func:`backward` walks the tape in reverse, visits each node
once, accumulates gradients into leaf tensors and clears the tape.

Broadcasting is limited to numpy's trailing-aligned rules, which in practice
means a bias or mask broadcast over leading batch dimensions.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError",
    "no_grad", "current_tape", "backward", "finite_difference_check",
    "add", "sub", "mul", "div", "scale", "matmul", "gelu", "relu", "softmax",
    "layer_norm", "embedding", "concat", "index", "transpose", "reshape",
    "sum", "mean", "l2_norm", "softmax_cross_entropy",
]

# tanh approximation of gelu; FD checks must differentiate exactly this function
GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._op: str | None = None  # None marks a leaf

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
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: scale(self, -1.0)
    __getitem__ = lambda self, key: index(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations.

    Nodes are appended as operations execute, so every node's inputs were
    produced (or are leaves) before it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = current_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = op
        tape.record(Node(op, inputs, out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("subtract", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("subtract", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("multiply", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("multiply", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("divide", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("divide", out, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    inner = GELU_C * x * (1.0 + GELU_K * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_K * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make("gelu", out, (a,), bw)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _make("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gamma`` and ``beta``."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer-norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = gb = gg = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make("layer-norm", out, (x, gamma, beta), bw)


# ------------------------------------------------------------- contractions

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 1:
        def bw_vec(g):
            ga = g[..., None] * b.data if a.requires_grad else None
            gb = np.tensordot(a.data, g, axes=(tuple(range(a.ndim - 1)),) * 2) if b.requires_grad else None
            return ga, gb

        return _make("matmul", a.data @ b.data, (a, b), bw_vec)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``, recorded as one node."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: input {x.shape}, weight {w.shape}, bias {b.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = (x2 @ w.data + b.data).reshape(x.shape[:-1] + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make("linear", out, (x, w, b), bw)


def attention(q, k, v, bias=None, keep=None, scale: float = 1.0) -> Tensor:
    """``(softmax(scale * q k^T + bias) * keep) @ v`` as one node.

    ``q`` is ``(..., Tq, d)``, ``k`` and ``v`` are ``(..., Tk, d)``.  ``bias``
    and ``keep`` are constants broadcastable to the score shape.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    s = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    if bias is not None:
        s = s + (bias.data if isinstance(bias, Tensor) else bias)
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    kp = None if keep is None else (keep.data if isinstance(keep, Tensor) else np.asarray(keep))
    a = p if kp is None else p * kp
    out = np.matmul(a, v.data)

    def bw(g):
        gv = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), v.shape) if v.requires_grad else None
        gq = gk = None
        if q.requires_grad or k.requires_grad:
            ga = np.matmul(g, np.swapaxes(v.data, -1, -2))
            if kp is not None:
                ga = ga * kp
            gs = p * (ga - (ga * p).sum(axis=-1, keepdims=True)) * scale
            if q.requires_grad:
                gq = _unbroadcast(np.matmul(gs, k.data), q.shape)
            if k.requires_grad:
                gk = _unbroadcast(np.matmul(np.swapaxes(gs, -1, -2), q.data), k.shape)
        return gq, gk, gv

    return _make("attention", out, (q, k, v), bw)


# ---------------------------------------------------------- structural ops

def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array of any shape."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids)
    if weight.ndim != 2:
        raise ShapeError(f"embedding-lookup: weight must be 2-d, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding-lookup: id out of range for table of {weight.shape[0]} rows")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make("embedding-lookup", weight.data[ids], (weight,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concatenate: incompatible shapes "
                         + " and ".join(str(t.shape) for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concatenate", out, ts, bw)


def index(a, key) -> Tensor:
    """Basic or advanced indexing (``a[key]``); covers slicing."""
    a = _as_tensor(a)
    out = a.data[key]
    advanced = isinstance(key, (list, np.ndarray)) or (
        isinstance(key, tuple) and any(isinstance(k, (list, np.ndarray)) for k in key))

    def bw(g):
        ga = np.zeros_like(a.data)
        if advanced:
            np.add.at(ga, key, g)
        else:
            ga[key] = g
        return (ga,)

    return _make("slice", np.array(out) if out.base is not None else out, (a,), bw)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


# -------------------------------------------------------------- reductions

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _make("sum", out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.size / max(out.size, 1)
    return _make("mean", out, (a,), lambda g: (_expand(g / n, a.shape, axis, keepdims),))


def l2_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(np.asarray((a.data * a.data).sum(axis=axis, keepdims=keepdims)))

    def bw(g):
        n = _expand(out, a.shape, axis, keepdims)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(n > 0, a.data / n, 0.0)
        return (_expand(g, a.shape, axis, keepdims) * ratio,)

    return _make("l2-norm", out, (a,), bw)


# ------------------------------------------------------------------- losses

def softmax_cross_entropy(logits, targets, ignore_index: int | None = None) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``.

    ``logits`` is ``(N, C)``; rows whose target equals ``ignore_index`` are
    excluded from both the sum and the count.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ShapeError(f"softmax-cross-entropy: logits {logits.shape} vs targets {targets.shape}")
    keep = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ValueError("softmax-cross-entropy: no targets to score")
    c = logits.shape[1]
    kept = targets[keep]
    if kept.min() < 0 or kept.max() >= c:
        raise IndexError(f"softmax-cross-entropy: target index out of range for {c} classes")
    safe = np.where(keep, targets, 0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(targets.shape[0])
    out = np.asarray(-(logp[rows, safe] * keep).sum() / n)

    def bw(g):
        p = np.exp(logp)
        p[rows, safe] -= 1.0
        return (p * (keep[:, None] * (float(g) / n)),)

    return _make("softmax-cross-entropy", out, (logits,), bw)


# ----------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("backward: loss is not finite")
    tape = current_tape()
    try:
        if loss.is_leaf:
            if loss.requires_grad:
                _accumulate(loss, np.ones_like(loss.data))
            return
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._op is None:
                    _accumulate(t, gi)
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
    finally:
        tape.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        g = np.broadcast_to(g, t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                            indices: Sequence[int] | None = None, floor: float = 1e-6) -> float:
    """Worst relative error between autodiff and central-difference gradients.

    ``f`` maps ``x`` to a scalar tensor and must be deterministic.  Only the
    flat positions in ``indices`` are probed when given.  The relative error
    of one entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not (0.0 < h <= 1e-2):
        raise ValueError(f"step h={h} outside (0, 1e-2]")
    prev_flag = x.requires_grad
    x.requires_grad = True
    x.grad = None
    current_tape().clear()
    try:
        backward(f(x))
        analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    finally:
        x.requires_grad = prev_flag
    flat = x.data.reshape(-1)
    probe = range(x.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in probe:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"non-finite function value probing element {i}")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
