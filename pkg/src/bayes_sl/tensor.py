"""Minimal float64 tensor with reverse-mode automatic differentiation.

Every operation records a closure that maps the output gradient to the
gradients of its parents.  Graphs are only recorded when at least one input
requires a gradient, so evaluating frozen parameters builds nothing and is
safe to call from several threads at once.

Image-like tensors use channel-first layout, either ``C x H x W`` or with a
leading batch axis ``N x C x H x W``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, UsageError

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: GradFn | None = None

    # -- bookkeeping -----------------------------------------------------
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
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> dict[int, np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: GradFn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class ComputationGraph:
    """Nodes reachable from an output, parents always before children."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputationGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every leaf of ``loss`` that requires a gradient.

    Leaf gradients are overwritten, not accumulated.  Returns the gradient of
    every visited node keyed by ``id``.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    graph = ComputationGraph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


# ---------------------------------------------------------------------------
# elementwise algebra


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)), "div")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _make(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is 1 inside the closed interval."""
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0  # subgradient at 0 is 0
    return _make(a.data * positive, (a,), lambda g: (g * positive,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.logaddexp(0.0, ad), (a,),
                 lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * ad)),), "softplus")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), grad_fn, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), grad_fn, "log_softmax")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inverse = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),), "transpose")


def take(a: Tensor, index) -> Tensor:
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int)) or i is Ellipsis for i in parts)

    def grad_fn(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), grad_fn, "take")


def pick(a: Tensor, labels) -> Tensor:
    """Select ``a[i, labels[i]]`` along the last axis of a 2-D tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    return take(a, (np.arange(a.shape[0]), labels))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")


# ---------------------------------------------------------------------------
# linear algebra and image layers


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def _batched(x: Tensor, op: str) -> bool:
    if x.ndim == 4:
        return True
    if x.ndim == 3:
        return False
    raise DimensionError(f"{op}: expected C x H x W or N x C x H x W input, got {x.shape}")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero same-padding and odd kernels."""
    batched = _batched(x, "conv2d")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"conv2d: kernels must be C_out x C_in x k x k, got {kernels.shape}")
    o, c_in, k, _ = kernels.shape
    if c_in != c:
        raise DimensionError(f"conv2d: input has {c} channels but kernels expect {c_in} "
                             f"(input {x.shape}, kernels {kernels.shape})")
    if k % 2 == 0:
        raise DimensionError(f"conv2d: kernel size must be odd, got {k}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    p = k // 2
    padded = np.pad(xd.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, n, h, w))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = padded[:, :, i:i + h, j:j + w]
    cols = cols.reshape(c * k * k, n * h * w)
    wmat = kernels.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, h, w).transpose(1, 0, 2, 3))
    if not batched:
        out = out[0]

    def grad_fn(g):
        g4 = g if batched else g[None]
        gm = g4.transpose(1, 0, 2, 3).reshape(o, -1)
        gk = (gm @ cols.T).reshape(kernels.shape) if kernels.requires_grad else None
        gb = gm.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(c, k, k, n, h, w)
            dpad = np.zeros((c, n, h + 2 * p, w + 2 * p))
            for i in range(k):
                for j in range(k):
                    dpad[:, :, i:i + h, j:j + w] += dcols[:, i, j]
            gx = dpad[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx if batched else gx[0])
        return gx, gk, gb

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(out, parents, grad_fn, "conv2d")


def max_pool2(x: Tensor) -> Tensor:
    batched = _batched(x, "max_pool2")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2: spatial extents must be even, got {h} x {w}")
    windows = xd.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4)
    winner = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, winner, axis=-1)[..., 0]
    if not batched:
        out = out[0]

    def grad_fn(g):
        g4 = g if batched else g[None]
        spread = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(spread, winner, g4[..., None], axis=-1)
        gx = spread.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx if batched else gx[0],)

    return _make(out, (x,), grad_fn, "max_pool2")


def upsample_nearest2(x: Tensor) -> Tensor:
    _batched(x, "upsample_nearest2")
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    *lead, h, w = x.shape

    def grad_fn(g):
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return _make(out, (x,), grad_fn, "upsample_nearest2")


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    """Add two feature maps; a narrower channel axis is zero-padded."""
    if a.ndim != b.ndim or a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise DimensionError(f"residual_add: incompatible shapes {a.shape} and {b.shape}")
    ca, cb = a.shape[-3], b.shape[-3]
    if ca == cb:
        return add(a, b)
    width = max(ca, cb)
    out = np.zeros(a.shape[:-3] + (width,) + a.shape[-2:])
    out[..., :ca, :, :] += a.data
    out[..., :cb, :, :] += b.data
    return _make(out, (a, b), lambda g: (g[..., :ca, :, :], g[..., :cb, :, :]), "residual_add")


_LAYER_KINDS = ("relu", "leaky_relu", "max_pool2", "upsample_nearest2", "residual_add")


def layer_forward(kind: str, *inputs: Tensor, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(*inputs)
    if kind == "leaky_relu":
        return leaky_relu(*inputs, slope=slope)
    if kind == "max_pool2":
        return max_pool2(*inputs)
    if kind == "upsample_nearest2":
        return upsample_nearest2(*inputs)
    if kind == "residual_add":
        return residual_add(*inputs)
    raise UsageError(f"unknown layer kind {kind!r}; expected one of {_LAYER_KINDS}")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-probability of integer ``labels`` under ``logits`` (N x C)."""
    return -mean(pick(log_softmax(logits, axis=-1), labels))
