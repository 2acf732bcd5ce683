"""Dense float64 tensors with reverse-mode autodiff.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
output records its parents and a backward rule mapping the upstream gradient to
one gradient per parent. :meth:`Tensor.backward` walks the recorded graph in
reverse topological order and accumulates into the ``grad`` of leaf tensors;
leaf gradients keep accumulating until :func:`zero_grad` is called, which is
what lets the three branch losses share a single backward pass.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from contextlib import contextmanager

import numpy as np

BCE_EPS = 1e-7

# Ops whose backward rule is deliberately perturbed (fault-injection hook for
# the gradient checker). Maps op name -> multiplicative factor.
_CORRUPTED: dict[str, float] = {}

# When set, non-smooth ops append the branch they took (ReLU masks, max-pool argmaxes).
_KINKS: list[np.ndarray] | None = None


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class UsageError(RuntimeError):
    """An API was called out of order or on an unsuitable tensor."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, op={self.op}, requires_grad={self.requires_grad})"

    def __getitem__(self, index) -> Tensor:
        return take(self, index)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A named leaf tensor owned by a model, with its SGD momentum buffer."""

    __slots__ = ("name", "group", "momentum_buffer")

    def __init__(self, name: str, data, group: str | None = None):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.group = group or name
        self.momentum_buffer = np.zeros(self.data.size, dtype=np.float64)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={list(self.shape)})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise UsageError("backward() called on a tensor that does not require grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        factor = _CORRUPTED.get(node.op)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if factor is not None:
                pg = pg * factor
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@contextmanager
def track_kinks():
    """Record which piece of each ReLU and max-pool was active inside the block.

    Two evaluations with equal records lie on the same smooth piece of the graph.
    """
    global _KINKS
    prev, _KINKS = _KINKS, []
    try:
        yield _KINKS
    finally:
        _KINKS = prev


@contextmanager
def corrupt_backward(op: str, factor: float = 1.01):
    """Temporarily scale the backward rule of ``op`` (test hook)."""
    _CORRUPTED[op] = factor
    try:
        yield
    finally:
        _CORRUPTED.pop(op, None)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")

    def _bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), "matmul", _bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {list(a.shape)}")
    return _make(a.data.T.copy(), (a,), "transpose", lambda g: (g.T,))


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-location affine map ``out[h, w, :] = x[h, w, :] @ weight + bias``."""
    if x.data.ndim != 3:
        raise DimensionError(f"conv1x1 expects an [H,W,D] map, got {list(x.shape)}")
    din, dout = weight.shape
    if x.shape[2] != din or bias.shape != (dout,):
        raise DimensionError(
            f"conv1x1: input {list(x.shape)}, weight {list(weight.shape)}, bias {list(bias.shape)}"
        )
    flat = x.data.reshape(-1, din)

    def _bw(g):
        g2 = g.reshape(-1, dout)
        return (
            (g2 @ weight.data.T).reshape(x.shape),
            flat.T @ g2,
            g2.sum(axis=0),
        )

    out = (flat @ weight.data + bias.data).reshape(x.shape[0], x.shape[1], dout)
    return _make(out, (x, weight, bias), "conv1x1", _bw)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 1 or weight.data.ndim != 2 or x.shape[0] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"fully_connected: input {list(x.shape)}, weight {list(weight.shape)}, bias {list(bias.shape)}"
        )

    def _bw(g):
        return weight.data @ g, np.outer(x.data, g), g

    return _make(x.data @ weight.data + bias.data, (x, weight, bias), "fully_connected", _bw)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, new_shape: Sequence[int]) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if math.prod(new_shape) != x.size:
        raise DimensionError(f"reshape: cannot view {list(x.shape)} as {list(new_shape)}")
    old = x.shape
    return _make(x.data.reshape(new_shape), (x,), "reshape", lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("concat: empty input")
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(
                f"concat on axis {axis}: incompatible shapes {[list(t.shape) for t in tensors]}"
            )
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), "concat", _bw)


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = x.data[index].copy()

    def _bw(g):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return _make(out, (x,), "take", _bw)


# ---------------------------------------------------------------------------
# pointwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {list(a.shape)} and {list(b.shape)} differ")
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {list(a.shape)} and {list(b.shape)} differ")
    return _make(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), "scale", lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _KINKS is not None:
        _KINKS.append(mask)
    return _make(np.maximum(x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _make(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def pointwise(x: Tensor, kind: str, other: Tensor | None = None) -> Tensor:
    if kind == "add":
        if other is None:
            raise UsageError("pointwise add needs a second operand")
        return add(x, other)
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise UsageError(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and pooling


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), "sum", lambda g: (np.full(shape, float(g)),))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 3:
        raise DimensionError(f"global_avg_pool expects [H,W,D], got {list(x.shape)}")
    h, w, _ = x.shape
    n = h * w
    return _make(
        x.data.mean(axis=(0, 1)),
        (x,),
        "global_avg_pool",
        lambda g: (np.broadcast_to(g / n, x.shape).copy(),),
    )


def avg_pool2x2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; a trailing odd row/column is dropped."""
    if x.data.ndim != 3 or x.shape[0] < 2 or x.shape[1] < 2:
        raise DimensionError(f"avg_pool2x2 expects [H>=2,W>=2,D], got {list(x.shape)}")
    h, w, d = x.shape
    ho, wo = h // 2, w // 2
    blocks = x.data[: 2 * ho, : 2 * wo].reshape(ho, 2, wo, 2, d)

    def _bw(g):
        full = np.zeros_like(x.data)
        full[: 2 * ho, : 2 * wo] = np.repeat(np.repeat(g * 0.25, 2, axis=0), 2, axis=1)
        return (full,)

    return _make(blocks.mean(axis=(1, 3)), (x,), "avg_pool2x2", _bw)


def max_pool_bins(x: Tensor, bins: Sequence[tuple[int, int, int, int]], out_hw: tuple[int, int]) -> Tensor:
    """Max over rectangular cell ranges of an [H,W,D] map.

    ``bins`` lists ``(y0, y1, x0, x1)`` half-open ranges in row-major output
    order. Ties resolve to the first maximum in scan order.
    """
    hr, wr = out_hw
    if len(bins) != hr * wr:
        raise DimensionError(f"max_pool_bins: {len(bins)} bins for output {hr}x{wr}")
    d = x.shape[2]
    out = np.empty((hr * wr, d))
    arg_y = np.empty((hr * wr, d), dtype=np.int64)
    arg_x = np.empty((hr * wr, d), dtype=np.int64)
    for i, (y0, y1, x0, x1) in enumerate(bins):
        if y1 <= y0 or x1 <= x0:
            raise DimensionError(f"max_pool_bins: empty bin {(y0, y1, x0, x1)}")
        cell = x.data[y0:y1, x0:x1].reshape(-1, d)
        k = cell.argmax(axis=0)
        out[i] = cell[k, np.arange(d)]
        if _KINKS is not None:
            _KINKS.append(k)
        arg_y[i] = y0 + k // (x1 - x0)
        arg_x[i] = x0 + k % (x1 - x0)

    def _bw(g):
        full = np.zeros_like(x.data)
        chans = np.broadcast_to(np.arange(d), arg_y.shape)
        np.add.at(full, (arg_y, arg_x, chans), g.reshape(hr * wr, d))
        return (full,)

    return _make(out.reshape(hr, wr, d), (x,), "max_pool_bins", _bw)


# ---------------------------------------------------------------------------
# loss


def bce_loss(pred: Tensor, target) -> Tensor:
    """Summed binary cross-entropy; predictions are clamped to [eps, 1-eps]."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise DimensionError(f"bce_loss: pred {list(pred.shape)} vs target {list(t.shape)}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("bce_loss: targets must be 0 or 1")
    p = pred.data
    inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    loss = -np.sum(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))

    def _bw(g):
        return (float(g) * inside * ((1.0 - t) / (1.0 - pc) - t / pc),)

    return _make(np.array(loss), (pred,), "bce_loss", _bw)


# ---------------------------------------------------------------------------
# parameters and optimisation


def init_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))
