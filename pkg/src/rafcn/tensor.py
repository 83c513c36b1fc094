"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` that works on raw numpy arrays and caches whatever the matching
``backward`` needs. ``Function.apply`` wires the result into the graph.
Layouts are channel-first (``C x H x W``) and row-major throughout.
"""

from __future__ import annotations

import threading
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError

DTYPE = np.float64
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


class no_grad:
    """Context manager that stops ops from recording the graph (inference).

    The switch is per thread.
    """

    def __enter__(self):
        self.prev = _grad_enabled()
        _state.grad = False

    def __exit__(self, *exc):
        _state.grad = self.prev


class Tensor:
    """A numpy array plus an optional gradient and the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_ctx", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.size == 0:
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._ctx: Function | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # no copy: op outputs are fresh arrays
        t = cls.__new__(cls)
        t.data, t.grad, t.requires_grad, t._ctx, t.name = arr, None, False, None, None
        return t

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """Base class for a differentiable op.

    Subclasses set ``name``, implement ``forward(*arrays, **kwargs)`` returning
    an array, and ``backward(grad)`` returning one gradient (or ``None``) per
    tensor input, in order.
    """

    name = "function"

    def __init__(self):
        self.inputs: tuple[Tensor, ...] = ()

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls()
        fn.inputs = inputs
        out_data = fn.forward(*(t.data for t in inputs), **kwargs)
        if not np.isfinite(out_data).all():
            raise NumericalError(fn.name)
        out = Tensor._wrap(np.asarray(out_data, dtype=DTYPE))
        if _grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._ctx = fn
        return out

    def forward(self, *arrays, **kwargs) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:  # pragma: no cover
        raise NotImplementedError


class Graph:
    """Executed ops reachable from an output, in topological order."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; deep nets would blow the recursion limit
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self.nodes.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._ctx is not None:
                for parent in t._ctx.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))

    def ops(self) -> list[str]:
        return [t._ctx.name for t in self.nodes if t._ctx is not None]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``.

    Gradients accumulate, so shared parameters collect contributions from every
    use; callers zero them between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    graph = Graph(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.nodes):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        # intermediates keep their grad too, handy for inspection
        t.grad = g if t.grad is None else t.grad + g
        fn = t._ctx
        if fn is None:
            continue
        grads = fn.backward(g)
        for parent, pg in zip(fn.inputs, grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"backward of '{fn.name}' returned grad shape {pg.shape} "
                    f"for input of shape {parent.shape}")
            if not np.isfinite(pg).all():
                raise NumericalError(fn.name, f"non-finite gradient in backward of '{fn.name}'")
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, grad):
        sa, sb = self.shapes
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Scale(Function):
    name = "scale"

    def forward(self, x, factor):
        self.factor = float(factor)
        return x * self.factor

    def backward(self, grad):
        return (grad * self.factor,)


class SumAll(Function):
    name = "sum"

    def forward(self, x):
        self.shape = x.shape
        return np.array(x.sum())

    def backward(self, grad):
        return (np.full(self.shape, float(grad)),)


class Relu(Function):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        # subgradient 0 at exactly x == 0
        return (grad * self.mask,)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=factor)


def sum_all(x: Tensor) -> Tensor:
    return SumAll.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


# ---------------------------------------------------------------------------
# linear algebra and convolution


class Matmul(Function):
    name = "matmul"

    def forward(self, a, b):
        # matrices, or stacks of matrices with a shared leading batch axis
        if (a.ndim not in (2, 3) or b.ndim not in (2, 3) or a.shape[-1] != b.shape[-2]
                or (a.ndim == b.ndim == 3 and a.shape[0] != b.shape[0])):
            raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        da = grad @ np.swapaxes(self.b, -1, -2)
        db = np.swapaxes(self.a, -1, -2) @ grad
        if da.ndim > self.a.ndim:
            da = da.sum(axis=0)
        if db.ndim > self.b.ndim:
            db = db.sum(axis=0)
        return da, db


def _channels_first(x: np.ndarray) -> np.ndarray:
    """``C x H x W`` or ``N x C x H x W`` as ``C x N x H x W``."""
    return x[:, None] if x.ndim == 3 else x.transpose(1, 0, 2, 3)


def _batch_first(y: np.ndarray, batched: bool) -> np.ndarray:
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3)) if batched else y[:, 0]


class Conv1x1(Function):
    name = "conv1x1"

    def forward(self, x, w, b):
        if x.ndim not in (3, 4) or w.ndim != 2 or w.shape[1] != x.shape[-3]:
            raise DimensionError(f"conv1x1: weight {w.shape} does not fit input {x.shape}")
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv1x1: bias {b.shape} does not fit weight {w.shape}")
        xc = _channels_first(x)
        self.batched, self.inner = x.ndim == 4, xc.shape[1:]
        self.xflat = xc.reshape(xc.shape[0], -1)
        self.w = w
        y = w @ self.xflat + b[:, None]
        return _batch_first(y.reshape(w.shape[0], *self.inner), self.batched)

    def backward(self, grad):
        g = _channels_first(grad).reshape(grad.shape[-3], -1)
        dx = _batch_first((self.w.T @ g).reshape(self.w.shape[1], *self.inner), self.batched)
        return dx, g @ self.xflat.T, g.sum(axis=1)


class Conv3x3(Function):
    name = "conv3x3"

    def forward(self, x, w, b, stride=1):
        if stride not in (1, 2):
            raise ConfigError(f"conv3x3: unsupported stride {stride}; use 1 or 2")
        if x.ndim not in (3, 4) or w.ndim != 4 or w.shape[1:] != (x.shape[-3], 3, 3):
            raise DimensionError(f"conv3x3: weight {w.shape} does not fit input {x.shape}")
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv3x3: bias {b.shape} does not fit weight {w.shape}")
        # im2col over the whole batch, so one matrix product covers every tile
        xp = np.pad(_channels_first(x), ((0, 0), (0, 0), (1, 1), (1, 1)))
        c, n, h, wd = xp.shape[0], xp.shape[1], xp.shape[2] - 2, xp.shape[3] - 2
        ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
        cols = np.empty((c, 3, 3, n, ho, wo))
        for dy in range(3):
            for dx in range(3):
                cols[:, dy, dx] = xp[:, :, dy:dy + stride * (ho - 1) + 1:stride,
                                     dx:dx + stride * (wo - 1) + 1:stride]
        self.cols = cols.reshape(c * 9, n * ho * wo)
        self.w2 = w.reshape(w.shape[0], c * 9)
        self.stride, self.batched = stride, x.ndim == 4
        self.padded_shape = xp.shape
        y = (self.w2 @ self.cols + b[:, None]).reshape(w.shape[0], n, ho, wo)
        return _batch_first(y, self.batched)

    def backward(self, grad):
        gc = _channels_first(grad)
        co, n, ho, wo = gc.shape
        s = self.stride
        g = gc.reshape(co, n * ho * wo)
        dw = (g @ self.cols.T).reshape(self.inputs[1].shape)
        dcols = (self.w2.T @ g).reshape(self.padded_shape[0], 3, 3, n, ho, wo)
        dxp = np.zeros(self.padded_shape)
        for dy in range(3):
            for dx in range(3):
                dxp[:, :, dy:dy + s * (ho - 1) + 1:s, dx:dx + s * (wo - 1) + 1:s] += dcols[:, dy, dx]
        return _batch_first(dxp[:, :, 1:-1, 1:-1], self.batched), dw, g.sum(axis=1)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return Matmul.apply(a, b)


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pointwise convolution: ``y[o,h,w] = b[o] + sum_c w[o,c] x[c,h,w]``."""
    return Conv1x1.apply(x, w, b)


def conv3x3(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1; stride 2 gives ``ceil(H/2)``."""
    return Conv3x3.apply(x, w, b, stride=stride)


# ---------------------------------------------------------------------------
# reductions and normalisation


class SoftmaxRows(Function):
    name = "softmax_rows"

    def forward(self, x):
        if x.ndim not in (2, 3):
            raise DimensionError(f"softmax_rows expects a matrix or a stack of them, got shape {x.shape}")
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        self.y = e / e.sum(axis=-1, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


class GlobalAvgPool(Function):
    name = "global_avg_pool"

    def forward(self, x):
        if x.ndim not in (3, 4):
            raise DimensionError(f"global_avg_pool expects [N x] C x H x W, got shape {x.shape}")
        self.shape = x.shape
        return x.mean(axis=(-2, -1))

    def backward(self, grad):
        h, w = self.shape[-2:]
        return (np.broadcast_to(grad[..., None, None] / (h * w), self.shape).copy(),)


def softmax_rows(x: Tensor) -> Tensor:
    return SoftmaxRows.apply(x)


def global_avg_pool(x: Tensor) -> Tensor:
    return GlobalAvgPool.apply(x)


# ---------------------------------------------------------------------------
# data movement


class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape=()):
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape, dtype=np.int64)) != x.size or any(s <= 0 for s in shape):
            raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose2d(Function):
    name = "transpose2d"

    def forward(self, x):
        # a stack of matrices transposes each one
        if x.ndim not in (2, 3):
            raise DimensionError(f"transpose2d expects a matrix or a stack of them, got shape {x.shape}")
        return np.ascontiguousarray(np.swapaxes(x, -1, -2))

    def backward(self, grad):
        return (np.ascontiguousarray(np.swapaxes(grad, -1, -2)),)


class ConcatChannels(Function):
    name = "concat_channels"

    def forward(self, *xs):
        ndims = {x.ndim for x in xs}
        if (len(ndims) != 1 or ndims.pop() not in (3, 4)
                or len({x.shape[:-3] + x.shape[-2:] for x in xs}) != 1):
            raise DimensionError(
                "concat_channels: inputs must share batch and H x W, got " + ", ".join(str(x.shape) for x in xs))
        self.splits = np.cumsum([x.shape[-3] for x in xs])[:-1]
        return np.concatenate(xs, axis=-3)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=-3))


class UpsampleNearest(Function):
    name = "upsample_nearest"

    def forward(self, x, factor=2):
        if x.ndim not in (3, 4):
            raise DimensionError(f"upsample_nearest expects [N x] C x H x W, got shape {x.shape}")
        if int(factor) != factor or factor < 1:
            raise DimensionError(f"upsample_nearest: factor must be a positive integer, got {factor}")
        self.factor = f = int(factor)
        return np.repeat(np.repeat(x, f, axis=-2), f, axis=-1)

    def backward(self, grad):
        h, w = grad.shape[-2:]
        f = self.factor
        return (grad.reshape(*grad.shape[:-2], h // f, f, w // f, f).sum(axis=(-3, -1)),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose2d(x: Tensor) -> Tensor:
    return Transpose2d.apply(x)


def concat_channels(*xs: Tensor) -> Tensor:
    return ConcatChannels.apply(*xs)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    return UpsampleNearest.apply(x, factor=factor)


# ---------------------------------------------------------------------------
# objective


class SoftmaxCrossEntropy(Function):
    """Pixelwise cross-entropy over the non-ignored pixels of ``K x H x W`` logits.

    For an ``N x K x H x W`` stack the result is the mean over tiles of each
    tile's own mean, i.e. the same value as averaging N separate calls.
    """

    name = "softmax_cross_entropy"

    def forward(self, logits, labels=None, ignore_label=255):
        if (logits.ndim not in (3, 4) or labels is None
                or labels.shape != logits.shape[:-3] + logits.shape[-2:]):
            raise DimensionError(
                f"cross-entropy: labels {getattr(labels, 'shape', None)} do not match logits {logits.shape}")
        self.batched = logits.ndim == 4
        if not self.batched:
            logits, labels = logits[None], labels[None]
        k = logits.shape[1]
        valid = labels != ignore_label
        n = valid.sum(axis=(1, 2))
        if not n.all():
            raise ValueError("degenerate batch: every pixel of a tile carries the ignore label")
        if np.any((labels[valid] < 0) | (labels[valid] >= k)):
            raise ValueError(f"labels must lie in [0, {k}) or equal {ignore_label}")
        shifted = logits - logits.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1))
        safe = np.where(valid, labels, 0)
        picked = np.take_along_axis(shifted, safe[:, None], axis=1)[:, 0]
        self.prob = np.exp(shifted - logsum[:, None])
        self.safe = safe
        self.weight = valid / (n[:, None, None] * len(n))
        return np.array(((logsum - picked) * self.weight).sum())

    def backward(self, grad):
        g = self.prob.copy()
        idx = self.safe[:, None]
        np.put_along_axis(g, idx, np.take_along_axis(g, idx, axis=1) - 1.0, axis=1)
        g *= self.weight[:, None] * float(grad)
        return (g if self.batched else g[0],)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_label: int = 255) -> Tensor:
    return SoftmaxCrossEntropy.apply(logits, labels=np.asarray(labels), ignore_label=ignore_label)
