"""Dense tensors with a reverse-mode gradient tape

Every op is a pair of a numpy forward and a backward rule. An op output is
recorded on the tape only when one of its inputs requires a gradient, so
frozen models and detached latents cost nothing on the backward pass.

Broadcasting is limited to ``bias_add``; every other binary op needs equal
shapes, scalar factors go through ``scale``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dkd_workbench.errors import GradientError, ShapeMismatchError

logger = logging.getLogger(__name__)

# log() clamps its input here instead of returning -inf
LOG_FLOOR = 1e-12

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardRule = Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


class OpKind(str, Enum):
    """
    The differentiable ops the tape knows about
    """

    add = "add"
    sub = "sub"
    mul = "mul"
    div = "div"
    scale = "scale"
    bias_add = "bias_add"
    matmul = "matmul"
    conv2d = "conv2d"
    max_pool2d = "max_pool2d"
    global_avg_pool = "global_avg_pool"
    relu = "relu"
    tanh = "tanh"
    exp = "exp"
    log = "log"
    softmax = "softmax"
    sum = "sum"
    mean = "mean"
    max = "max"
    inner = "inner"
    l2_norm = "l2_norm"
    reshape = "reshape"
    pick = "pick"
    clamp_min = "clamp_min"


@dataclass(eq=False)
class TapeNode:
    """How an op output was produced and how to push its gradient back"""

    op: OpKind
    inputs: tuple[Tensor, ...]
    backward_rule: BackwardRule


class Tensor:
    """A dense real array that can take part in gradient computation"""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[np.dtype | type] = None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> list[Tensor]:
        return backward(self)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Union[Tensor, float]) -> Tensor:
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Tensor) -> Tensor:
        return div(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    """Wrap arrays and numbers as constant tensors, pass tensors through"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------

OpImpl = Callable[..., tuple[np.ndarray, BackwardRule]]
_OPS: dict[OpKind, OpImpl] = {}


def _register(op: OpKind) -> Callable[[OpImpl], OpImpl]:
    def wrap(fn: OpImpl) -> OpImpl:
        _OPS[op] = fn
        return fn

    return wrap


def forward_op(op: OpKind | str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate an op and record it on the tape if any input needs a gradient

    Args:
        op (OpKind | str): Which op to run
        inputs (Sequence[Tensor]): The op operands
        **attrs: Non-differentiable op settings (padding, axis, factor, ...)

    Returns:
        Tensor: The op output

    Raises:
        ShapeMismatchError: If the operand shapes do not fit the op
    """
    kind = OpKind(op)
    tensors = tuple(as_tensor(t) for t in inputs)
    out_data, rule = _OPS[kind](*(t.data for t in tensors), **attrs)
    needs_grad = any(t.requires_grad for t in tensors)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        out.node = TapeNode(op=kind, inputs=tensors, backward_rule=rule)
    return out


def _same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(op, f"operand shapes {a.shape} and {b.shape} differ")


@_register(OpKind.add)
def _add(a, b):
    _same_shape("add", a, b)
    return a + b, lambda g: (g, g)


@_register(OpKind.sub)
def _sub(a, b):
    _same_shape("sub", a, b)
    return a - b, lambda g: (g, -g)


@_register(OpKind.mul)
def _mul(a, b):
    _same_shape("mul", a, b)
    return a * b, lambda g: (g * b, g * a)


@_register(OpKind.div)
def _div(a, b):
    _same_shape("div", a, b)
    return a / b, lambda g: (g / b, -g * a / (b * b))


@_register(OpKind.scale)
def _scale(a, factor: float):
    return a * factor, lambda g: (g * factor,)


@_register(OpKind.bias_add)
def _bias_add(x, b):
    if x.ndim < 2 or b.shape != (x.shape[1],):
        raise ShapeMismatchError(
            "bias_add", f"bias of shape {b.shape} does not fit channels of {x.shape}"
        )
    view = b.reshape((1, -1) + (1,) * (x.ndim - 2))
    reduce_axes = (0,) + tuple(range(2, x.ndim))
    return x + view, lambda g: (g, g.sum(axis=reduce_axes))


@_register(OpKind.matmul)
def _matmul(x, w):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatchError(
            "matmul", f"cannot multiply {x.shape} by {w.shape}"
        )
    return x @ w, lambda g: (g @ w.T, x.T @ g)


@_register(OpKind.conv2d)
def _conv2d(x, w, padding: int = 0):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatchError(
            "conv2d", f"needs NCHW input and FCHW kernel, got {x.shape} and {w.shape}"
        )
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(
            "conv2d", f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}"
        )
    kh, kw = w.shape[2], w.shape[3]
    height, width = x.shape[2], x.shape[3]
    if height + 2 * padding < kh or width + 2 * padding < kw:
        raise ShapeMismatchError(
            "conv2d", f"kernel {kh}x{kw} larger than padded input {height}x{width}"
        )
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x, pad)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def rule(g):
        dw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        flipped = w[:, :, ::-1, ::-1]
        dxp = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3]))
        dxp = dxp.transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding : padding + height, padding : padding + width]
        return np.ascontiguousarray(dx), dw

    return out, rule


@_register(OpKind.max_pool2d)
def _max_pool2d(x, size: int = 2):
    if x.ndim != 4 or x.shape[2] % size or x.shape[3] % size:
        raise ShapeMismatchError(
            "max_pool2d", f"input {x.shape} is not NCHW with sides divisible by {size}"
        )
    n, c, h, w = x.shape
    blocks = (
        x.reshape(n, c, h // size, size, w // size, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // size, w // size, size * size)
    )
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def rule(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gx = (
            gb.reshape(n, c, h // size, w // size, size, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (gx,)

    return out, rule


@_register(OpKind.global_avg_pool)
def _global_avg_pool(x):
    if x.ndim != 4:
        raise ShapeMismatchError("global_avg_pool", f"needs NCHW input, got {x.shape}")
    area = x.shape[2] * x.shape[3]

    def rule(g):
        return (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),)

    return x.mean(axis=(2, 3)), rule


@_register(OpKind.relu)
def _relu(x):
    mask = x > 0
    return np.where(mask, x, 0.0).astype(x.dtype), lambda g: (g * mask,)


@_register(OpKind.tanh)
def _tanh(x):
    y = np.tanh(x)
    return y, lambda g: (g * (1.0 - y * y),)


@_register(OpKind.exp)
def _exp(x):
    y = np.exp(x)
    return y, lambda g: (g * y,)


@_register(OpKind.log)
def _log(x):
    live = x > LOG_FLOOR
    safe = np.where(live, x, LOG_FLOOR)
    return np.log(safe), lambda g: (np.where(live, g / safe, 0.0),)


@_register(OpKind.softmax)
def _softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return y, rule


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis: Optional[int]) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


@_register(OpKind.sum)
def _sum(x, axis: Optional[int] = None):
    return np.asarray(x.sum(axis=axis)), lambda g: (_expand_reduced(g, x.shape, axis),)


@_register(OpKind.mean)
def _mean(x, axis: Optional[int] = None):
    count = x.size if axis is None else x.shape[axis]
    return (
        np.asarray(x.mean(axis=axis)),
        lambda g: (_expand_reduced(g / count, x.shape, axis),),
    )


@_register(OpKind.max)
def _max(x, axis: int = -1):
    idx = np.expand_dims(x.argmax(axis=axis), axis)
    out = np.take_along_axis(x, idx, axis=axis).squeeze(axis)

    def rule(g):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return out, rule


@_register(OpKind.inner)
def _inner(a, b):
    if a.ndim != 2:
        raise ShapeMismatchError("inner", f"needs row vectors, got {a.shape}")
    _same_shape("inner", a, b)
    return (a * b).sum(axis=1), lambda g: (g[:, None] * b, g[:, None] * a)


@_register(OpKind.l2_norm)
def _l2_norm(x):
    if x.ndim != 2:
        raise ShapeMismatchError("l2_norm", f"needs row vectors, got {x.shape}")
    norm = np.sqrt((x * x).sum(axis=1))
    live = norm > 0
    safe = np.where(live, norm, 1.0)

    def rule(g):
        return (np.where(live[:, None], g[:, None] * x / safe[:, None], 0.0),)

    return norm, rule


@_register(OpKind.reshape)
def _reshape(x, shape: tuple[int, ...]):
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", f"cannot view {x.shape} as {shape}")
    return out, lambda g: (g.reshape(x.shape),)


@_register(OpKind.pick)
def _pick(x, index: np.ndarray):
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeMismatchError(
            "pick", f"index of shape {index.shape} does not fit rows of {x.shape}"
        )
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise ShapeMismatchError(
            "pick", f"index outside [0, {x.shape[1]}): {index.min()}..{index.max()}"
        )
    rows = np.arange(x.shape[0])

    def rule(g):
        gx = np.zeros_like(x)
        gx[rows, index] = g
        return (gx,)

    return x[rows, index], rule


@_register(OpKind.clamp_min)
def _clamp_min(x, floor: float = 0.0):
    live = x > floor
    return np.maximum(x, floor), lambda g: (g * live,)


# ---------------------------------------------------------------------------
# functional front end
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    return forward_op(OpKind.add, (a, b))


def sub(a, b) -> Tensor:
    return forward_op(OpKind.sub, (a, b))


def mul(a, b) -> Tensor:
    return forward_op(OpKind.mul, (a, b))


def div(a, b) -> Tensor:
    return forward_op(OpKind.div, (a, b))


def scale(a, factor: float) -> Tensor:
    return forward_op(OpKind.scale, (a,), factor=factor)


def bias_add(x, b) -> Tensor:
    return forward_op(OpKind.bias_add, (x, b))


def matmul(x, w) -> Tensor:
    return forward_op(OpKind.matmul, (x, w))


def conv2d(x, w, padding: int = 0) -> Tensor:
    return forward_op(OpKind.conv2d, (x, w), padding=padding)


def max_pool2d(x, size: int = 2) -> Tensor:
    return forward_op(OpKind.max_pool2d, (x,), size=size)


def global_avg_pool(x) -> Tensor:
    return forward_op(OpKind.global_avg_pool, (x,))


def relu(x) -> Tensor:
    return forward_op(OpKind.relu, (x,))


def tanh(x) -> Tensor:
    return forward_op(OpKind.tanh, (x,))


def exp(x) -> Tensor:
    return forward_op(OpKind.exp, (x,))


def log(x) -> Tensor:
    return forward_op(OpKind.log, (x,))


def softmax(x) -> Tensor:
    return forward_op(OpKind.softmax, (x,))


def reduce_sum(x, axis: Optional[int] = None) -> Tensor:
    return forward_op(OpKind.sum, (x,), axis=axis)


def reduce_mean(x, axis: Optional[int] = None) -> Tensor:
    return forward_op(OpKind.mean, (x,), axis=axis)


def reduce_max(x, axis: int = -1) -> Tensor:
    return forward_op(OpKind.max, (x,), axis=axis)


def inner(a, b) -> Tensor:
    return forward_op(OpKind.inner, (a, b))


def l2_norm(x) -> Tensor:
    return forward_op(OpKind.l2_norm, (x,))


def reshape(x, shape: Sequence[int]) -> Tensor:
    return forward_op(OpKind.reshape, (x,), shape=tuple(shape))


def flatten(x) -> Tensor:
    """Keep the batch axis, flatten everything else"""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def pick(x, index) -> Tensor:
    return forward_op(OpKind.pick, (x,), index=np.asarray(index))


def clamp_min(x, floor: float) -> Tensor:
    return forward_op(OpKind.clamp_min, (x,), floor=floor)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from root, every tensor after all of its consumers"""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    order.reverse()
    return order


def _propagate(loss: Tensor) -> dict[int, np.ndarray]:
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in _topological_order(loss):
        g = grads.get(id(tensor))
        if g is None or tensor.node is None:
            continue
        parent_grads = tensor.node.backward_rule(g)
        for parent, pg in zip(tensor.node.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return grads


def backward(loss: Tensor) -> list[Tensor]:
    """Populate ``grad`` of every leaf the loss depends on

    Args:
        loss (Tensor): A scalar tensor

    Returns:
        list[Tensor]: The leaves whose gradient was populated

    Raises:
        GradientError: If the loss is not scalar, the tape was already used, or
            a leaf still holds a gradient from an earlier pass
    """
    if loss._consumed:
        raise GradientError("backward was already called on this loss")
    grads = _propagate(loss)
    leaves = [t for t in _topological_order(loss) if t.is_leaf and t.requires_grad]
    for leaf in leaves:
        if leaf.grad is not None:
            raise GradientError(
                f"leaf {leaf!r} already holds a gradient, reset it before another backward"
            )
    for leaf in leaves:
        leaf.grad = np.asarray(grads.get(id(leaf), np.zeros_like(leaf.data)))
    loss._consumed = True
    return leaves


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar loss with respect to some tensors

    Unlike ``backward`` this leaves ``grad`` fields untouched and may be
    called repeatedly on the same tape. Tensors the loss does not depend on
    get a zero gradient.
    """
    grads = _propagate(loss)
    return [np.asarray(grads.get(id(t), np.zeros_like(t.data))) for t in wrt]
