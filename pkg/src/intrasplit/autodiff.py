"""
Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable op builds an output :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` walks the recorded graph in reverse topological order
and accumulates into the ``grad`` of every leaf that requires it.

Images use NHWC layout throughout. Convolution kernels are stored as
``[kh, kw, c_in, c_out]`` for :func:`conv2d` and ``[kh, kw, c_out, c_in]`` for
:func:`conv_transpose2d` (the kernel of the convolution it is the adjoint of).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "conv2d",
    "conv_transpose2d",
    "max_pool2d",
    "relu",
    "sigmoid",
    "log",
    "square",
    "clip",
    "mean",
    "sum",
    "reshape",
    "concat",
    "take",
    "conv_output_size",
    "conv_transpose_output_size",
]


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf.

        Gradients add onto whatever is already stored; callers reset with
        :meth:`zero_grad` between iterations.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite value in output")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.maximum(a.data, 0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.exp(-np.logaddexp(0, -x)).astype(x.dtype)
    info = np.finfo(x.dtype)
    # keep strictly inside (0, 1) even where the float type saturates
    out = np.clip(out, info.tiny, 1 - info.epsneg)

    def backward(g):
        return (g * out * (1 - out),)

    return _make("sigmoid", out, (a,), backward)


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise NumericError("log: non-positive input")
    return _make("log", np.log(x), (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make("square", x * x, (a,), lambda g: (2 * g * x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is zero where the clamp is active."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions / shape


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    count = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make("mean", np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tensors, backward)


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate on backward."""
    idx = np.asarray(index, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (slice(None),) * (axis % a.data.ndim) + (idx,), g)
        return (out,)

    return _make("take", np.take(a.data, idx, axis=axis), (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    x, w = a.data, b.data
    return _make("matmul", x @ w, (a, b), lambda g: (g @ w.T, x.T @ g))


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, pad: int, output_pad: int = 0) -> int:
    return (size - 1) * stride - 2 * pad + kernel + output_pad


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View of shape [n, ho, wo, kh, kw, c] over a padded NHWC array."""
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    return as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )


def _scatter_windows(cols: np.ndarray, padded_shape, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum window entries back onto the padded grid."""
    n, ho, wo, kh, kw, c = cols.shape
    out = np.zeros(padded_shape, dtype=cols.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + hspan : stride, j : j + wspan : stride, :] += cols[:, :, :, i, j, :]
    return out


def _check_image(op: str, x: Tensor, w: Tensor, channel_axis: int) -> None:
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[channel_axis]:
        raise ShapeError(f"{op}: incompatible shapes {x.shape} and {w.shape}")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding. x: [n,h,w,cin], w: [kh,kw,cin,cout]."""
    _check_image("conv2d", x, w, 2)
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit input {x.shape} with pad={pad}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = _windows(xp, kh, kw, stride, ho, wo).reshape(n * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            gx = _scatter_windows(gcols, xp.shape, stride)
            if pad:
                gx = gx[:, pad : pad + h, pad : pad + wd, :]
        return gx, gw

    return _make("conv2d", out, (x, w), backward)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0, output_pad: int = 0) -> Tensor:
    """Transposed convolution. x: [n,h,w,cin], w: [kh,kw,cout,cin].

    Output spatial size is ``(in - 1) * stride - 2 * pad + kernel + output_pad``.
    """
    _check_image("conv_transpose2d", x, w, 3)
    if stride < 1 or pad < 0 or not 0 <= output_pad < stride:
        raise ShapeError(f"conv_transpose2d: invalid stride={stride} pad={pad} output_pad={output_pad}")
    n, h, wd, cin = x.shape
    kh, kw, cout, _ = w.shape
    ho = conv_transpose_output_size(h, kh, stride, pad, output_pad)
    wo = conv_transpose_output_size(wd, kw, stride, pad, output_pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: output would be empty for {x.shape} and {w.shape}")
    wmat = w.data.reshape(kh * kw * cout, cin)
    x2 = x.data.reshape(-1, cin)
    cols = (x2 @ wmat.T).reshape(n, h, wd, kh, kw, cout)
    padded = (n, ho + 2 * pad, wo + 2 * pad, cout)
    out = _scatter_windows(cols, padded, stride)[:, pad : pad + ho, pad : pad + wo, :]

    def backward(g):
        gp = np.zeros(padded, dtype=g.dtype)
        gp[:, pad : pad + ho, pad : pad + wo, :] = g
        gcols = _windows(gp, kh, kw, stride, h, wd).reshape(n * h * wd, kh * kw * cout)
        gx = (gcols @ wmat).reshape(x.shape) if x.requires_grad else None
        gw = (gcols.T @ x2).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    return _make("conv_transpose2d", np.ascontiguousarray(out), (x, w), backward)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: expected NHWC input, got {x.shape}")
    n, h, wd, c = x.shape
    ho = conv_output_size(h, kernel, stride, 0)
    wo = conv_output_size(wd, kernel, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d: window {kernel} larger than input {x.shape}")
    win = _windows(x.data, kernel, kernel, stride, ho, wo).reshape(n, ho, wo, kernel * kernel, c)
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward(g):
        onehot = np.zeros((n, ho, wo, kernel * kernel, c), dtype=g.dtype)
        np.put_along_axis(onehot, arg[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        gx = _scatter_windows(onehot.reshape(n, ho, wo, kernel, kernel, c), x.shape, stride)
        return (gx,)

    return _make("max_pool2d", np.ascontiguousarray(out), (x,), backward)
