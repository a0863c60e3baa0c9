"""Differentiable operations on :class:`~ctstandard.autodiff.tensor.Tensor`.

Only what the generator and critic networks need: elementwise arithmetic
with numpy broadcasting, reductions, reshaping, channel concatenation,
2-D convolution and its transpose, and a handful of activations.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_output

Operand = Union[Tensor, float, int, np.ndarray]


def _as_tensor(x: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise -----------------------------------------------------------

def add(a: Operand, b: Operand) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    return make_output(
        "add", out, (a, b),
        lambda g: (unbroadcast(g, sa) if ra else None, unbroadcast(g, sb) if rb else None),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    return make_output(
        "sub", out, (a, b),
        lambda g: (unbroadcast(g, sa) if ra else None, unbroadcast(-g, sb) if rb else None),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad * bd
    ra, rb = a.requires_grad, b.requires_grad
    return make_output(
        "mul", out, (a, b),
        lambda g: (
            unbroadcast(g * bd, ad.shape) if ra else None,
            unbroadcast(g * ad, bd.shape) if rb else None,
        ),
    )


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    xd = x.data
    return make_output("abs", np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_output("square", xd * xd, (x,), lambda g: (2.0 * xd * g,))


def sqrt(x: Tensor) -> Tensor:
    """Square root; the gradient at exactly zero is taken as zero (subgradient)."""
    xd = x.data
    if np.any(xd < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(xd)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1), 0.0)
        return (g * d,)

    return make_output("sqrt", out, (x,), vjp)


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"leaky_relu alpha must lie in [0, 1), got {alpha}")
    xd = x.data
    slope = np.where(xd >= 0, 1.0, alpha).astype(xd.dtype)
    return make_output("leaky_relu", xd * slope, (x,), lambda g: (g * slope,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_output("exp", out, (x,), lambda g: (g * out,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)
    return make_output("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the trailing axis, stabilised by max subtraction."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty trailing axis")
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_output("softmax", out, (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return make_output("log_softmax", out, (x,), lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


# --- reductions and shape ---------------------------------------------------

def _norm_axes(axis, ndim) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_output("sum", np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make_output("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([0] + [a.shape[axis] for a in arrays])

    def vjp(g):
        index = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            parts.append(g[tuple(index)])
        return parts

    return make_output("concat", out, tuple(tensors), vjp)


def l2_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; zero-norm rows get a zero subgradient."""
    return sqrt(sum(square(x), axis=axis))


# --- convolution --------------------------------------------------------------

def _check_conv_args(stride: int, padding: int) -> None:
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be an integer >= 1, got {stride}")
    if int(padding) != padding or padding < 0:
        raise ValueError(f"padding must be an integer >= 0, got {padding}")


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> Tuple[np.ndarray, np.ndarray]:
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {cw}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    win = _windows(_pad(x, padding), kh, kw, stride, ho, wo)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,F
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), win


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, padding: int,
                     in_hw: Tuple[int, int]) -> np.ndarray:
    """Adjoint of ``_conv_forward`` with respect to its input."""
    n, f, ho, wo = g.shape
    _, c, kh, kw = w.shape
    h, wd = in_hw
    cols = np.tensordot(g, w, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
    cols = cols.transpose(0, 3, 1, 2, 4, 5)
    gp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    for i in range(kh):
        rs = slice(i, i + stride * (ho - 1) + 1, stride)
        for j in range(kw):
            gp[:, :, rs, j : j + stride * (wo - 1) + 1 : stride] += cols[..., i, j]
    if padding:
        gp = gp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gp)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``kernel[F,C,kh,kw]``."""
    _check_conv_args(stride, padding)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    xd, wd = x.data, kernel.data
    out, win = _conv_forward(xd, wd, stride, padding)
    hw = xd.shape[2:]

    def vjp(g):
        gx = _conv_input_grad(g, wd, stride, padding, hw) if x.requires_grad else None
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if kernel.requires_grad else None
        return (gx, gw)

    return make_output("conv2d", out, (x, kernel), vjp)


def conv_transpose_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + k


def conv2d_transpose(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution of ``x[N,C,H,W]`` with ``kernel[C,F,kh,kw]``.

    Equals the input-gradient rule of :func:`conv2d` run with the same kernel,
    so ``<conv2d(a, k), b> == <a, conv2d_transpose(b, k)>``.
    """
    _check_conv_args(stride, padding)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d_transpose expects 4-D input and kernel")
    xd, wd = x.data, kernel.data
    if xd.shape[1] != wd.shape[0]:
        raise ShapeError(f"conv2d_transpose channel mismatch: input has {xd.shape[1]}, kernel expects {wd.shape[0]}")
    kh, kw = wd.shape[2:]
    ho = conv_transpose_output_size(xd.shape[2], kh, stride, padding)
    wo = conv_transpose_output_size(xd.shape[3], kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d_transpose output would be empty ({ho}x{wo})")
    out = _conv_input_grad(xd, wd, stride, padding, (ho, wo))

    def vjp(g):
        gy, win = _conv_forward(g, wd, stride, padding)
        gx = gy if x.requires_grad else None
        gw = np.tensordot(xd, win, axes=([0, 2, 3], [0, 2, 3])) if kernel.requires_grad else None
        return (gx, gw)

    return make_output("conv2d_transpose", out, (x, kernel), vjp)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias ``bias[C]`` to ``x[N,C,H,W]``."""
    return add(x, reshape(bias, (1, -1, 1, 1)))
