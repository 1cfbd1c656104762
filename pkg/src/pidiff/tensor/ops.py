"""Differentiable operations on :class:`Tensor`.

Broadcasting is deliberately limited to tensor-with-scalar. The few places the
networks need a per-channel or per-sample broadcast have their own named ops
(``add_channel``, ``mul_channel``, ``scale_batch``) so shape bugs surface as
errors rather than as silently broadcast results.
"""

from __future__ import annotations

import numbers
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .core import Tensor, make_result

Scalar = Union[int, float, np.floating, np.integer]

# Multiply-accumulate counter used by the cost model; None when not counting.
_mac_counter: Optional[list] = None


def _count_macs(n: int) -> None:
    if _mac_counter is not None:
        _mac_counter[0] += int(n)


def _is_scalar(b) -> bool:
    return isinstance(b, numbers.Number) and not isinstance(b, bool)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def elementwise(op_kind: str, a: Tensor, b) -> Tensor:
    """Apply ``add``/``sub``/``mul``/``div`` to equal-shape tensors or tensor-scalar."""
    if op_kind not in ("add", "sub", "mul", "div"):
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    return {"add": add, "sub": sub, "mul": mul, "div": div}[op_kind](a, b)


def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        s = b
        return make_result(a.data + s, (a,), lambda g: (g,), "add_scalar")
    b = as_tensor(b)
    _check_same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return make_result(a.data - b, (a,), lambda g: (g,), "sub_scalar")
    b = as_tensor(b)
    _check_same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def rsub(a: Tensor, s: Scalar) -> Tensor:
    return make_result(s - a.data, (a,), lambda g: (-g,), "rsub_scalar")


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        s = b
        return make_result(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    b = as_tensor(b)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        if b == 0:
            raise ZeroDivisionError("div: division by exact zero")
        s = b
        return make_result(a.data / s, (a,), lambda g: (g / s,), "div_scalar")
    b = as_tensor(b)
    _check_same_shape(a, b, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: divisor contains exact zeros")
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def rdiv(a: Tensor, s: Scalar) -> Tensor:
    if np.any(a.data == 0):
        raise ZeroDivisionError("rdiv: divisor contains exact zeros")
    ad = a.data
    out = s / ad
    return make_result(out, (a,), lambda g: (-g * out / ad,), "rdiv_scalar")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def abs_(a: Tensor) -> Tensor:
    # sign(0) = 0 gives the zero subgradient at a zero residual
    ad = a.data
    return make_result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any finite input
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0
    return make_result(np.where(mask, ad, 0).astype(ad.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = _sigmoid_np(ad)
    out = ad * s
    return make_result(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


def activation(kind: str, a: Tensor) -> Tensor:
    try:
        fn = {"relu": relu, "sigmoid": sigmoid, "silu": silu}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(a)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axes, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not isinstance(ix, (slice, int, type(Ellipsis))):
            raise TypeError("only basic slicing is supported")
    out = a.data[index]
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return make_result(out, (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    _count_macs(a.shape[0] * a.shape[1] * b.shape[1])
    return make_result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with ``x`` of shape (N, in), ``w`` (in, out), ``b`` (out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear: cannot apply weight {w.shape} to input {x.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    _count_macs(w.shape[0] * w.shape[1] * x.shape[0])
    if b is None:
        return make_result(out, (x, w), lambda g: (g @ wd.T, xd.T @ g), "linear")
    if b.shape != (w.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    out = out + b.data
    return make_result(out, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)), "linear")


def _im2col(xh: np.ndarray, k: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Row-layout columns (B*Ho*Wo, k*k*C) from a padded NHWC input.

    Rows are output pixels, so the GEMM against the (k*k*C, O) weight matrix
    has the long dimension first, which BLAS handles far better than the
    transposed arrangement when O is small. Each copy moves contiguous
    channel runs.
    """
    B, C = xh.shape[0], xh.shape[3]
    cols = np.empty((B, Ho, Wo, k, k, C), dtype=xh.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xh[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]
    return cols.reshape(B * Ho * Wo, k * k * C)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation, NCHW input and OCkk weights, zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if C != Cw:
        raise ValueError(f"conv2d: input has {C} channels but weight expects {Cw}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if padding == "same":
        p = k // 2
    elif padding == "valid":
        p = 0
        if H < k or W < k:
            raise ValueError(f"conv2d: input {H}x{W} smaller than kernel {k} with valid padding")
    else:
        raise ValueError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")
    if b is not None and b.shape != (O,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({O},)")

    xd, wd = x.data, w.data
    Ho = (H + 2 * p - k) // stride + 1
    Wo = (W + 2 * p - k) // stride + 1
    xh = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=xd.dtype)
    xh[:, p:p + H, p:p + W, :] = xd.transpose(0, 2, 3, 1)
    cols = _im2col(xh, k, stride, Ho, Wo)
    del xh
    w2 = np.ascontiguousarray(wd.transpose(0, 2, 3, 1)).reshape(O, k * k * C)
    out = cols @ w2.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))
    _count_macs(O * C * k * k * Ho * Wo * B)

    def backward(g):
        grows = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        gw = (cols.T @ grows).T.reshape(O, k, k, C).transpose(0, 3, 1, 2)
        dcols = (grows @ w2).reshape(B, Ho, Wo, k, k, C)
        gxh = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=dcols.dtype)
        for i in range(k):
            for j in range(k):
                gxh[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += dcols[:, :, :, i, j, :]
        gx = np.ascontiguousarray(gxh[:, p:p + H, p:p + W, :].transpose(0, 3, 1, 2))
        grads = [gx, np.ascontiguousarray(gw)]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# resampling and channel-wise broadcasts
# ---------------------------------------------------------------------------

def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError("upsample expects NCHW input")
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return make_result(
        out, (x,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),), "upsample2x"
    )


def avg_pool2d(x: Tensor, kh: int, kw: Optional[int] = None) -> Tensor:
    """Non-overlapping average pooling; the spatial extents must divide evenly."""
    kw = kh if kw is None else kw
    B, C, H, W = x.shape
    if H % kh or W % kw:
        raise ValueError(f"avg_pool2d: {H}x{W} not divisible by {kh}x{kw}")
    if kh == 1 and kw == 1:
        return x
    out = x.data.reshape(B, C, H // kh, kh, W // kw, kw).mean(axis=(3, 5))
    scale = 1.0 / (kh * kw)

    def backward(g):
        return (np.repeat(np.repeat(g * scale, kh, axis=2), kw, axis=3).astype(x.dtype, copy=False),)

    return make_result(out, (x,), backward, "avg_pool2d")


def add_channel(x: Tensor, v: Tensor) -> Tensor:
    """Add a per-(sample, channel) value ``v`` of shape (B, C) to an NCHW map."""
    if x.ndim != 4 or v.shape != x.shape[:2]:
        raise ValueError(f"add_channel: cannot add {v.shape} to {x.shape}")
    out = x.data + v.data[:, :, None, None]
    return make_result(out, (x, v), lambda g: (g, g.sum(axis=(2, 3))), "add_channel")


def mul_channel(x: Tensor, v: Tensor) -> Tensor:
    """Scale each (sample, channel) plane of an NCHW map by ``v`` of shape (B, C)."""
    if x.ndim != 4 or v.shape != x.shape[:2]:
        raise ValueError(f"mul_channel: cannot scale {x.shape} by {v.shape}")
    xd, vd = x.data, v.data[:, :, None, None]
    return make_result(
        xd * vd, (x, v), lambda g: (g * vd, (g * xd).sum(axis=(2, 3))), "mul_channel"
    )


def scale_batch(x: Tensor, coeffs) -> Tensor:
    """Multiply sample ``i`` of ``x`` by the constant ``coeffs[i]``."""
    c = np.asarray(coeffs, dtype=x.dtype).reshape(-1)
    if c.shape[0] != x.shape[0]:
        raise ValueError(f"scale_batch: {c.shape[0]} coefficients for batch of {x.shape[0]}")
    c = c.reshape((-1,) + (1,) * (x.ndim - 1))
    return make_result(x.data * c, (x,), lambda g: (g * c,), "scale_batch")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse(a: Tensor, b) -> Tensor:
    return mean(square(sub(a, b)))


def l1(a: Tensor, b) -> Tensor:
    return mean(abs_(sub(a, b)))


# ---------------------------------------------------------------------------
# operator sugar
# ---------------------------------------------------------------------------

def _radd(a, b):
    return add(a, b)


def _rmul(a, b):
    return mul(a, b)


Tensor.__add__ = add
Tensor.__radd__ = _radd
Tensor.__sub__ = sub
Tensor.__rsub__ = rsub
Tensor.__mul__ = mul
Tensor.__rmul__ = _rmul
Tensor.__truediv__ = div
Tensor.__rtruediv__ = rdiv
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
Tensor.__getitem__ = getitem
Tensor.sum = sum_
Tensor.mean = mean
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 else shape)
Tensor.transpose = transpose
Tensor.relu = relu
Tensor.sigmoid = sigmoid
Tensor.silu = silu
Tensor.abs = abs_
Tensor.square = square
