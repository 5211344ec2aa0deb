"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the query encoder and the separator need are provided.
Every op records its parents and a backward closure on the output tensor;
:func:`backward` replays the recorded nodes in reverse creation order.

Conventions:
    * convolutions are cross-correlations (no kernel flip) on ``N x C x H x W``
      arrays; 3-D ``C x H x W`` inputs are accepted and treated as ``N = 1``;
    * padding is given per side as ``((top, bottom), (left, right))``;
    * all computation is float64 and every forward output is checked for
      NaN/Inf.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DTYPE = np.float64

Padding = tuple[tuple[int, int], tuple[int, int]]
BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_seq = itertools.count()
_state = threading.local()


def conv_dtype():
    return getattr(_state, "conv_dtype", DTYPE)


@contextlib.contextmanager
def conv_precision(dtype):
    """Run convolution matmuls in ``dtype`` (e.g. float32 for training speed).

    Inputs and outputs stay float64; only the im2col buffers and the matmuls
    use the reduced precision. Gradient checks need the float64 default.
    """
    prev = conv_dtype()
    _state.conv_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.conv_dtype = prev


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 array with an optional gradient and the node that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward`` maps the output gradient to one gradient (or ``None``) per
    parent. Exposed so callers can register custom ops.
    """
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value in forward output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_seq)
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return make_op(a.data + c, (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return make_op(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return make_op(a.data * factor, (a,), lambda g: (g * factor,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_op(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return make_op(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return make_op(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * sign,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "neg": neg,
    "abs": abs_,
    "tanh": tanh,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name; binary kinds take ``b`` as a tensor or scalar."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("add", "sub", "mul", "scale"):
        if b is None:
            raise ValueError(f"{kind} needs a second operand")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return make_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bias_add(x, b) -> Tensor:
    """Add a per-channel vector along axis 1 (``N x C`` or ``N x C x H x W``)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ValueError(f"bias_add: bias {b.shape} does not match {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    sum_axes = (0,) + tuple(range(2, x.ndim))
    return make_op(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=sum_axes)))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {old} to {shape}") from None
    return make_op(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_op(out, (x,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op(out, ts, backward)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    index = (slice(None),) * axis + (slice(start, stop),)
    out = x.data[index].copy()
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return make_op(out, (x,), backward)


def split(x, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Inverse of :func:`concat` for the given part sizes."""
    x = as_tensor(x)
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {tuple(sizes)} do not cover axis of length {x.shape[axis]}")
    parts, start = [], 0
    for s in sizes:
        parts.append(slice_axis(x, axis, start, start + s))
        start += s
    return parts


def expand(x, shape: Sequence[int]) -> Tensor:
    """Repeat singleton axes of ``x`` up to ``shape`` (same rank only)."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.ndim != len(shape) or any(a not in (1, b) for a, b in zip(x.shape, shape)):
        raise ValueError(f"expand: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a == 1 and b != 1)
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return make_op(out, (x,), lambda g: (g.sum(axis=axes, keepdims=True),))


def reduce(kind: str, x, axes: int | Sequence[int] | None = None) -> Tensor:
    """Sum or mean over ``axes`` (all axes when ``None``); reduced axes are dropped."""
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % x.ndim for a in axes)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if kind == "sum":
        factor = 1.0
    elif kind == "mean":
        factor = 1.0 / count
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    out = x.data.sum(axis=axes) * factor
    keep = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g.reshape(keep) * factor, shape).copy(),)

    return make_op(np.asarray(out, dtype=DTYPE), (x,), backward)


def sum_(x, axes=None) -> Tensor:
    return reduce("sum", x, axes)


def mean(x, axes=None) -> Tensor:
    return reduce("mean", x, axes)


# ---------------------------------------------------------------------------
# convolution


def same_padding(kernel: int, stride: int) -> tuple[int, int]:
    """Per-side padding that maps an axis of length ``n`` (divisible by ``stride``) to ``n / stride``."""
    total = kernel - stride
    if total < 0:
        raise ValueError("kernel smaller than stride")
    return total // 2, total - total // 2


def conv_output_size(n: int, kernel: int, stride: int, pad: tuple[int, int]) -> int:
    return (n + pad[0] + pad[1] - kernel) // stride + 1


def _normalize_padding(padding) -> Padding:
    (pt, pb), (pl, pr) = padding
    return (int(pt), int(pb)), (int(pl), int(pr))


def _col2im(cols: np.ndarray, padded_shape, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    n, c, hp, wp = padded_shape
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    # taps i = a + sh*p share the output sub-lattice a::sh; accumulate each
    # sub-lattice densely, then write it back with a single strided copy
    for a in range(min(sh, kh)):
        for b in range(min(sw, kw)):
            ph = (kh - 1 - a) // sh
            pw = (kw - 1 - b) // sw
            sub = np.zeros((c, n, ho + ph, wo + pw), dtype=cols.dtype)
            for p in range(ph + 1):
                for q in range(pw + 1):
                    sub[:, :, p:p + ho, q:q + wo] += cols[:, a + sh * p, b + sw * q]
            out[:, :, a:a + sh * sub.shape[2]:sh, b:b + sw * sub.shape[3]:sw] = sub
    return out.transpose(1, 0, 2, 3)


def _conv_geometry(xshape, wshape, stride, padding):
    n, c, h, w = xshape
    co, ci, kh, kw = wshape
    if c != ci:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {ci}")
    (pt, pb), (pl, pr) = padding
    sh, sw = stride
    if h + pt + pb < kh or w + pl + pr < kw:
        raise ValueError("conv2d: kernel larger than padded input")
    ho = conv_output_size(h, kh, sh, (pt, pb))
    wo = conv_output_size(w, kw, sw, (pl, pr))
    return ho, wo


def _pad_channel_major(x: np.ndarray, padding) -> np.ndarray:
    """Zero-pad ``N x C x H x W`` into a ``C x N x Hp x Wp`` buffer."""
    (pt, pb), (pl, pr) = padding
    n, c, h, w = x.shape
    xp = np.zeros((c, n, h + pt + pb, w + pl + pr), dtype=conv_dtype())
    xp[:, :, pt:pt + h, pl:pl + w] = x.transpose(1, 0, 2, 3)
    return xp


def _im2col_cm(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    c, n = xp.shape[:2]
    s_c, s_n, s_h, s_w = xp.strides
    view = as_strided(xp, (c, kh, kw, n, ho, wo), (s_c, s_h, s_w, s_n, s_h * sh, s_w * sw), writeable=False)
    return view.reshape(c * kh * kw, n * ho * wo)


def _channel_major(g: np.ndarray) -> np.ndarray:
    """``N x C x H x W`` -> ``C x (N*H*W)``."""
    return g.astype(conv_dtype(), copy=False).transpose(1, 0, 2, 3).reshape(g.shape[1], -1)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride, padding):
    """Returns the output and the column matrix (reused for the kernel gradient)."""
    ho, wo = _conv_geometry(x.shape, w.shape, stride, padding)
    kh, kw = w.shape[2:]
    cols = _im2col_cm(_pad_channel_major(x, padding), kh, kw, stride[0], stride[1], ho, wo)
    out = w.reshape(w.shape[0], -1).astype(cols.dtype, copy=False) @ cols
    out = out.reshape(w.shape[0], x.shape[0], ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out, dtype=DTYPE), cols


def _conv_input_grad(g2: np.ndarray, w: np.ndarray, xshape, gshape, stride, padding):
    """Input gradient from the channel-major output gradient ``g2``."""
    (pt, pb), (pl, pr) = padding
    n, _, h, wd = xshape
    ho, wo = gshape[2:]
    kh, kw = w.shape[2:]
    cols = w.reshape(w.shape[0], -1).T.astype(g2.dtype, copy=False) @ g2
    padded = (n, w.shape[1], h + pt + pb, wd + pl + pr)
    gxp = _col2im(cols, padded, kh, kw, stride[0], stride[1], ho, wo)
    return np.ascontiguousarray(gxp[:, :, pt:pt + h, pl:pl + wd], dtype=DTYPE)


def _conv_kernel_grad(g2: np.ndarray, cols: np.ndarray, wshape):
    return (g2 @ cols.T).reshape(wshape).astype(DTYPE, copy=False)


def _batched(fn):
    """Let a 4-D op also accept a single ``C x H x W`` input."""

    def wrapper(x, *args, **kwargs):
        x = as_tensor(x)
        if x.ndim == 3:
            out = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise ValueError(f"expected a 3-D or 4-D input, got shape {x.shape}")
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def conv2d(x, kernel, stride=(1, 1), padding: Padding = ((0, 0), (0, 0))) -> Tensor:
    """Strided cross-correlation of ``x`` with ``kernel`` (``C_out x C_in x kh x kw``)."""
    kernel = as_tensor(kernel)
    stride = (int(stride[0]), int(stride[1]))
    padding = _normalize_padding(padding)
    out, cols = _conv_forward(x.data, kernel.data, stride, padding)
    xshape, wdata = x.shape, kernel.data

    def backward(g):
        g2 = _channel_major(g)
        gx = _conv_input_grad(g2, wdata, xshape, g.shape, stride, padding) if x.requires_grad else None
        gw = _conv_kernel_grad(g2, cols, wdata.shape) if kernel.requires_grad else None
        return gx, gw

    return make_op(out, (x, kernel), backward)


@_batched
def conv2d_transpose(x, kernel, stride, padding: Padding, output_size: tuple[int, int]) -> Tensor:
    """Adjoint of :func:`conv2d` with the same kernel, stride and padding.

    ``kernel`` is ``C_in x C_out x kh x kw`` from the point of view of this op
    (the layout of the matching forward convolution). The output spatial size
    must be declared since several sizes map onto the same input size.
    """
    kernel = as_tensor(kernel)
    stride = (int(stride[0]), int(stride[1]))
    padding = _normalize_padding(padding)
    n, ci, h, w = x.shape
    co_conv, ci_conv, kh, kw = kernel.shape
    if ci != co_conv:
        raise ValueError(f"conv2d_transpose: input has {ci} channels, kernel expects {co_conv}")
    out_shape = (n, ci_conv, int(output_size[0]), int(output_size[1]))
    if _conv_geometry(out_shape, kernel.shape, stride, padding) != (h, w):
        raise ValueError(f"conv2d_transpose: output size {tuple(output_size)} inconsistent with input {x.shape[2:]}")
    x2 = _channel_major(x.data)
    out = _conv_input_grad(x2, kernel.data, out_shape, x.shape, stride, padding)
    wdata = kernel.data

    def backward(g):
        gx, cols = _conv_forward(g, wdata, stride, padding)
        gw = _conv_kernel_grad(x2, cols, wdata.shape) if kernel.requires_grad else None
        return (gx if x.requires_grad else None), gw

    return make_op(out, (x, kernel), backward)


def _tap_validity(size: tuple[int, int], kshape: tuple[int, int], stride, padding) -> np.ndarray:
    """``kh*kw x Ho*Wo`` indicator of kernel taps that land inside the unpadded input."""
    ones = np.ones((1, 1) + tuple(size))
    eye = np.eye(kshape[0] * kshape[1]).reshape(-1, 1, kshape[0], kshape[1])
    out, _ = _conv_forward(ones, eye, stride, padding)
    return out.reshape(eye.shape[0], -1)


def tiled_conv2d(z, kernel, size: tuple[int, int], stride=(1, 1), padding: Padding = ((0, 0), (0, 0))) -> Tensor:
    """``conv2d`` of ``z`` (``N x C``) tiled over a ``size`` plane, without building the tiling.

    Equal to ``conv2d(expand(z[..., None, None], (N, C) + size), kernel, ...)``:
    each output position sums the kernel taps that fall inside the plane.
    """
    z, kernel = as_tensor(z), as_tensor(kernel)
    stride = (int(stride[0]), int(stride[1]))
    padding = _normalize_padding(padding)
    n, c = z.shape
    co, ci, kh, kw = kernel.shape
    if c != ci:
        raise ValueError(f"tiled_conv2d: latent has {c} channels, kernel expects {ci}")
    ho, wo = _conv_geometry((n, c) + tuple(size), kernel.shape, stride, padding)
    valid = _tap_validity(size, (kh, kw), stride, padding)
    wk = kernel.data.reshape(co, ci, kh * kw)
    zw = np.einsum("nc,oct->not", z.data, wk)
    out = (zw.reshape(n * co, -1) @ valid).reshape(n, co, ho, wo)
    zd = z.data

    def backward(g):
        gzw = (g.reshape(n * co, -1) @ valid.T).reshape(n, co, kh * kw)
        gz = np.einsum("not,oct->nc", gzw, wk) if z.requires_grad else None
        gw = np.einsum("not,nc->oct", gzw, zd).reshape(kernel.shape) if kernel.requires_grad else None
        return gz, gw

    return make_op(out, (z, kernel), backward)


# ---------------------------------------------------------------------------
# normalization


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize every channel over its last two (spatial) axes."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ValueError("instance_norm expects C x F x T or N x C x F x T")
    lead = x.shape[:-2]
    flat = x.data.reshape(lead + (-1,))
    count = flat.shape[-1]
    mu = flat.sum(axis=-1, keepdims=True) / count
    xc = flat - mu
    var = np.einsum("...i,...i->...", xc, xc)[..., None] / count
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gf = g.reshape(xhat.shape)
        gm = gf.sum(axis=-1, keepdims=True) / count
        gxm = np.einsum("...i,...i->...", gf, xhat)[..., None] / count
        return ((inv * (gf - gm - xhat * gxm)).reshape(x.shape),)

    return make_op(xhat.reshape(x.shape), (x,), backward)


def channel_affine(x, scale_, bias) -> Tensor:
    """Per-channel ``scale * x + bias``; ``scale``/``bias`` are ``C`` or ``N x C``."""
    x, scale_, bias = as_tensor(x), as_tensor(scale_), as_tensor(bias)
    lead = x.shape[:-2]
    if scale_.shape != lead or bias.shape != lead:
        raise ValueError(f"channel_affine: expected scale/bias of shape {lead}, got {scale_.shape}, {bias.shape}")
    s = scale_.data[..., None, None]
    out = x.data * s + bias.data[..., None, None]
    xd = x.data

    def backward(g):
        return g * s, (g * xd).sum(axis=(-2, -1)), g.sum(axis=(-2, -1))

    return make_op(out, (x, scale_, bias), backward)


def adain(x, y_s, y_b, eps: float = 1e-5) -> Tensor:
    """Adaptive instance normalization: per-channel ``y_s * IN(x) + y_b``."""
    x = as_tensor(x)
    y_s, y_b = as_tensor(y_s), as_tensor(y_b)
    if y_s.shape != x.shape[:-2] or y_b.shape != x.shape[:-2]:
        raise ValueError(f"adain: channel-count mismatch between {x.shape} and {y_s.shape}/{y_b.shape}")
    return channel_affine(instance_norm(x, eps), y_s, y_b)


# ---------------------------------------------------------------------------
# recurrent


GRU_KEYS = ("w_ir", "w_hr", "b_r", "w_iz", "w_hz", "b_z", "w_in", "w_hn", "b_n")


def gru_forward(params: Mapping[str, Tensor], inputs: Sequence) -> tuple[list[Tensor], Tensor]:
    """Run a GRU from a zero state over ``inputs`` (each ``N x D`` or ``D``).

    Per step, with reset gate ``r``, update gate ``u`` and candidate ``n``::

        r = sigmoid(x W_ir + h W_hr + b_r)
        u = sigmoid(x W_iz + h W_hz + b_z)
        n = tanh(x W_in + (r * h) W_hn + b_n)
        h = u * h + (1 - u) * n

    Returns all states and the final state.
    """
    if len(inputs) == 0:
        raise ValueError("gru_forward: empty input sequence")
    xs = [as_tensor(x) for x in inputs]
    single = xs[0].ndim == 1
    if single:
        xs = [reshape(x, (1, x.shape[0])) for x in xs]
    dim = xs[0].shape[1]
    if any(x.ndim != 2 or x.shape[1] != dim for x in xs):
        raise ValueError("gru_forward: inputs must share one feature dimension")
    p = {k: as_tensor(params[k]) for k in GRU_KEYS}
    hidden = p["w_hr"].shape[0]
    h = Tensor(np.zeros((xs[0].shape[0], hidden)))
    states = []
    for x in xs:
        r = sigmoid(bias_add(matmul(x, p["w_ir"]) + matmul(h, p["w_hr"]), p["b_r"]))
        u = sigmoid(bias_add(matmul(x, p["w_iz"]) + matmul(h, p["w_hz"]), p["b_z"]))
        n = tanh(bias_add(matmul(x, p["w_in"]) + matmul(mul(r, h), p["w_hn"]), p["b_n"]))
        h = mul(u, h) + mul(add(neg(u), 1.0), n)
        states.append(h)
    if single:
        states = [reshape(s, (hidden,)) for s in states]
    return states, states[-1]


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` get their ``.grad`` accumulated; the
    returned map holds the gradient of every such leaf.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            leaves[t] = t.grad
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=DTYPE)
    return leaves


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam moment buffers keyed by parameter name, plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.5,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float]
    passed: bool
    tol: float


def gradient_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray | Tensor],
    tol: float = 1e-4,
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``fn`` receives one tensor per input and returns a scalar tensor. The step
    for coordinate ``i`` is ``h * max(1, |x_i|)``. The error for one input is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` over the
    probed coordinates; ``max_coords`` probes a random subset per input.
    """
    arrays = [np.array(as_tensor(x).data, dtype=DTYPE) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(*leaves))
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def value(vals):
        with no_grad():
            return fn(*[Tensor(v) for v in vals]).item()

    rng = rng or np.random.default_rng(0)
    errors = []
    for k, base in enumerate(arrays):
        flat = base.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        num = np.empty(len(coords))
        ana = analytic[k].reshape(-1)[coords]
        for j, i in enumerate(coords):
            step = h * max(1.0, abs(flat[i]))
            vals = [a.copy() for a in arrays]
            vals[k].reshape(-1)[i] = flat[i] + step
            up = value(vals)
            vals[k].reshape(-1)[i] = flat[i] - step
            down = value(vals)
            num[j] = (up - down) / (2.0 * step)
        denom = max(np.max(np.abs(ana), initial=0.0), np.max(np.abs(num), initial=0.0))
        err = 0.0 if denom == 0.0 else float(np.max(np.abs(ana - num)) / denom)
        errors.append(err)
    worst = max(errors, default=0.0)
    return GradCheckReport(max_rel_error=worst, per_input=errors, passed=worst <= tol, tol=tol)


def global_norm(grads: Iterable[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    return float(np.sqrt(total))
