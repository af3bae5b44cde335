"""Differentiable operations over :class:`Tensor`.

Each op computes its forward value with numpy and, when recording, registers a
closure mapping the output gradient to one gradient per input (``None`` for
inputs that need none).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DataError, DimensionError
from .tensor import Tensor, active_tape, as_tensor


def _make(op: str, out_data: np.ndarray, inputs: tuple, backward) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(x, y, broadcast: bool = False) -> Tensor:
    """Elementwise sum.  Shapes must match exactly unless ``broadcast`` is set."""
    x, y = as_tensor(x), as_tensor(y)
    if broadcast:
        _broadcast_shape(x, y, "add")
    elif x.shape != y.shape:
        raise DimensionError(f"add: shape mismatch {x.shape} vs {y.shape}")
    xs, ys = x.shape, y.shape
    return _make(
        "add",
        x.data + y.data,
        (x, y),
        lambda g: (_unbroadcast(g, xs), _unbroadcast(g, ys)),
    )


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _broadcast_shape(x, y, "sub")
    xs, ys = x.shape, y.shape
    return _make(
        "sub",
        x.data - y.data,
        (x, y),
        lambda g: (_unbroadcast(g, xs), _unbroadcast(-g, ys)),
    )


def mul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _broadcast_shape(x, y, "mul")
    xd, yd = x.data, y.data
    return _make(
        "mul",
        xd * yd,
        (x, y),
        lambda g: (_unbroadcast(g * yd, xd.shape), _unbroadcast(g * xd, yd.shape)),
    )


def div(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _broadcast_shape(x, y, "div")
    xd, yd = x.data, y.data
    out = xd / yd

    def backward(g):
        gx = g / yd
        return _unbroadcast(gx, xd.shape), _unbroadcast(-gx * out, yd.shape)

    return _make("div", out, (x, y), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(
        "permute",
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inverse),),
    )


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    ref = [n for i, n in enumerate(tensors[0].shape) if i != axis]
    for t in tensors:
        if t.ndim != ndim or [n for i, n in enumerate(t.shape) if i != axis] != ref:
            raise DimensionError(f"concat: extents off axis {axis} differ: {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def concat_channels(maps: Sequence[Tensor]) -> Tensor:
    """Concatenate B x C_i x H x W maps along the channel axis, order preserved."""
    maps = [as_tensor(m) for m in maps]
    if any(m.ndim != 4 for m in maps):
        raise DimensionError(f"concat_channels expects rank-4 maps, got {[m.shape for m in maps]}")
    return concat(maps, axis=1)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", ad @ bd, (a, b), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest2x expects B x C x H x W, got {x.shape}")
    b, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, 2, w, 2)).reshape(b, c, 2 * h, 2 * w)
    return _make(
        "upsample2x",
        out,
        (x,),
        lambda g: (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),),
    )


# ---------------------------------------------------------------------------
# attention primitives
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, shifted by the row maximum."""
    out = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax_rows", out, (x,), backward)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to ``x / (||x||_2 + eps)``; zero rows stay zero."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    denom = norm + eps
    out = xd / denom

    def backward(g):
        dot = (g * xd).sum(axis=-1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        coef = np.where(norm > 0, dot / (denom * denom * safe), 0.0)
        return (g / denom - xd * coef,)

    return _make("l2_normalize_rows", out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _out_extent(n: int, k: int, stride: int, pad: int, axis: str, exact: bool) -> int:
    span = n + 2 * pad - k
    if span < 0 or (exact and span % stride):
        raise ConfigurationError(
            f"conv2d: {axis} extent {n} with kernel {k}, stride {stride}, pad {pad} "
            "does not give an integral output extent"
        )
    return span // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    exact: bool = True,
) -> Tensor:
    """Cross-correlation of B x Cin x H x W with Cout x Cin x k x k, k in {1, 3}.

    Lowered to a single matrix product over extracted patches.  With ``exact``
    the output extent ``(H + 2 pad - k) / stride + 1`` must be integral; with
    ``exact=False`` it is floored, so a stride-2 pad-1 3x3 conv halves even extents.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 input and weight, got {x.shape}, {w.shape}")
    cout, cin, k, k2 = w.shape
    if k != k2 or k not in (1, 3):
        raise ConfigurationError(f"conv2d supports 1x1 and 3x3 kernels, got {k}x{k2}")
    if x.shape[1] != cin:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, weight expects {cin}")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"conv2d: invalid stride {stride} / pad {pad}")
    bsz, _, h, wd = x.shape
    ho = _out_extent(h, k, stride, pad, "height", exact)
    wo = _out_extent(wd, k, stride, pad, "width", exact)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    xp = xp[:, :, : (ho - 1) * stride + k, : (wo - 1) * stride + k]
    if k == 1:
        cols = xp[:, :, ::stride, ::stride].transpose(0, 2, 3, 1).reshape(-1, cin)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, cin * k * k)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))
    padded_shape = (bsz, cin, h + 2 * pad, wd + 2 * pad)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gmat.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = gmat @ wmat
            gxp = np.zeros(padded_shape)
            if k == 1:
                gxp[:, :, ::stride, ::stride] = gcols.reshape(bsz, ho, wo, cin).transpose(0, 3, 1, 2)
            else:
                gcols = gcols.reshape(bsz, ho, wo, cin, k, k).transpose(0, 3, 4, 5, 1, 2)
                for di in range(k):
                    for dj in range(k):
                        gxp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += gcols[
                            :, :, di, dj
                        ]
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv2d", out, inputs, backward)


# ---------------------------------------------------------------------------
# normalization and loss
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    num_channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.num_channels)
        if self.running_var is None:
            self.running_var = np.ones(self.num_channels)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    if x.ndim != 4 or x.shape[1] != state.num_channels:
        raise DimensionError(f"batchnorm2d: input {x.shape} vs {state.num_channels} channels")
    bsz, c, h, w = x.shape
    gd = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = bsz * h * w
        if m < 2:
            raise ConfigurationError("batchnorm2d in train mode needs at least two values per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * inv
        mom = state.momentum
        state.running_mean = (1 - mom) * state.running_mean + mom * mu.reshape(c)
        state.running_var = (1 - mom) * state.running_var + mom * var.reshape(c) * m / (m - 1)

        def backward(g):
            gbeta = g.sum(axis=(0, 2, 3))
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gx = (gd * inv / m) * (
                    m * g - gbeta.reshape(1, c, 1, 1) - xhat * ggamma.reshape(1, c, 1, 1)
                )
            return gx, ggamma, gbeta

    else:
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).reshape(1, c, 1, 1)
        xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * inv

        def backward(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = gd * xhat + beta.data.reshape(1, c, 1, 1)
    return _make("batchnorm2d", out, (x, gamma, beta), backward)


def cross_entropy_loss(logits: Tensor, labels, ignore_label: Optional[int] = None) -> Tensor:
    """Mean pixel-wise cross entropy of B x K x H x W logits against B x H x W labels."""
    labels = np.asarray(labels)
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"cross_entropy_loss: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    valid = np.ones(labels.shape, dtype=bool) if ignore_label is None else labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"label {int(labels[where])} outside [0, {k}) at pixel (b, y, x) = {where}")
    count = int(valid.sum())
    safe = np.where(valid, labels, 0).astype(np.intp)

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    nll = np.log(s[:, 0]) - picked
    loss = float((nll * valid).sum() / count) if count else 0.0

    def backward(g):
        if not count:
            return (np.zeros_like(logits.data),)
        p = e / s
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1.0, axis=1)
        return (p * (valid[:, None] * (g / count)),)

    return _make("cross_entropy", np.array(loss), (logits,), backward)
