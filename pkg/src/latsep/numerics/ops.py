"""Differentiable operations on Tensors.

Each op computes its numpy result and registers a vector-Jacobian closure
via ``make_op``. Shapes follow the [*, C, F, T] layout used by the blocks:
an optional leading batch axis is accepted wherever it makes sense, and the
unbatched 3-D case is the documented contract.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor, as_tensor, make_op


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce(b, a)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make_op(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce(b, a)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return make_op(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce(b, a)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_op(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce(b, a)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return make_op(ad / bd, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * (0.5 / out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def sum_canonical(a) -> Tensor:
    """Permutation-canonical full sum: folds the values in sorted order, so any
    reordering of the input yields a bitwise-identical result (up to exact ties)."""
    a = as_tensor(a)
    shape = a.data.shape
    out = np.add.reduce(np.sort(a.data, axis=None))

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.asarray(out), (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return make_op(out, (a,), lambda g: (g * (out > 0),))


def softmax(a, axis: int = -1) -> Tensor:
    """Overflow-safe softmax along ``axis`` (max-subtracted)."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and structure

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    if axis is None:
        count = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for i in ax:
            count *= shape[i]
    inv = a.data.dtype.type(1.0 / count)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g * inv, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, shape).copy(),)

    return make_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def moveaxis(a, src: int, dst: int) -> Tensor:
    a = as_tensor(a)
    return make_op(np.ascontiguousarray(np.moveaxis(a.data, src, dst)), (a,),
                   lambda g: (np.moveaxis(g, dst, src),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(p.squeeze(axis) for p in parts)

    return make_op(np.stack([t.data for t in tensors], axis=axis), tensors, vjp)


def pad2d(a, pad_f=(0, 0), pad_t=(0, 0)) -> Tensor:
    """Zero-pad the last two axes by (before, after) amounts."""
    a = as_tensor(a)
    width = [(0, 0)] * (a.ndim - 2) + [tuple(pad_f), tuple(pad_t)]
    f0, f1 = pad_f
    t0, t1 = pad_t
    F, T = a.data.shape[-2:]

    def vjp(g):
        return (g[..., f0:f0 + F, t0:t0 + T],)

    return make_op(np.pad(a.data, width), (a,), vjp)


def crop2d(a, f_out: int, t_out: int) -> Tensor:
    """Keep the leading ``f_out`` x ``t_out`` corner of the last two axes."""
    a = as_tensor(a)
    F, T = a.data.shape[-2:]
    if f_out > F or t_out > T:
        raise DimensionError(f"crop2d: target ({f_out},{t_out}) exceeds input ({F},{T})")
    width = [(0, 0)] * (a.ndim - 2) + [(0, F - f_out), (0, T - t_out)]

    def vjp(g):
        return (np.pad(g, width),)

    return make_op(np.ascontiguousarray(a.data[..., :f_out, :t_out]), (a,), vjp)


def take_rows(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add into the table."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.intp)
    n = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take_rows: index out of range for table with {n} rows")
    shape = table.data.shape

    def vjp(g):
        grad = np.zeros(shape, dtype=g.dtype)
        np.add.at(grad, idx, g)
        return (grad,)

    return make_op(table.data[idx], (table,), vjp)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul: expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner dims disagree, operand 'a' {a.shape} vs operand 'b' {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return make_op(ad @ bd, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    """y[..., j] = sum_i x[..., i] * weight[i, j] (+ bias[j])."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise DimensionError("linear: operand 'weight' must be 2-D [F_in, F_out]")
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear: operand 'x' last dim {x.shape[-1]} does not match "
            f"operand 'weight' rows {weight.shape[0]}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(
                f"linear: operand 'bias' shape {bias.shape} does not match "
                f"weight cols {weight.shape[1]}")
    xd, wd = x.data, weight.data
    y = xd @ wd
    if bias is not None:
        y = y + bias.data
    lead = tuple(range(xd.ndim - 1))

    def vjp(g):
        dx = g @ wd.T
        dw = np.tensordot(xd, g, axes=(lead, lead))
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=lead) if lead else g.copy())
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(y, parents, vjp)


# ---------------------------------------------------------------------------
# convolution

def _im2col(xp: np.ndarray, kF: int, kT: int, sF: int, sT: int,
            Fo: int, To: int) -> np.ndarray:
    """[B, C, Fp, Tp] -> [B, C*kF*kT, Fo*To] patch matrix."""
    B, C = xp.shape[:2]
    cols = np.empty((B, C, kF, kT, Fo, To), dtype=xp.dtype)
    for u in range(kF):
        for v in range(kT):
            cols[:, :, u, v] = xp[:, :, u:u + sF * Fo:sF, v:v + sT * To:sT]
    return cols.reshape(B, C * kF * kT, Fo * To)


def _col2im(cols: np.ndarray, C: int, kF: int, kT: int, sF: int, sT: int,
            Fp: int, Tp: int, Fo: int, To: int) -> np.ndarray:
    """Scatter-add inverse of ``_im2col`` into a [B, C, Fp, Tp] array."""
    B = cols.shape[0]
    cols = cols.reshape(B, C, kF, kT, Fo, To)
    out = np.zeros((B, C, Fp, Tp), dtype=cols.dtype)
    for u in range(kF):
        for v in range(kT):
            out[:, :, u:u + sF * Fo:sF, v:v + sT * To:sT] += cols[:, :, u, v]
    return out


def _as_batched(x: Tensor):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"operand 'x' must be [C,F,T] or [B,C,F,T], got shape {x.shape}")


def conv2d(x, kernels, bias=None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Cross-correlation of [*, C_in, F, T] with kernels [C_out, C_in, kF, kT].

    Output spatial dims: F' = (F + 2*pF - kF) // sF + 1, likewise for T.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    xd, squeeze = _as_batched(x)
    if kernels.ndim != 4:
        raise DimensionError("conv2d: operand 'kernels' must be [C_out, C_in, kF, kT]")
    Co, Ci, kF, kT = kernels.shape
    if xd.shape[1] != Ci:
        raise DimensionError(
            f"conv2d: operand 'x' has {xd.shape[1]} channels but operand "
            f"'kernels' expects {Ci}")
    sF, sT = stride
    pF, pT = padding
    B, _, F, T = xd.shape
    if kF > F + 2 * pF or kT > T + 2 * pT:
        raise DimensionError(
            f"conv2d: kernel ({kF},{kT}) larger than padded input "
            f"({F + 2 * pF},{T + 2 * pT})")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (Co,):
            raise DimensionError(f"conv2d: operand 'bias' shape {bias.shape} != ({Co},)")

    xp = np.pad(xd, ((0, 0), (0, 0), (pF, pF), (pT, pT))) if (pF or pT) else xd
    Fp, Tp = xp.shape[-2:]
    Fo = (Fp - kF) // sF + 1
    To = (Tp - kT) // sT + 1
    cols = _im2col(xp, kF, kT, sF, sT, Fo, To)
    w2 = kernels.data.reshape(Co, Ci * kF * kT)
    y = np.matmul(w2, cols)  # [B, Co, Fo*To]
    if bias is not None:
        y = y + bias.data[:, None]
    y = y.reshape(B, Co, Fo, To)

    def vjp(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(B, Co, Fo * To)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape)
        dcols = np.matmul(w2.T, g2)
        dxp = _col2im(dcols, Ci, kF, kT, sF, sT, Fp, Tp, Fo, To)
        dx = dxp[:, :, pF:pF + F, pT:pT + T] if (pF or pT) else dxp
        if squeeze:
            dx = dx[0]
        grads = [dx, dw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return make_op(y[0] if squeeze else y, parents, vjp)


def transposed_conv2d(x, kernels, bias=None, stride=(1, 1)) -> Tensor:
    """Gradient-of-conv2d upsampling; kernels are [C_in, C_out, kF, kT].

    Output spatial dims: F' = (F - 1) * sF + kF, likewise for T.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    xd, squeeze = _as_batched(x)
    if kernels.ndim != 4:
        raise DimensionError(
            "transposed_conv2d: operand 'kernels' must be [C_in, C_out, kF, kT]")
    Ci, Co, kF, kT = kernels.shape
    if xd.shape[1] != Ci:
        raise DimensionError(
            f"transposed_conv2d: operand 'x' has {xd.shape[1]} channels but "
            f"operand 'kernels' expects {Ci}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (Co,):
            raise DimensionError(
                f"transposed_conv2d: operand 'bias' shape {bias.shape} != ({Co},)")
    sF, sT = stride
    B, _, F, T = xd.shape
    Fo = (F - 1) * sF + kF
    To = (T - 1) * sT + kT

    w_up = kernels.data.transpose(1, 2, 3, 0).reshape(Co * kF * kT, Ci)
    cols = np.matmul(w_up, xd.reshape(B, Ci, F * T))  # [B, Co*kF*kT, F*T]
    y = _col2im(cols, Co, kF, kT, sF, sT, Fo, To, F, T)
    if bias is not None:
        y = y + bias.data[None, :, None, None]

    def vjp(g):
        g4 = g[None] if squeeze else g
        cols_g = _im2col(g4, kF, kT, sF, sT, F, T)  # [B, Co*kF*kT, F*T]
        dx = np.matmul(kernels.data.reshape(Ci, Co * kF * kT), cols_g)
        dx = dx.reshape(B, Ci, F, T)
        dk = np.matmul(xd.reshape(B, Ci, F * T),
                       cols_g.transpose(0, 2, 1)).sum(axis=0)
        dk = dk.reshape(kernels.shape)
        if squeeze:
            dx = dx[0]
        grads = [dx, dk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return make_op(y[0] if squeeze else y, parents, vjp)


# ---------------------------------------------------------------------------
# batch normalization

class RunningStats:
    """Exponential running mean/variance buffers for one normalized axis."""

    __slots__ = ("mean", "var")

    def __init__(self, num_features: int, dtype=np.float32):
        self.mean = np.zeros(num_features, dtype=dtype)
        self.var = np.ones(num_features, dtype=dtype)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray, momentum: float):
        self.mean += momentum * (batch_mean - self.mean)
        self.var += momentum * (batch_var - self.var)

    def astype(self, dtype) -> "RunningStats":
        out = RunningStats(self.mean.shape[0], dtype)
        out.mean[:] = self.mean
        out.var[:] = self.var
        return out


def batch_norm(x, scale, shift, stats: RunningStats, training: bool,
               eps: float = 1e-5, momentum: float = 0.1, axis: int = -1) -> Tensor:
    """Normalize over every axis except ``axis``; affine scale/shift per feature.

    Train mode uses batch statistics (biased variance) and nudges the running
    buffers; eval mode uses the running buffers, which start at mean 0 / var 1.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    ax = axis if axis >= 0 else x.ndim + axis
    n = x.shape[ax]
    if scale.shape != (n,) or shift.shape != (n,):
        raise DimensionError(
            f"batch_norm: scale/shift must have shape ({n},) for axis {axis}, "
            f"got {scale.shape} and {shift.shape}")
    bshape = [1] * x.ndim
    bshape[ax] = n
    reduce_axes = tuple(i for i in range(x.ndim) if i != ax)
    gamma = scale.data.reshape(bshape)
    beta = shift.data.reshape(bshape)

    if training:
        m = x.data.mean(axis=reduce_axes, keepdims=True)
        xc = x.data - m
        v = np.mean(xc * xc, axis=reduce_axes, keepdims=True)
        stats.update(m.reshape(-1), v.reshape(-1), momentum)
        inv = 1.0 / np.sqrt(v + np.asarray(eps, dtype=x.dtype))
        xhat = xc * inv
        y = gamma * xhat + beta

        def vjp(g):
            dbeta = g.sum(axis=reduce_axes)
            dgamma = (g * xhat).sum(axis=reduce_axes)
            gx = g * gamma
            dx = inv * (gx - gx.mean(axis=reduce_axes, keepdims=True)
                        - xhat * np.mean(gx * xhat, axis=reduce_axes, keepdims=True))
            return dx, dgamma, dbeta

        return make_op(y, (x, scale, shift), vjp)

    m = stats.mean.reshape(bshape).astype(x.dtype)
    inv = (1.0 / np.sqrt(stats.var.reshape(bshape)
                         + np.asarray(eps, dtype=x.dtype))).astype(x.dtype)
    xhat = (x.data - m) * inv
    y = gamma * xhat + beta

    def vjp_eval(g):
        return (g * (gamma * inv),
                (g * xhat).sum(axis=reduce_axes),
                g.sum(axis=reduce_axes))

    return make_op(y, (x, scale, shift), vjp_eval)


# ---------------------------------------------------------------------------
# latent-source mixing

def latent_mix(weights, values) -> Tensor:
    """Weighted sum over the latent-source axis.

    Unbatched: weights [S], values [S, ...] -> [...].
    Batched: weights [B, S], values [S, B, ...] -> [B, ...].
    """
    weights, values = as_tensor(weights), as_tensor(values)
    wd, vd = weights.data, values.data
    S = vd.shape[0]
    if weights.ndim == 1:
        if wd.shape[0] != S:
            raise DimensionError(
                f"latent_mix: operand 'weights' has {wd.shape[0]} entries but "
                f"operand 'values' has {S} latent sources")
        # fold in weight-sorted order: permuting (w_i, V_i) pairs together then
        # leaves the accumulation sequence, hence the bits, unchanged
        order = np.argsort(wd, kind="stable")
        y = wd[order[0]] * vd[order[0]]
        for i in order[1:]:
            y += wd[i] * vd[i]

        def vjp(g):
            g1 = g.reshape(-1)
            return vd.reshape(S, -1) @ g1, np.multiply.outer(wd, g1).reshape(vd.shape)

        return make_op(y, (weights, values), vjp)

    if weights.ndim == 2:
        Bq, Sq = wd.shape
        if Sq != S or vd.ndim < 2 or vd.shape[1] != Bq:
            raise DimensionError(
                f"latent_mix: operand 'weights' {wd.shape} inconsistent with "
                f"operand 'values' {vd.shape}")
        v3 = vd.reshape(S, Bq, -1)
        y = np.einsum("bs,sbr->br", wd, v3).reshape((Bq,) + vd.shape[2:])

        def vjp(g):
            g3 = g.reshape(Bq, -1)
            dw = np.einsum("br,sbr->bs", g3, v3)
            dv = np.einsum("bs,br->sbr", wd, g3).reshape(vd.shape)
            return dw, dv

        return make_op(y, (weights, values), vjp)

    raise DimensionError("latent_mix: operand 'weights' must be 1-D or 2-D")


# ---------------------------------------------------------------------------
# operator sugar on Tensor

Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(self, other)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(_coerce(other, self), self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(self, other)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda self, other: div(_coerce(other, self), self)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
Tensor.sum = sum_
Tensor.mean = mean
Tensor.reshape = reshape
