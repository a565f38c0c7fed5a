"""Differentiable operations over :class:`~textspot.engine.tensor.Tensor`.

Each op computes its result eagerly with numpy and registers a backward
closure on the active tape. Elementwise ops follow standard numpy
broadcasting; gradients are un-broadcast (summed) back to the operand
shapes. Reductions rely on numpy's deterministic pairwise summation, so
identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import numba
import numpy as np

from .tensor import Tensor, as_tensor, check_same_dtype, record


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(op_name, a, b, fwd, bwd_a, bwd_b, check=True):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    check_same_dtype(a, b)
    try:
        with np.errstate(all="ignore"):
            out_data = fwd(a.data, b.data)
    except ValueError as e:
        raise ValueError(f"{op_name}: incompatible shapes {a.shape} and {b.shape}") from e
    out = Tensor(out_data, dtype=a.dtype)

    def backward_fn(g):
        return (
            _unbroadcast(bwd_a(g, a.data, b.data), a.shape),
            _unbroadcast(bwd_b(g, a.data, b.data), b.shape),
        )

    return record(op_name, (a, b), out, backward_fn, check=check)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g, check=False)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g, check=False)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x, check=False)


def div(a, b):
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def maximum(a, b):
    """Elementwise max; on ties the gradient routes to the first operand."""
    return _binary("maximum", a, b, np.maximum,
                   lambda g, x, y: g * (x >= y), lambda g, x, y: g * (x < y),
                   check=False)


def minimum(a, b):
    """Elementwise min; on ties the gradient routes to the first operand."""
    return _binary("minimum", a, b, np.minimum,
                   lambda g, x, y: g * (x <= y), lambda g, x, y: g * (x > y),
                   check=False)


def _unary(op_name, x, fwd, bwd, check=True):
    x = as_tensor(x)
    with np.errstate(all="ignore"):
        out = Tensor(fwd(x.data), dtype=x.dtype)
    return record(op_name, (x,), out, lambda g: (bwd(g, x.data, out.data),),
                  check=check)


def neg(x):
    return _unary("neg", x, lambda v: -v, lambda g, v, y: -g, check=False)


def relu(x):
    return _unary("relu", x, lambda v: np.maximum(v, 0), lambda g, v, y: g * (v > 0), check=False)


def exp(x):
    return _unary("exp", x, np.exp, lambda g, v, y: g * y)


def log(x):
    return _unary("log", x, np.log, lambda g, v, y: g / v)


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda g, v, y: g / (2.0 * y))


def absolute(x):
    return _unary("abs", x, np.abs, lambda g, v, y: g * np.sign(v), check=False)


def sin(x):
    return _unary("sin", x, np.sin, lambda g, v, y: g * np.cos(v), check=False)


def cos(x):
    return _unary("cos", x, np.cos, lambda g, v, y: -g * np.sin(v), check=False)


def power(x, p: float):
    """x**p for a constant exponent p."""
    p = float(p)
    return _unary(f"pow{p}", x, lambda v: v ** p,
                  lambda g, v, y: g * p * v ** (p - 1.0))


def sigmoid(x):
    def fwd(v):
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out

    return _unary("sigmoid", x, fwd, lambda g, v, y: g * y * (1.0 - y),
                  check=False)


def inverse_sigmoid(x, eps: float = 1e-6):
    """Logit of x with input clamped to [eps, 1-eps]; grad is 0 where clamped."""
    x = as_tensor(x)
    xc = np.clip(x.data, eps, 1.0 - eps)
    out = Tensor(np.log(xc) - np.log1p(-xc), dtype=x.dtype)
    inside = (x.data >= eps) & (x.data <= 1.0 - eps)

    def backward_fn(g):
        return (g * inside / (xc * (1.0 - xc)),)

    return record("inverse_sigmoid", (x,), out, backward_fn, check=False)


def clamp(x, lo: float, hi: float):
    """Clip to [lo, hi]; gradient passes through only inside the range."""
    x = as_tensor(x)
    out = Tensor(np.clip(x.data, lo, hi), dtype=x.dtype)
    inside = (x.data >= lo) & (x.data <= hi)
    return record("clamp", (x,), out, lambda g: (g * inside,), check=False)


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul requires ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), dtype=a.dtype)

    def backward_fn(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("matmul", (a, b), out, backward_fn)


def linear(x, w, b=None):
    """Affine map x @ w + b with w of shape [in, out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(x, axis: int):
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y, dtype=x.dtype)

    def backward_fn(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return record("softmax", (x,), out, backward_fn)


def log_softmax(x, axis: int):
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    ls = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = Tensor(ls, dtype=x.dtype)

    def backward_fn(g):
        return (g - np.exp(ls) * np.sum(g, axis=axis, keepdims=True),)

    return record("log_softmax", (x,), out, backward_fn)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    x = as_tensor(x)
    gamma = as_tensor(gamma, like=x)
    beta = as_tensor(beta, like=x)
    check_same_dtype(x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: gamma/beta must have shape ({d},)")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gamma.data * xhat + beta.data, dtype=x.dtype)

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = np.sum(g * xhat, axis=lead)
        dbeta = np.sum(g, axis=lead)
        dxhat = g * gamma.data
        m1 = np.mean(dxhat, axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return record("layer_norm", (x, gamma, beta), out, backward_fn)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims), dtype=x.dtype)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).astype(x.data.dtype, copy=False),)

    return record("sum", (x,), out, backward_fn)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.shape[ax]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), dtype=x.dtype)
    return record("reshape", (x,), out, lambda g: (g.reshape(x.shape),),
                  check=False)


def transpose(x, axes=None):
    x = as_tensor(x)
    out = Tensor(np.transpose(x.data, axes), dtype=x.dtype)
    inv = None if axes is None else np.argsort(axes)
    return record("transpose", (x,), out, lambda g: (np.transpose(g, inv),),
                  check=False)


def broadcast_to(x, shape):
    x = as_tensor(x)
    out = Tensor(np.broadcast_to(x.data, shape).copy(), dtype=x.dtype)
    return record("broadcast_to", (x,), out,
                  lambda g: (_unbroadcast(g, x.shape),), check=False)


def concat(tensors, axis: int = 0):
    tensors = [as_tensor(t) for t in tensors]
    check_same_dtype(*tensors)
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    out = Tensor(out_data, dtype=tensors[0].dtype)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", tuple(tensors), out, backward_fn, check=False)


def stack(tensors, axis: int = 0):
    tensors = [as_tensor(t) for t in tensors]
    check_same_dtype(*tensors)
    out = Tensor(np.stack([t.data for t in tensors], axis=axis), dtype=tensors[0].dtype)

    def backward_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record("stack", tuple(tensors), out, backward_fn, check=False)


def _is_basic_key(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice, type(Ellipsis), type(None)))
               for p in parts)


def getitem(x, key):
    x = as_tensor(x)
    out = Tensor(x.data[key], dtype=x.dtype)
    basic = _is_basic_key(key)

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[key] += g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return record("getitem", (x,), out, backward_fn, check=False)


def gather(x, indices, axis: int = 0):
    """Select slices of ``x`` along ``axis`` by an integer index array.

    Differentiable w.r.t. ``x`` only; selection indices carry no gradient.
    """
    x = as_tensor(x)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("gather indices must be integers")
    if idx.ndim != 1:
        raise ValueError("gather supports 1-D index arrays")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise IndexError(f"gather index out of range for axis {axis} of extent {x.shape[axis]}")
    moved = np.moveaxis(x.data, axis, 0)
    out = Tensor(np.moveaxis(moved[idx], 0, axis), dtype=x.dtype)

    def backward_fn(g):
        gm = np.zeros_like(moved)
        np.add.at(gm, idx, np.moveaxis(g, axis, 0))
        return (np.moveaxis(gm, 0, axis),)

    return record("gather", (x,), out, backward_fn, check=False)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0):
    """2-D strided convolution (cross-correlation) on a single image.

    x: [Cin, H, W], w: [Cout, Cin, kh, kw], b: [Cout] or None.
    """
    x = as_tensor(x)
    w = as_tensor(w, like=x)
    check_same_dtype(x, w)
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError(f"conv2d expects x[Cin,H,W], w[Cout,Cin,kh,kw]; got {x.shape}, {w.shape}")
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: channel mismatch, x has {cin}, w expects {cin_w}")
    st, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // st + 1
    wo = (wd + 2 * p - kw) // st + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: kernel larger than padded input")
    xpad = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    sc, sh, sw = xpad.strides
    windows = np.lib.stride_tricks.as_strided(
        xpad, shape=(cin, kh, kw, ho, wo), strides=(sc, sh, sw, sh * st, sw * st))
    col = windows.reshape(cin * kh * kw, ho * wo)
    w_mat = w.data.reshape(cout, cin * kh * kw)
    out_data = (w_mat @ col).reshape(cout, ho, wo)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b, like=x)
        check_same_dtype(x, b)
        if b.shape != (cout,):
            raise ValueError(f"conv2d: bias must have shape ({cout},)")
        out_data = out_data + b.data[:, None, None]
        inputs.append(b)
    out = Tensor(out_data, dtype=x.dtype)
    col = np.ascontiguousarray(col)

    def backward_fn(g):
        g_mat = g.reshape(cout, ho * wo)
        gw = (g_mat @ col.T).reshape(w.shape)
        gcol = (w_mat.T @ g_mat).reshape(cin, kh, kw, ho, wo)
        gxpad = np.zeros((cin, h + 2 * p, wd + 2 * p), dtype=x.data.dtype)
        for ki in range(kh):
            for kj in range(kw):
                gxpad[:, ki:ki + st * ho:st, kj:kj + st * wo:st] += gcol[:, ki, kj]
        gx = gxpad[:, p:p + h, p:p + wd] if p else gxpad
        if b is not None:
            return gx, gw, g.sum(axis=(1, 2))
        return gx, gw

    return record("conv2d", tuple(inputs), out, backward_fn)


@numba.njit(cache=True)
def _bilinear_fwd_kernel(fd, ld, out):
    """fd [B,H,W,C] channels-last, ld [B,S,2] normalized, out [B,S,C]."""
    b_n, h, w, c = fd.shape
    s_n = ld.shape[1]
    for b in range(b_n):
        for s in range(s_n):
            x = ld[b, s, 0] * w - 0.5
            y = ld[b, s, 1] * h - 0.5
            x0 = int(np.floor(x))
            y0 = int(np.floor(y))
            fx = x - x0
            fy = y - y0
            for dy in range(2):
                cy = y0 + dy
                if cy < 0 or cy >= h:
                    continue
                wy = fy if dy else 1.0 - fy
                for dx in range(2):
                    cx = x0 + dx
                    if cx < 0 or cx >= w:
                        continue
                    wgt = (fx if dx else 1.0 - fx) * wy
                    for ch in range(c):
                        out[b, s, ch] += wgt * fd[b, cy, cx, ch]


@numba.njit(cache=True)
def _bilinear_bwd_kernel(fd, ld, g, gf, gl, need_loc):
    """Accumulate grads: gf [B,H,W,C] for values, gl [B,S,2] for locations."""
    b_n, h, w, c = fd.shape
    s_n = ld.shape[1]
    for b in range(b_n):
        for s in range(s_n):
            x = ld[b, s, 0] * w - 0.5
            y = ld[b, s, 1] * h - 0.5
            x0 = int(np.floor(x))
            y0 = int(np.floor(y))
            fx = x - x0
            fy = y - y0
            dvx = 0.0
            dvy = 0.0
            for dy in range(2):
                cy = y0 + dy
                if cy < 0 or cy >= h:
                    continue
                wy = fy if dy else 1.0 - fy
                sy = 1.0 if dy else -1.0
                for dx in range(2):
                    cx = x0 + dx
                    if cx < 0 or cx >= w:
                        continue
                    wx = fx if dx else 1.0 - fx
                    sx = 1.0 if dx else -1.0
                    wgt = wx * wy
                    gdotv = 0.0
                    for ch in range(c):
                        go = g[b, s, ch]
                        gf[b, cy, cx, ch] += wgt * go
                        gdotv += go * fd[b, cy, cx, ch]
                    if need_loc:
                        dvx += gdotv * sx * wy
                        dvy += gdotv * sy * wx
            if need_loc:
                gl[b, s, 0] = dvx * w
                gl[b, s, 1] = dvy * h


def bilinear_sample(feature, locations):
    """Sample a feature map at fractional normalized locations.

    feature: [C, H, W] (or [B, C, H, W]); locations: [S, 2] (or [B, S, 2])
    with coordinates in the normalized [0, 1] x [0, 1] frame. Returns
    [S, C] (or [B, S, C]). Location (u, v) maps to pixel coordinates
    (u*W - 0.5, v*H - 0.5); samples beyond the pixel-center extent use
    zero padding. Differentiable w.r.t. both values and locations.
    """
    feature = as_tensor(feature)
    locations = as_tensor(locations, like=feature)
    check_same_dtype(feature, locations)
    batched = feature.ndim == 4
    if not batched:
        if feature.ndim != 3:
            raise ValueError(f"feature must be [C,H,W] or [B,C,H,W], got {feature.shape}")
        if locations.ndim != 2 or locations.shape[-1] != 2:
            raise ValueError(f"locations must be [S,2], got {locations.shape}")
    else:
        if locations.ndim != 3 or locations.shape[-1] != 2:
            raise ValueError(f"locations must be [B,S,2], got {locations.shape}")
        if locations.shape[0] != feature.shape[0]:
            raise ValueError("feature and locations batch sizes differ")
    fd = feature.data if batched else feature.data[None]
    ld = locations.data if batched else locations.data[None]
    bsz, c, h, w = fd.shape
    if h < 1 or w < 1 or c == 0:
        raise ValueError(f"degenerate feature map of shape {feature.shape}")
    fd_cl = np.ascontiguousarray(fd.transpose(0, 2, 3, 1))   # channels-last
    ld = np.ascontiguousarray(ld)
    out_data = np.zeros((bsz, ld.shape[1], c), dtype=fd.dtype)
    _bilinear_fwd_kernel(fd_cl, ld, out_data)
    out = Tensor(out_data if batched else out_data[0], dtype=feature.dtype)

    def backward_fn(g):
        gb = np.ascontiguousarray(g if batched else g[None])
        gf_cl = np.zeros_like(fd_cl)
        need_loc = locations.requires_grad
        gl = np.zeros((bsz, ld.shape[1], 2), dtype=fd.dtype)
        _bilinear_bwd_kernel(fd_cl, ld, gb, gf_cl, gl, need_loc)
        g_feature = gf_cl.transpose(0, 3, 1, 2)
        if not batched:
            g_feature = g_feature[0]
        g_loc = (gl if batched else gl[0]) if need_loc else None
        return g_feature, g_loc

    return record("bilinear_sample", (feature, locations), out, backward_fn)


# -- operator bindings on Tensor --------------------------------------

def _bind():
    Tensor.__add__ = lambda self, other: add(self, other)
    Tensor.__radd__ = lambda self, other: add(other, self)
    Tensor.__sub__ = lambda self, other: sub(self, other)
    Tensor.__rsub__ = lambda self, other: sub(other, self)
    Tensor.__mul__ = lambda self, other: mul(self, other)
    Tensor.__rmul__ = lambda self, other: mul(other, self)
    Tensor.__truediv__ = lambda self, other: div(self, other)
    Tensor.__rtruediv__ = lambda self, other: div(other, self)
    Tensor.__neg__ = lambda self: neg(self)
    Tensor.__pow__ = lambda self, p: power(self, p)
    Tensor.__matmul__ = lambda self, other: matmul(self, other)
    Tensor.__getitem__ = lambda self, key: getitem(self, key)
    Tensor.sum = lambda self, axis=None, keepdims=False: tsum(self, axis, keepdims)
    Tensor.mean = lambda self, axis=None, keepdims=False: tmean(self, axis, keepdims)
    Tensor.reshape = lambda self, *shape: reshape(
        self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    Tensor.transpose = lambda self, axes=None: transpose(self, axes)


_bind()
