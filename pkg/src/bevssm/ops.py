"""Differentiable primitives: forward rules plus hand-written backward closures.

Every function here follows the same pattern: validate, compute with numpy,
wrap the result in a :class:`~bevssm.autodiff.Tensor`, and (only if a tape is
active) record a closure that maps the output cotangent to one cotangent per
input.  Python scalars and bare arrays are accepted anywhere a tensor is and
are treated as constants.

The module ends by installing the arithmetic operators on ``Tensor`` so user
code can write ``a + b * c`` instead of nested calls.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, active_tape
from .errors import ConfigError, DimensionError

__all__ = [
    "as_tensor", "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt",
    "absolute", "sigmoid", "silu", "softplus", "sin", "cos", "sum_", "mean_",
    "cumsum", "reshape", "transpose", "concat", "narrow", "take_rows",
    "take_along_last", "matmul", "softmax", "log_softmax", "layer_norm",
    "conv2d", "depthwise_causal_conv1d", "bilinear_sample", "dropout",
    "decay_matrix", "record_op",
]


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap ``x`` in a Tensor (no copy when already one and dtype matches)."""
    if isinstance(x, Tensor):
        if dtype is None or x.dtype == np.dtype(dtype):
            return x
        return Tensor(x.data, dtype=dtype)
    return Tensor(x, dtype=dtype)


def record_op(name, inputs, out, vjp):
    """Record an op on the active tape, if any, and return ``out``."""
    tape = active_tape()
    if tape is not None:
        tape.record(name, inputs, out, vjp)
    return out


def _pair(a, b):
    """Coerce a binary op's operands to Tensors without silent upcasting."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return Tensor(a), Tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op("add", (a, b), out, vjp)


def sub(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record_op("sub", (a, b), out, vjp)


def mul(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return record_op("mul", (a, b), out, vjp)


def div(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data / b.data)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return record_op("div", (a, b), out, vjp)


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.data)
    return record_op("neg", (a,), out, lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    y = out.data
    return record_op("exp", (a,), out, lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return record_op("log", (a,), out, lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))
    y = out.data
    return record_op("sqrt", (a,), out, lambda g: (g * (0.5 / y),))


def absolute(a):
    """|a|, with the subgradient at 0 taken as 0."""
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    return record_op("abs", (a,), out, lambda g: (g * np.sign(a.data),))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # split by sign for stability; exp never sees a large positive argument
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(x.dtype, copy=False)
    out = Tensor(y)
    return record_op("sigmoid", (a,), out, lambda g: (g * y * (1.0 - y),))


def silu(a):
    """x * sigmoid(x)."""
    a = as_tensor(a)
    x = a.data
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))
    s = s.astype(x.dtype, copy=False)
    out = Tensor(x * s)

    def vjp(g):
        return (g * (s * (1.0 + x * (1.0 - s))),)

    return record_op("silu", (a,), out, vjp)


def softplus(a):
    """log(1 + exp(x)) computed without overflow."""
    a = as_tensor(a)
    x = a.data
    out = Tensor(np.logaddexp(0.0, x).astype(x.dtype, copy=False))

    def vjp(g):
        s = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))
        return (g * s,)

    return record_op("softplus", (a,), out, vjp)


def sin(a):
    a = as_tensor(a)
    out = Tensor(np.sin(a.data))
    return record_op("sin", (a,), out, lambda g: (g * np.cos(a.data),))


def cos(a):
    a = as_tensor(a)
    out = Tensor(np.cos(a.data))
    return record_op("cos", (a,), out, lambda g: (-g * np.sin(a.data),))


# ---------------------------------------------------------------------------
# reductions and scans


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return record_op("sum", (a,), out, vjp)


def mean_(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape),)

    return record_op("mean", (a,), out, vjp)


def cumsum(a, axis: int = -1):
    a = as_tensor(a)
    out = Tensor(np.cumsum(a.data, axis=axis))

    def vjp(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rev,)

    return record_op("cumsum", (a,), out, vjp)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return record_op("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))
    return record_op("transpose", (a,), out, lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0):
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise DimensionError("concat needs at least one input")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return record_op("concat", ts, out, vjp)


def narrow(a, axis: int, start: int, length: int):
    """Contiguous slice ``a[..., start:start+length, ...]`` along ``axis``."""
    a = as_tensor(a)
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow [{start}:{start + length}] outside axis {axis} "
            f"of shape {a.shape}")
    key = tuple(slice(None) if i != axis else slice(start, start + length)
                for i in range(a.ndim))
    out = Tensor(a.data[key])

    def vjp(g):
        gz = np.zeros(a.shape, dtype=g.dtype)
        gz[key] = g
        return (gz,)

    return record_op("narrow", (a,), out, vjp)


def take_rows(a, index):
    """Gather rows along axis 0; repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(index)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise DimensionError(f"take_rows wants a 1-d integer index, got {idx.dtype} {idx.shape}")
    out = Tensor(a.data[idx])

    def vjp(g):
        gz = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(gz, idx, g)
        return (gz,)

    return record_op("take_rows", (a,), out, vjp)


def take_along_last(a, index):
    """out[..., i] = a[..., i, index[..., i]] for a 2-d ``a`` and 1-d index."""
    a = as_tensor(a)
    idx = np.asarray(index)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise DimensionError(
            f"take_along_last wants (n,k) values and (n,) index, "
            f"got {a.shape} and {idx.shape}")
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, idx])

    def vjp(g):
        gz = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(gz, (rows, idx), g)
        return (gz,)

    return record_op("take_along_last", (a, ), out, vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record_op("matmul", (a, b), out, vjp)


def softmax(a):
    """Softmax over the last axis (max-shifted for stability)."""
    a = as_tensor(a)
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    y = y.astype(x.dtype, copy=False)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return record_op("softmax", (a,), out, vjp)


def log_softmax(a):
    a = as_tensor(a)
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = (z - lse).astype(x.dtype, copy=False)
    out = Tensor(y)

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return record_op("log_softmax", (a,), out, vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalize over the last axis, then scale and shift.

    Composite of recorded primitives, so no bespoke backward rule is needed.
    """
    x = as_tensor(x)
    m = mean_(x, axis=-1, keepdims=True)
    xc = sub(x, m)
    var = mean_(mul(xc, xc), axis=-1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    return add(mul(mul(xc, inv), gamma), beta)


# ---------------------------------------------------------------------------
# convolution and sampling


def conv2d(x, kernel, bias=None, stride: int = 1, pad: int | None = None):
    """2-d cross-correlation on a single (H, W, C_in) image.

    ``kernel`` is (k, k, C_in, C_out) with odd k in {1, 3, 5}; default padding
    keeps the spatial size when stride is 1.  No kernel flip is performed.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d wants (H,W,Cin) and (k,k,Cin,Cout), got {x.shape} and {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh != kw or kh not in (1, 3, 5):
        raise ConfigError(f"kernel must be square with size in {{1,3,5}}, got {kh}x{kw}")
    if cin != x.shape[2]:
        raise DimensionError(
            f"kernel expects {cin} input channels, image has shape {x.shape}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if pad is None:
        pad = (kh - 1) // 2

    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    hp, wp, _ = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d output would be empty: image {x.shape}, kernel {kh}, "
            f"stride {stride}, pad {pad}")
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (ho, wo, kh, kw, cin), (s0 * stride, s1 * stride, s0, s1, s2))
    y = np.tensordot(win, kernel.data, axes=((2, 3, 4), (0, 1, 2)))
    y = y.astype(x.dtype, copy=False)

    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"bias shape {bias.shape} != ({cout},)")
        y = y + bias.data
    out = Tensor(y)

    def vjp(g):
        gk = np.tensordot(win, g, axes=((0, 1), (0, 1)))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = g @ kernel.data[i, j].T  # (ho, wo, cin)
                gxp[i:i + ho * stride:stride, j:j + wo * stride:stride] += patch
        gx = gxp[pad:hp - pad, pad:wp - pad] if pad else gxp
        grads = [gx, gk.astype(kernel.dtype, copy=False)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record_op("conv2d", inputs, out, vjp)


def depthwise_causal_conv1d(x, weight, bias=None):
    """Per-channel causal convolution along the second-to-last axis.

    ``x`` is (..., T, C) and ``weight`` is (K, C); position t sees inputs
    t-K+1 .. t (zero padded on the left), so no future leakage is possible.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    if weight.ndim != 2:
        raise DimensionError(f"weight must be (K, C), got {weight.shape}")
    k, c = weight.shape
    if x.ndim < 2 or x.shape[-1] != c:
        raise DimensionError(
            f"input {x.shape} incompatible with {c}-channel depthwise kernel")
    t = x.shape[-2]
    padw = [(0, 0)] * (x.ndim - 2) + [(k - 1, 0), (0, 0)]
    xp = np.pad(x.data, padw)
    y = np.zeros_like(x.data)
    for j in range(k):
        y += weight.data[j] * xp[..., j:j + t, :]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c,):
            raise DimensionError(f"bias shape {bias.shape} != ({c},)")
        y = y + bias.data
    out = Tensor(y)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros(weight.shape, dtype=weight.dtype)
        batch_axes = tuple(range(x.ndim - 2)) + (x.ndim - 2,)
        for j in range(k):
            gxp[..., j:j + t, :] += weight.data[j] * g
            gw[j] = (xp[..., j:j + t, :] * g).sum(axis=batch_axes)
        gx = gxp[..., k - 1:, :]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=batch_axes))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op("causal_conv1d", inputs, out, vjp)


def bilinear_sample(grid, points):
    """Bilinearly sample a (H, W, C) grid at fractional (row, col) points.

    ``points`` is (M, 2) in cell units where integer coordinates sit on cell
    centers.  Corners falling outside the grid contribute zeros, so features
    fade smoothly to zero at the border.  Both operands receive gradients.
    """
    grid = as_tensor(grid)
    points = as_tensor(points)
    if grid.ndim != 3 or points.ndim != 2 or points.shape[1] != 2:
        raise DimensionError(
            f"bilinear_sample wants (H,W,C) and (M,2), got {grid.shape} and {points.shape}")
    h, w, c = grid.shape
    u = points.data[:, 0]
    v = points.data[:, 1]
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]

    corners = []
    for du, dv in ((0, 0), (0, 1), (1, 0), (1, 1)):
        cu, cv = u0 + du, v0 + dv
        ok = (cu >= 0) & (cu < h) & (cv >= 0) & (cv < w)
        val = np.zeros((len(u), c), dtype=grid.dtype)
        val[ok] = grid.data[cu[ok], cv[ok]]
        corners.append((cu, cv, ok, val))
    (v00, v01, v10, v11) = (corners[i][3] for i in range(4))
    w00 = (1 - fu) * (1 - fv)
    w01 = (1 - fu) * fv
    w10 = fu * (1 - fv)
    w11 = fu * fv
    out = Tensor((w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11)
                 .astype(grid.dtype, copy=False))

    def vjp(g):
        gm = np.zeros(grid.shape, dtype=g.dtype)
        for (cu, cv, ok, _), wc in zip(corners, (w00, w01, w10, w11)):
            contrib = (wc * g)[ok]
            np.add.at(gm, (cu[ok], cv[ok]), contrib)
        du_val = (v10 - v00) * (1 - fv) + (v11 - v01) * fv
        dv_val = (v01 - v00) * (1 - fu) + (v11 - v10) * fu
        gp = np.stack([(g * du_val).sum(axis=1), (g * dv_val).sum(axis=1)], axis=1)
        return gm, gp

    return record_op("bilinear_sample", (grid, points), out, vjp)


def dropout(x, p: float, train: bool, seed: int):
    """Inverted dropout: scale survivors by 1/(1-p) in training, identity in eval."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= p)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale
    out = Tensor(x.data * mask)
    return record_op("dropout", (x,), out, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# decay products for state-space kernels


def decay_matrix(la):
    """Lower-triangular matrix of cumulative decay products.

    For log-decays ``la`` with trailing axis T, the output has trailing shape
    (T, T) with entry ``[t, i] = exp(la[i+1] + ... + la[t])`` for t >= i
    (ones on the diagonal, zeros above).  Segment sums are accumulated in
    float64 regardless of input dtype, which keeps long products accurate
    where a chain of float32 multiplies would underflow or drift.
    """
    la = as_tensor(la)
    t = la.shape[-1]
    cs = np.cumsum(la.data.astype(np.float64), axis=-1)
    seg = cs[..., :, None] - cs[..., None, :]
    tri = np.tril(np.ones((t, t), dtype=bool))
    dmat = np.exp(np.where(tri, seg, -np.inf))
    out = Tensor(dmat.astype(la.dtype, copy=False))

    def vjp(g):
        gd = np.asarray(g, dtype=np.float64) * dmat
        # d out[t,i] / d la[k] = out[t,i] for i < k <= t, so the cotangent of
        # la[k] is the sum of gd over the rectangle t >= k, i <= k-1.
        pref = np.cumsum(gd, axis=-1)                      # sums over i <= column
        tail = np.flip(np.cumsum(np.flip(pref, axis=-2), axis=-2), axis=-2)
        gla = np.zeros(la.shape, dtype=np.float64)
        idx = np.arange(1, t)
        gla[..., 1:] = tail[..., idx, idx - 1]
        return (gla.astype(la.dtype, copy=False),)

    return record_op("decay_matrix", (la,), out, vjp)


# ---------------------------------------------------------------------------
# operator installation

Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
