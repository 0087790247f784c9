"""Reverse-mode automatic differentiation on dense numpy buffers.

Tensor wraps an ndarray plus an optional gradient buffer. Every op
returns a fresh Tensor carrying a backward closure and references to
its parents; Tensor.backward() walks that recorded graph in reverse
topological order and accumulates gradients additively. The op set is
exactly what the network needs: convolution (grouped, strided, padded),
linear maps over trailing or channel dimensions, layer norm, pixel
(un)shuffle, nearest-neighbour resize, global average pooling, softmax,
exact-erf GELU, elementwise arithmetic, reductions, top-k masking, a
per-sample weighted sum, and a 2-D DFT pair for the frequency loss.

Values are float64 in the verify profile and float32 in the fast
profile (see numerics). In the verify profile every op output is
checked for NaN/Inf; non-finite values are an error state, never data.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from . import numerics
from .errors import ConfigError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (inference, oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense N-dimensional array with optional gradient tracking.

    data is row-major and owned by the tensor; grad, when present, has
    the identical shape. Tensors produced by ops are immutable by
    convention: nothing in this module writes to data after creation,
    only to grad (inside backward).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=numerics.active_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return "Tensor(shape=%s, requires_grad=%s)" % (
            tuple(self.shape), self.requires_grad)

    # small amount of operator sugar used by the loss code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def backward(self):
        """Populate grad on every reachable requires_grad tensor.

        The receiver must hold exactly one element (a scalar loss).
        Accumulation across multiple uses of the same tensor is
        additive, matching the sum rule of differentiation.
        """
        if self.data.size != 1:
            raise ShapeError("backward requires a scalar loss tensor, got shape %s"
                             % (tuple(self.shape),))
        if not self.requires_grad:
            raise ShapeError("loss does not depend on any tracked tensor")

        # iterative post-order DFS over nodes that carry backward closures
        order = []
        seen = set()
        stack = [(self, False)]
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
                if p._backward_fn is not None and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            node._backward_fn(node.grad)


@dataclass
class ComplexPair:
    """Real/imaginary tensor pair returned by fft2d."""
    real: Tensor
    imag: Tensor


def _result(data, parents, backward_fn, op):
    if numerics.strict_checks() and not np.isfinite(data).all():
        raise FloatingPointError("%s produced non-finite values" % op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _require_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError("%s requires matching shapes, got %s vs %s"
                         % (op, tuple(a.shape), tuple(b.shape)))


# ---------------------------------------------------------------------------
# elementwise arithmetic and reductions


def add(a, b):
    _require_same_shape(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    _require_same_shape(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    """Hadamard (elementwise) product."""
    _require_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        _accum(a, g * bd)
        _accum(b, g * ad)

    return _result(ad * bd, (a, b), bw, "mul")


hadamard = mul


def scale(x, c):
    c = float(c)

    def bw(g):
        _accum(x, g * c)

    return _result(x.data * c, (x,), bw, "scale")


def neg(x):
    return scale(x, -1.0)


def abs_(x):
    sign = np.sign(x.data)

    def bw(g):
        _accum(x, g * sign)

    return _result(np.abs(x.data), (x,), bw, "abs")


def sum_(x):
    shape = x.shape

    def bw(g):
        _accum(x, np.broadcast_to(g, shape))

    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), bw, "sum")


def mean_(x):
    shape = x.shape
    n = float(x.data.size)

    def bw(g):
        _accum(x, np.broadcast_to(g / n, shape))

    return _result(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), bw, "mean")


# ---------------------------------------------------------------------------
# linear maps


def linear(x, weight, bias=None):
    """y = x @ weight.T + bias over the trailing dimension.

    x has shape (..., Cin), weight (Cout, Cin), bias (Cout,). Applied
    pointwise over all leading dimensions.
    """
    if weight.ndim != 2:
        raise ShapeError("linear weight must be 2-D, got %s" % (tuple(weight.shape),))
    cout, cin = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError("linear input trailing dim %d does not match Cin %d"
                         % (x.shape[-1], cin))
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("linear bias must have shape (%d,)" % cout)

    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    xshape = x.shape
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        x2 = x.data.reshape(-1, cin)
        _accum(x, (g2 @ weight.data).reshape(xshape))
        _accum(weight, g2.T @ x2)
        if bias is not None:
            _accum(bias, g2.sum(axis=0))

    return _result(y, parents, bw, "linear")


def channel_linear(x, weight, bias=None):
    """Linear map over the channel axis of an NCHW tensor.

    Equivalent to a 1x1 convolution: y[n,o,h,w] = sum_c W[o,c] x[n,c,h,w] + b[o].
    """
    if x.ndim != 4:
        raise ShapeError("channel_linear expects NCHW input, got %s" % (tuple(x.shape),))
    cout, cin = weight.shape
    if x.shape[1] != cin:
        raise ShapeError("channel_linear input has %d channels, weight expects %d"
                         % (x.shape[1], cin))
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("channel_linear bias must have shape (%d,)" % cout)

    y = np.einsum("nchw,oc->nohw", x.data, weight.data, optimize=True)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        _accum(x, np.einsum("nohw,oc->nchw", g, weight.data, optimize=True))
        _accum(weight, np.einsum("nohw,nchw->oc", g, x.data, optimize=True))
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    return _result(y, parents, bw, "channel_linear")


# ---------------------------------------------------------------------------
# convolution


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ConfigError("stride/padding pairs must have two entries")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Grouped 2-D cross-correlation with zero padding.

    x: (N, Cin, H, W); weight: (Cout, Cin/groups, kh, kw); bias: (Cout,).
    Output spatial dims follow floor((H + 2p - k)/stride) + 1. No kernel
    flip is applied (deep-learning convention).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight, got %s and %s"
                         % (tuple(x.shape), tuple(weight.shape)))
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    groups = int(groups)
    if groups < 1 or cin % groups != 0:
        raise ConfigError("groups=%d does not divide input channels %d" % (groups, cin))
    if cout % groups != 0:
        raise ConfigError("groups=%d does not divide output channels %d" % (groups, cout))
    if cg != cin // groups:
        raise ShapeError("weight expects %d channels per group, input provides %d"
                         % (cg, cin // groups))
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv2d bias must have shape (%d,)" % cout)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ConfigError("stride must be positive")
    hp, wp = h + 2 * ph, w + 2 * pw
    hout = (hp - kh) // sh + 1
    wout = (wp - kw) // sw + 1
    if hp < kh or wp < kw or hout < 1 or wout < 1:
        raise ShapeError("kernel %dx%d does not fit padded input %dx%d" % (kh, kw, hp, wp))

    og = cout // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    win = win.reshape(n, groups, cg, hout, wout, kh, kw)
    wg = weight.data.reshape(groups, og, cg, kh, kw)
    y = np.einsum("ngcxykl,gockl->ngoxy", win, wg, optimize=True)
    y = y.reshape(n, cout, hout, wout)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gr = g.reshape(n, groups, og, hout, wout)
        _accum(weight, np.einsum("ngcxykl,ngoxy->gockl", win, gr,
                                 optimize=True).reshape(cout, cg, kh, kw))
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.einsum("ngoxy,gockl->ngcxykl", gr, wg, optimize=True)
            gcols = gcols.reshape(n, cin, hout, wout, kh, kw)
            gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * hout:sh, j:j + sw * wout:sw] += gcols[:, :, :, :, i, j]
            _accum(x, gxp[:, :, ph:h + ph, pw:w + pw])

    return _result(y, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# normalization and shape rearrangement


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the channel axis independently at each location.

    x: (N, C, H, W); gamma, beta: (C,). Channel mean/variance are taken
    per (n, h, w) position, then an affine scale/shift is applied.
    """
    if x.ndim != 4:
        raise ShapeError("layer_norm expects NCHW input, got %s" % (tuple(x.shape),))
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("layer_norm gamma/beta must have shape (%d,)" % c)
    eps = float(eps)

    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    s = np.sqrt(var + eps)
    xhat = xc / s
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        ghat = g * gamma.data[None, :, None, None]
        m1 = ghat.mean(axis=1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=1, keepdims=True)
        _accum(x, (ghat - m1 - xhat * m2) / s)
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accum(beta, g.sum(axis=(0, 2, 3)))

    return _result(y, (x, gamma, beta), bw, "layer_norm")


def _shuffle_data(d, r):
    n, c, h, w = d.shape
    c2 = c // (r * r)
    out = d.reshape(n, c2, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return out.reshape(n, c2, h * r, w * r)


def _unshuffle_data(d, r):
    n, c, h, w = d.shape
    out = d.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return out.reshape(n, c * r * r, h // r, w // r)


def pixel_shuffle(x, r):
    """Rearrange r*r channel groups into an r-times larger plane.

    output(n, c, h*r+i, w*r+j) = input(n, c*r*r + i*r + j, h, w).
    """
    r = int(r)
    if x.ndim != 4:
        raise ShapeError("pixel_shuffle expects NCHW input")
    if r < 1 or x.shape[1] % (r * r) != 0:
        raise ShapeError("channel count %d not divisible by r^2=%d" % (x.shape[1], r * r))

    def bw(g):
        _accum(x, _unshuffle_data(g, r))

    return _result(np.ascontiguousarray(_shuffle_data(x.data, r)), (x,), bw, "pixel_shuffle")


def pixel_unshuffle(x, r):
    r = int(r)
    if x.ndim != 4:
        raise ShapeError("pixel_unshuffle expects NCHW input")
    if r < 1 or x.shape[2] % r != 0 or x.shape[3] % r != 0:
        raise ShapeError("spatial dims %s not divisible by r=%d" % (tuple(x.shape[2:]), r))

    def bw(g):
        _accum(x, _shuffle_data(g, r))

    return _result(np.ascontiguousarray(_unshuffle_data(x.data, r)), (x,), bw, "pixel_unshuffle")


def resize_nearest(x, out_h, out_w):
    """Nearest-neighbour resize; source index is floor(out * in / out)."""
    if x.ndim != 4:
        raise ShapeError("resize_nearest expects NCHW input")
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ShapeError("zero target size in resize_nearest")
    n, c, h, w = x.shape
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    y = x.data[:, :, rows[:, None], cols[None, :]]

    def bw(g):
        if not x.requires_grad:
            return
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
        _accum(x, gx)

    return _result(np.ascontiguousarray(y), (x,), bw, "resize_nearest")


def global_avg_pool(x):
    """Mean over all spatial positions per channel: (N,C,H,W) -> (N,C)."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects NCHW input")
    n, c, h, w = x.shape
    area = float(h * w)

    def bw(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / area, (n, c, h, w)))

    return _result(x.data.mean(axis=(2, 3)), (x,), bw, "global_avg_pool")


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(x):
    """Softmax along the last dimension, max-shifted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (g - dot))

    return _result(y, (x,), bw, "softmax")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact Gaussian-error-linear unit x * Phi(x) (erf form, no tanh fit)."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * phi_cdf

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        _accum(x, g * (phi_cdf + x.data * pdf))

    return _result(y, (x,), bw, "gelu")


# ---------------------------------------------------------------------------
# routing helpers


def mask_top_k(x, k):
    """Zero all but the k largest entries along the last dim, per row.

    Surviving entries keep their exact values (no renormalization).
    Ties break deterministically to the lowest index via a stable sort.
    """
    n = x.shape[-1]
    k = int(k)
    if not 1 <= k <= n:
        raise ConfigError("top-k k=%d outside [1, %d]" % (k, n))
    order = np.argsort(-x.data, axis=-1, kind="stable")
    mask = np.zeros_like(x.data)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)

    def bw(g):
        _accum(x, g * mask)

    return _result(x.data * mask, (x,), bw, "mask_top_k")


def weighted_sum(parts, weights, cols):
    """Per-sample weighted sum of NCHW tensors.

    parts[j] is weighted by weights[:, cols[j]] (one scalar per sample)
    and the results are accumulated in the order given. Entries of
    weights not referenced by cols receive zero gradient.
    """
    if len(parts) != len(cols):
        raise ShapeError("weighted_sum needs one column index per part")
    if len(parts) == 0:
        raise ShapeError("weighted_sum needs at least one part")
    n = parts[0].shape[0]
    if weights.ndim != 2 or weights.shape[0] != n:
        raise ShapeError("weights must be (N, n_experts)")
    for p in parts:
        _require_same_shape(p, parts[0], "weighted_sum")

    acc = np.zeros_like(parts[0].data)
    for p, c in zip(parts, cols):
        acc += weights.data[:, c][:, None, None, None] * p.data

    def bw(g):
        gw = np.zeros_like(weights.data)
        for p, c in zip(parts, cols):
            _accum(p, g * weights.data[:, c][:, None, None, None])
            gw[:, c] = (g * p.data).sum(axis=(1, 2, 3))
        _accum(weights, gw)

    return _result(acc, tuple(parts) + (weights,), bw, "weighted_sum")


def slice_channels(x, start, stop):
    """Contiguous channel slice [start, stop) of an NCHW tensor."""
    if x.ndim != 4:
        raise ShapeError("slice_channels expects NCHW input")
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError("channel slice [%d, %d) outside [0, %d)" % (start, stop, c))

    def bw(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        _accum(x, gx)

    return _result(x.data[:, start:stop].copy(), (x,), bw, "slice_channels")


# ---------------------------------------------------------------------------
# 2-D DFT


def fft2d(x):
    """Unnormalized 2-D DFT over the trailing two axes.

    X(u,v) = sum_{h,w} x(h,w) exp(-2*pi*i*(u*h/H + v*w/W)) per sample and
    channel. Returns a ComplexPair of real/imag tensors. The engine is
    numpy's pooled-FFT implementation, which is exact-algorithm
    (mixed-radix / Bluestein) for every size, not a padded radix-2.
    """
    if x.ndim != 4:
        raise ShapeError("fft2d expects NCHW input")
    h, w = x.shape[-2:]
    area = float(h * w)
    dt = x.data.dtype
    spec = np.fft.fft2(x.data, axes=(-2, -1))

    def bw_real(g):
        _accum(x, (area * np.fft.ifft2(g, axes=(-2, -1)).real).astype(dt, copy=False))

    def bw_imag(g):
        _accum(x, (-area * np.fft.ifft2(g, axes=(-2, -1)).imag).astype(dt, copy=False))

    re = _result(spec.real.astype(dt, copy=False), (x,), bw_real, "fft2d.real")
    im = _result(spec.imag.astype(dt, copy=False), (x,), bw_imag, "fft2d.imag")
    return ComplexPair(real=re, imag=im)
