"""Network building blocks.

Each block is a thin parameter container with a forward method built
from autodiff ops. Blocks are pure functions of (input, parameters):
nothing here holds state across calls, so concurrent forwards over
shared read-only parameters are safe. Construction and initialization
live in the model module; the containers accept ready-made tensors.

The feature path of the sparse expert block: a layer-normed input is
projected and split into a local branch and a context branch. The local
branch goes through a depthwise convolution; the context branch through
a strided-downsample / refine / mix / upsample pyramid. A pooled router
picks top-k low-rank experts, whose bilinear modulations of the two
branches are summed with the surviving softmax weights; the local
branch is added back as the residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError

LN_EPS = 1e-6


@dataclass
class RouteRecord:
    """Per-sample routing outcome for one layer.

    weights holds the full pre-mask softmax vector; chosen is its
    argmax (which equals the surviving expert for top-1 routing).
    """
    layer_index: int
    chosen: int
    weights: np.ndarray


class ConvLayer:
    """Convolution with fixed stride/padding/groups, optional bias."""

    def __init__(self, w, b=None, stride=1, padding=0, groups=1):
        self.w = w
        self.b = b
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, self.stride, self.padding, self.groups)

    def named_tensors(self, prefix):
        yield prefix + ".w", self.w
        if self.b is not None:
            yield prefix + ".b", self.b


class ChannelLinear:
    """Linear map over the channel axis of NCHW tensors."""

    def __init__(self, w, b=None):
        self.w = w
        self.b = b

    def __call__(self, x):
        return ad.channel_linear(x, self.w, self.b)

    def named_tensors(self, prefix):
        yield prefix + ".w", self.w
        if self.b is not None:
            yield prefix + ".b", self.b


class LayerNorm:
    def __init__(self, gamma, beta, eps=LN_EPS):
        self.gamma = gamma
        self.beta = beta
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)

    def named_tensors(self, prefix):
        yield prefix + ".gamma", self.gamma
        yield prefix + ".beta", self.beta


class LowRankExpert:
    """Rank-R bilinear modulation: expand(compress(a) * compress(b)).

    w1 and w2 map C -> R, w3 maps R -> C; all three are bias-free. The
    Hadamard product happens in the rank-R bottleneck, per pixel.
    """

    def __init__(self, w1, w2, w3, rank):
        if rank < 1:
            raise ConfigError("expert rank must be >= 1")
        if rank >= w1.shape[1]:
            raise ConfigError("expert rank %d must stay below channel count %d"
                              % (rank, w1.shape[1]))
        self.w1 = w1
        self.w2 = w2
        self.w3 = w3
        self.rank = rank

    def __call__(self, a, b):
        if a.shape != b.shape:
            raise ShapeError("expert inputs must share a shape")
        ca = ad.channel_linear(a, self.w1)
        cb = ad.channel_linear(b, self.w2)
        return ad.channel_linear(ad.mul(ca, cb), self.w3)

    def named_tensors(self, prefix):
        yield prefix + ".w1", self.w1
        yield prefix + ".w2", self.w2
        yield prefix + ".w3", self.w3


class Router:
    """Pooled features -> bias-free linear -> softmax over experts."""

    def __init__(self, w):
        self.w = w

    def __call__(self, pooled):
        return ad.softmax(ad.linear(pooled, self.w))

    @property
    def n_experts(self):
        return self.w.shape[0]

    def named_tensors(self, prefix):
        yield prefix + ".w", self.w


def route(x_local, router, topk, layer_index=0):
    """Compute masked expert weights and per-sample route records.

    Returns (masked_weights, records): masked_weights is the softmax
    output with all but the top-k entries per sample zeroed and NOT
    renormalized; the surviving entries keep their softmax values.
    Ties break to the lowest expert index.
    """
    if topk > router.n_experts:
        raise ConfigError("topk %d exceeds expert count %d" % (topk, router.n_experts))
    weights = router(ad.global_avg_pool(x_local))
    masked = ad.mask_top_k(weights, topk)
    records = []
    for s in range(weights.shape[0]):
        row = np.array(weights.data[s], dtype=np.float64, copy=True)
        records.append(RouteRecord(layer_index=layer_index,
                                   chosen=int(np.argmax(row)),
                                   weights=row))
    return masked, records


class RankMixture:
    """Sparse mixture of low-rank experts over projected features."""

    def __init__(self, proj, proj_pw, local_dw, pyr_down, pyr_refine, pyr_linear,
                 experts, router, topk):
        ranks = [e.rank for e in experts]
        if any(b <= a for a, b in zip(ranks, ranks[1:])):
            raise ConfigError("expert ranks must be strictly increasing, got %s" % ranks)
        if len(experts) != router.n_experts:
            raise ConfigError("router width %d != expert count %d"
                              % (router.n_experts, len(experts)))
        if not 1 <= topk <= len(experts):
            raise ConfigError("topk %d outside [1, %d]" % (topk, len(experts)))
        self.proj = proj
        self.proj_pw = proj_pw
        self.local_dw = local_dw
        self.pyr_down = pyr_down        # list of stride-2 depthwise convs
        self.pyr_refine = pyr_refine
        self.pyr_linear = pyr_linear
        self.experts = experts
        self.router = router
        self.topk = topk

    @property
    def recursion(self):
        return len(self.pyr_down)

    def context_pyramid(self, x_b):
        """Downsample t times, refine, mix channels, upsample back."""
        h, w = x_b.shape[2], x_b.shape[3]
        if h < 2 ** self.recursion or w < 2 ** self.recursion:
            raise ConfigError("spatial dims %dx%d too small for %d stride-2 steps"
                              % (h, w, self.recursion))
        p = x_b
        for down in self.pyr_down:
            p = down(p)
        p = self.pyr_refine(p)
        p = self.pyr_linear(p)
        return ad.resize_nearest(p, h, w)

    def forward(self, x, mode="train", layer_index=0):
        if mode not in ("train", "infer"):
            raise ConfigError("mode must be 'train' or 'infer', got %r" % mode)
        c = x.shape[1]
        h = self.proj_pw(self.proj(x))
        x_a = ad.slice_channels(h, 0, c)
        x_b = ad.slice_channels(h, c, 2 * c)
        local = self.local_dw(x_a)
        context = self.context_pyramid(x_b)
        masked, records = route(local, self.router, self.topk, layer_index)

        if mode == "train":
            cols = list(range(len(self.experts)))
        else:
            live = np.any(masked.data != 0.0, axis=0)
            cols = [i for i in range(len(self.experts)) if live[i]]
        parts = [self.experts[i](local, context) for i in cols]
        mixed = ad.weighted_sum(parts, masked, cols)
        return ad.add(mixed, local), records

    def named_tensors(self, prefix):
        yield from self.proj.named_tensors(prefix + ".proj")
        yield from self.proj_pw.named_tensors(prefix + ".proj_pw")
        yield from self.local_dw.named_tensors(prefix + ".local")
        for j, down in enumerate(self.pyr_down):
            yield from down.named_tensors(prefix + ".pyr.down%d" % j)
        yield from self.pyr_refine.named_tensors(prefix + ".pyr.refine")
        yield from self.pyr_linear.named_tensors(prefix + ".pyr.linear")
        for j, e in enumerate(self.experts):
            yield from e.named_tensors(prefix + ".expert%d" % j)
        yield from self.router.named_tensors(prefix + ".router")


class SpatialGate:
    """Large-kernel striped depthwise gate.

    One projection feeds a separable 1xk then kx1 depthwise pair; the
    other projection multiplies it elementwise. No output projection;
    the feed-forward block that follows does the channel mixing.
    """

    def __init__(self, w4, w5, stripe_h, stripe_v, kernel):
        if kernel % 2 == 0:
            raise ConfigError("striped kernel extent must be odd, got %d" % kernel)
        self.w4 = w4
        self.w5 = w5
        self.stripe_h = stripe_h    # 1 x k depthwise
        self.stripe_v = stripe_v    # k x 1 depthwise
        self.kernel = kernel

    def forward(self, x):
        gated = self.stripe_v(self.stripe_h(self.w4(x)))
        return ad.mul(gated, self.w5(x))

    def named_tensors(self, prefix):
        yield from self.w4.named_tensors(prefix + ".w4")
        yield from self.w5.named_tensors(prefix + ".w5")
        yield from self.stripe_h.named_tensors(prefix + ".stripe_h")
        yield from self.stripe_v.named_tensors(prefix + ".stripe_v")


class GatedFFN:
    """Split-gate feed-forward: one half gates, the other carries.

    fc_in widens C to r*C; the first half runs through a depthwise 3x3
    and a GELU and gates the second half; fc_out maps back to C.
    """

    def __init__(self, fc_in, gate_dw, fc_out):
        self.fc_in = fc_in
        self.gate_dw = gate_dw
        self.fc_out = fc_out

    def forward(self, x):
        h = self.fc_in(x)
        width = h.shape[1]
        if width % 2 != 0:
            raise ConfigError("gated feed-forward hidden width must be even")
        h1 = ad.slice_channels(h, 0, width // 2)
        h2 = ad.slice_channels(h, width // 2, width)
        gate = ad.gelu(self.gate_dw(h1))
        return self.fc_out(ad.mul(gate, h2))

    def named_tensors(self, prefix):
        yield from self.fc_in.named_tensors(prefix + ".fc_in")
        yield from self.gate_dw.named_tensors(prefix + ".gate")
        yield from self.fc_out.named_tensors(prefix + ".fc_out")


class RankBlock:
    """Pre-norm residual pair: rank mixture then gated feed-forward."""

    def __init__(self, norm1, mixture, norm2, ffn):
        self.norm1 = norm1
        self.mixture = mixture
        self.norm2 = norm2
        self.ffn = ffn

    def forward(self, x, mode="train", layer_index=0):
        y, records = self.mixture.forward(self.norm1(x), mode, layer_index)
        x = ad.add(x, y)
        x = ad.add(x, self.ffn.forward(self.norm2(x)))
        return x, records

    def named_tensors(self, prefix):
        yield from self.norm1.named_tensors(prefix + ".norm1")
        yield from self.mixture.named_tensors(prefix + ".mix")
        yield from self.norm2.named_tensors(prefix + ".norm2")
        yield from self.ffn.named_tensors(prefix + ".ffn")


class SpatialBlock:
    """Pre-norm residual pair: spatial gate then gated feed-forward."""

    def __init__(self, norm1, gate, norm2, ffn):
        self.norm1 = norm1
        self.gate = gate
        self.norm2 = norm2
        self.ffn = ffn

    def forward(self, x):
        x = ad.add(x, self.gate.forward(self.norm1(x)))
        x = ad.add(x, self.ffn.forward(self.norm2(x)))
        return x

    def named_tensors(self, prefix):
        yield from self.norm1.named_tensors(prefix + ".norm1")
        yield from self.gate.named_tensors(prefix + ".see")
        yield from self.norm2.named_tensors(prefix + ".norm2")
        yield from self.ffn.named_tensors(prefix + ".ffn")


class ResidualGroup:
    """One rank block followed by one spatial block."""

    def __init__(self, rank_block, spatial_block):
        self.rank_block = rank_block
        self.spatial_block = spatial_block

    def forward(self, x, mode="train", layer_index=0):
        x, records = self.rank_block.forward(x, mode, layer_index)
        x = self.spatial_block.forward(x)
        return x, records

    def named_tensors(self, prefix):
        yield from self.rank_block.named_tensors(prefix + ".rank")
        yield from self.spatial_block.named_tensors(prefix + ".spatial")
