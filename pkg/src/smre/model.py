"""Full network assembly, presets, complexity accounting, checkpoints.

The network is: shallow 3x3 conv on RGB -> N residual groups (each a
rank block then a spatial block) -> body 3x3 conv -> global residual
back to the shallow features -> 3x3 conv to 3*scale^2 channels ->
pixel shuffle to RGB at scale times the input resolution.

Accounting is analytic: parameter and multiply-accumulate counts are
derived from the configuration alone, never by instrumenting tensor
execution, so `count` stays fast at any resolution.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import numerics
from .blocks import (ChannelLinear, ConvLayer, GatedFFN, LayerNorm, LowRankExpert,
                     RankBlock, RankMixture, ResidualGroup, Router, SpatialBlock,
                     SpatialGate)
from .errors import (CheckpointFormatError, CheckpointTruncatedError,
                     CheckpointVersionError, ConfigError)

CHECKPOINT_MAGIC = b"SMRE"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """All architecture hyperparameters."""
    n_rg: int = 6
    channels: int = 36
    scale: int = 2
    n_experts: int = 3
    ranks: tuple = (2, 4, 8)
    topk: int = 1
    see_kernel: int = 11
    recursion: int = 2
    ffn_ratio: int = 2

    FIELDS = ("n_rg", "channels", "scale", "n_experts", "ranks", "topk",
              "see_kernel", "recursion", "ffn_ratio")

    def validate(self):
        if self.n_rg < 1:
            raise ConfigError("n_rg must be >= 1")
        if self.channels < 4:
            raise ConfigError("channels must be >= 4")
        if self.scale not in (2, 3, 4):
            raise ConfigError("scale must be one of 2, 3, 4, got %r" % (self.scale,))
        if self.n_experts < 1:
            raise ConfigError("n_experts must be >= 1")
        self.ranks = tuple(int(r) for r in self.ranks)
        if len(self.ranks) != self.n_experts:
            raise ConfigError("ranks %s must list one rank per expert (n=%d)"
                              % (self.ranks, self.n_experts))
        if any(b <= a for a, b in zip(self.ranks, self.ranks[1:])):
            raise ConfigError("ranks must be strictly increasing, got %s" % (self.ranks,))
        if self.ranks and self.ranks[-1] >= self.channels:
            raise ConfigError("largest rank %d must stay below channels %d"
                              % (self.ranks[-1], self.channels))
        if not 1 <= self.topk <= self.n_experts:
            raise ConfigError("topk %d outside [1, %d]" % (self.topk, self.n_experts))
        if self.see_kernel < 1 or self.see_kernel % 2 == 0:
            raise ConfigError("see_kernel must be odd and positive, got %d" % self.see_kernel)
        if self.recursion < 1:
            raise ConfigError("recursion must be >= 1")
        if self.ffn_ratio < 1 or (self.ffn_ratio * self.channels) % 2 != 0:
            raise ConfigError("ffn_ratio * channels must be even")
        return self

    def to_dict(self):
        d = {}
        for f in self.FIELDS:
            v = getattr(self, f)
            d[f] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.FIELDS)
        if unknown:
            raise ConfigError("unknown model config keys: %s" % sorted(unknown))
        kwargs = dict(d)
        if "ranks" in kwargs:
            kwargs["ranks"] = tuple(int(r) for r in kwargs["ranks"])
        return cls(**kwargs).validate()


PRESETS = {
    "T": dict(n_rg=6, channels=36, n_experts=3, ranks=(2, 4, 8), topk=1,
              see_kernel=11, recursion=2, ffn_ratio=2),
    "B": dict(n_rg=8, channels=48, n_experts=3, ranks=(2, 4, 8), topk=1,
              see_kernel=11, recursion=2, ffn_ratio=2),
    "L": dict(n_rg=16, channels=48, n_experts=3, ranks=(2, 4, 8), topk=1,
              see_kernel=11, recursion=1, ffn_ratio=2),
}


def preset_config(name, scale=2):
    if name not in PRESETS:
        raise ConfigError("unknown preset %r (choose from %s)" % (name, sorted(PRESETS)))
    return ModelConfig(scale=scale, **PRESETS[name]).validate()


# ---------------------------------------------------------------------------
# initialization


def _trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) with resampling of draws beyond two deviations."""
    x = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(x) > 2.0 * std
        if not bad.any():
            return x
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))


def _param(arr):
    return ad.Tensor(arr, requires_grad=True)


class _Init:
    """Deterministic parameter factory; draw order is construction order."""

    def __init__(self, seed):
        self.rng = np.random.Generator(np.random.PCG64(int(seed)))

    def conv(self, cout, cg, kh, kw, stride=1, padding=0, groups=1, bias=True):
        bound = 1.0 / np.sqrt(cg * kh * kw)
        w = _param(self.rng.uniform(-bound, bound, size=(cout, cg, kh, kw)))
        b = _param(np.zeros(cout)) if bias else None
        return ConvLayer(w, b, stride=stride, padding=padding, groups=groups)

    def depthwise(self, c, kh, kw, stride=1, padding=0, bias=True):
        return self.conv(c, 1, kh, kw, stride=stride, padding=padding, groups=c, bias=bias)

    def channel_linear(self, cout, cin, bias=True):
        w = _param(_trunc_normal(self.rng, (cout, cin)))
        b = _param(np.zeros(cout)) if bias else None
        return ChannelLinear(w, b)

    def matrix(self, cout, cin):
        return _param(_trunc_normal(self.rng, (cout, cin)))

    def norm(self, c):
        return LayerNorm(_param(np.ones(c)), _param(np.zeros(c)))


def _build_ffn(init, c, ratio):
    hidden = ratio * c
    return GatedFFN(fc_in=init.channel_linear(hidden, c),
                    gate_dw=init.depthwise(hidden // 2, 3, 3, padding=1),
                    fc_out=init.channel_linear(hidden // 2, c))


def _build_rank_block(init, cfg):
    c = cfg.channels
    norm1 = init.norm(c)
    mixture = RankMixture(
        proj=init.conv(c, c, 3, 3, padding=1),
        proj_pw=init.conv(2 * c, c, 1, 1),
        local_dw=init.depthwise(c, 3, 3, padding=1),
        pyr_down=[init.depthwise(c, 3, 3, stride=2, padding=1)
                  for _ in range(cfg.recursion)],
        pyr_refine=init.depthwise(c, 3, 3, padding=1),
        pyr_linear=init.channel_linear(c, c),
        experts=[LowRankExpert(init.matrix(r, c), init.matrix(r, c),
                               init.matrix(c, r), r) for r in cfg.ranks],
        router=Router(init.matrix(cfg.n_experts, c)),
        topk=cfg.topk,
    )
    norm2 = init.norm(c)
    return RankBlock(norm1, mixture, norm2, _build_ffn(init, c, cfg.ffn_ratio))


def _build_spatial_block(init, cfg):
    c, k = cfg.channels, cfg.see_kernel
    norm1 = init.norm(c)
    gate = SpatialGate(
        w4=init.channel_linear(c, c),
        w5=init.channel_linear(c, c),
        stripe_h=init.depthwise(c, 1, k, padding=(0, (k - 1) // 2)),
        stripe_v=init.depthwise(c, k, 1, padding=((k - 1) // 2, 0)),
        kernel=k,
    )
    norm2 = init.norm(c)
    return SpatialBlock(norm1, gate, norm2, _build_ffn(init, c, cfg.ffn_ratio))


class Model:
    """Assembled super-resolution network."""

    def __init__(self, config, shallow, groups, body, upsampler):
        self.config = config
        self.shallow = shallow
        self.groups = groups
        self.body = body
        self.upsampler = upsampler

    def forward(self, x, mode="train"):
        """LR batch (N,3,H,W) -> (SR batch (N,3,H*s,W*s), route records)."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ConfigError("expected an (N,3,H,W) input, got %s" % (tuple(x.shape),))
        need = 2 ** self.config.recursion
        if x.shape[2] < need or x.shape[3] < need:
            raise ConfigError("input %dx%d too small for recursion depth %d"
                              % (x.shape[2], x.shape[3], self.config.recursion))
        shallow = self.shallow(x)
        h = shallow
        records = []
        for i, group in enumerate(self.groups):
            h, recs = group.forward(h, mode, layer_index=i)
            records.extend(recs)
        deep = ad.add(shallow, self.body(h))
        return ad.pixel_shuffle(self.upsampler(deep), self.config.scale), records

    def named_tensors(self):
        yield from self.shallow.named_tensors("shallow")
        for i, group in enumerate(self.groups):
            yield from group.named_tensors("rg%d" % i)
        yield from self.body.named_tensors("body")
        yield from self.upsampler.named_tensors("up")

    def parameters(self):
        return list(self.named_tensors())

    def zero_grad(self):
        for _, t in self.named_tensors():
            t.grad = None


def build(config, seed=0):
    """Deterministically initialize a model: same seed, same bits."""
    cfg = replace(config)
    cfg.validate()
    init = _Init(seed)
    c = cfg.channels
    shallow = init.conv(c, 3, 3, 3, padding=1)
    groups = [ResidualGroup(_build_rank_block(init, cfg), _build_spatial_block(init, cfg))
              for _ in range(cfg.n_rg)]
    body = init.conv(c, c, 3, 3, padding=1)
    upsampler = init.conv(3 * cfg.scale ** 2, c, 3, 3, padding=1)
    return Model(cfg, shallow, groups, body, upsampler)


def forward_sr(model, lr_image, mode="infer"):
    return model.forward(lr_image, mode)


# ---------------------------------------------------------------------------
# complexity accounting (analytic, execution-free)


@dataclass
class CostReport:
    params: int
    macs: int
    breakdown: dict = field(default_factory=dict)


class _Ledger:
    def __init__(self):
        self.breakdown = {}

    def add(self, name, params, macs):
        self.breakdown[name] = (int(params), int(macs))

    def conv(self, name, cout, cg, kh, kw, out_h, out_w, bias=True):
        per_px = cout * cg * kh * kw
        self.add(name, per_px + (cout if bias else 0), per_px * out_h * out_w)

    def linear(self, name, cout, cin, positions, bias=True, count_macs=True):
        self.add(name, cout * cin + (cout if bias else 0),
                 cout * cin * positions if count_macs else 0)

    def norm(self, name, c):
        self.add(name, 2 * c, 0)

    def report(self):
        params = sum(p for p, _ in self.breakdown.values())
        macs = sum(m for _, m in self.breakdown.values())
        return CostReport(params=params, macs=macs, breakdown=dict(self.breakdown))


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def cost_report(config, out_h, out_w, mode="sparse", routed_ranks=None):
    """Exact parameter and MAC counts at a stated output resolution.

    MACs cover convolutions and linear maps only, at their actual
    tensor shapes; biases, norms, softmax, and elementwise work are
    excluded. In sparse mode each mixture layer counts topk experts at
    the largest configured ranks (a static upper bound, since routing
    is input-dependent); dense mode counts every expert. routed_ranks,
    a per-layer list of rank lists, overrides the expert schedule for
    dynamic per-image counts.
    """
    cfg = replace(config)
    cfg.validate()
    if mode not in ("sparse", "dense"):
        raise ConfigError("mode must be 'sparse' or 'dense', got %r" % mode)
    out_h, out_w = int(out_h), int(out_w)
    if out_h % cfg.scale or out_w % cfg.scale:
        raise ConfigError("output %dx%d not divisible by scale %d"
                          % (out_h, out_w, cfg.scale))
    h, w = out_h // cfg.scale, out_w // cfg.scale
    c, k, t = cfg.channels, cfg.see_kernel, cfg.recursion
    hidden = cfg.ffn_ratio * c
    led = _Ledger()

    led.conv("shallow", c, 3, 3, 3, h, w)
    for i in range(cfg.n_rg):
        rb = "rg%d.rank" % i
        led.norm(rb + ".norm1", c)
        led.conv(rb + ".mix.proj", c, c, 3, 3, h, w)
        led.conv(rb + ".mix.proj_pw", 2 * c, c, 1, 1, h, w)
        led.conv(rb + ".mix.local", c, 1, 3, 3, h, w)
        ph, pw = h, w
        for j in range(t):
            ph, pw = _conv_out(ph, 3, 2, 1), _conv_out(pw, 3, 2, 1)
            led.conv(rb + ".mix.pyr.down%d" % j, c, 1, 3, 3, ph, pw)
        led.conv(rb + ".mix.pyr.refine", c, 1, 3, 3, ph, pw)
        led.linear(rb + ".mix.pyr.linear", c, c, ph * pw)
        if routed_ranks is not None:
            counted = set(routed_ranks[i])
        elif mode == "dense":
            counted = set(cfg.ranks)
        else:
            counted = set(sorted(cfg.ranks)[-cfg.topk:])
        for j, r in enumerate(cfg.ranks):
            per_px = 3 * r * c
            led.add(rb + ".mix.expert%d" % j, per_px,
                    per_px * h * w if r in counted else 0)
        led.linear(rb + ".mix.router", cfg.n_experts, c, 1, bias=False)
        led.norm(rb + ".norm2", c)
        led.linear(rb + ".ffn.fc_in", hidden, c, h * w)
        led.conv(rb + ".ffn.gate", hidden // 2, 1, 3, 3, h, w)
        led.linear(rb + ".ffn.fc_out", c, hidden // 2, h * w)

        sb = "rg%d.spatial" % i
        led.norm(sb + ".norm1", c)
        led.linear(sb + ".see.w4", c, c, h * w)
        led.linear(sb + ".see.w5", c, c, h * w)
        led.conv(sb + ".see.stripe_h", c, 1, 1, k, h, w)
        led.conv(sb + ".see.stripe_v", c, 1, k, 1, h, w)
        led.norm(sb + ".norm2", c)
        led.linear(sb + ".ffn.fc_in", hidden, c, h * w)
        led.conv(sb + ".ffn.gate", hidden // 2, 1, 3, 3, h, w)
        led.linear(sb + ".ffn.fc_out", c, hidden // 2, h * w)

    led.conv("body", c, c, 3, 3, h, w)
    led.conv("up", 3 * cfg.scale ** 2, c, 3, 3, h, w)
    return led.report()


def count_params(model):
    """Exact scalar parameter count by enumerating live tensors."""
    return int(sum(t.size for _, t in model.named_tensors()))


def count_macs(config, out_h, out_w, mode="sparse"):
    return cost_report(config, out_h, out_w, mode).macs


# ---------------------------------------------------------------------------
# checkpoints


def _config_header_lines(config):
    lines = []
    for f in ModelConfig.FIELDS:
        v = getattr(config, f)
        if isinstance(v, tuple):
            v = ",".join(str(int(x)) for x in v)
        lines.append("config.%s = %s" % (f, v))
    return lines


def save_checkpoint(model, path):
    """Write the model to the binary container format.

    Layout: magic "SMRE", little-endian u32 format version, u64 header
    byte length, UTF-8 header text (config lines then one tensor line
    per parameter: name, dtype, shape, blob offset, byte count), then
    the raw little-endian tensor blobs in directory order.
    """
    lines = _config_header_lines(model.config)
    blobs = []
    offset = 0
    for name, tensor in model.named_tensors():
        data = np.ascontiguousarray(tensor.data)
        le = data.dtype.newbyteorder("<")
        raw = data.astype(le, copy=False).tobytes()
        shape = ",".join(str(s) for s in data.shape)
        lines.append("tensor %s %s %s %d %d" % (name, le.str, shape, offset, len(raw)))
        blobs.append(raw)
        offset += len(raw)
    header = ("\n".join(lines) + "\n").encode("utf-8")
    # write-then-rename so a failure mid-save never clobbers the
    # previous checkpoint
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, str(path))


def _parse_header(text):
    config_d = {}
    directory = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("config."):
            try:
                key, value = line[len("config."):].split("=", 1)
            except ValueError:
                raise CheckpointFormatError("malformed config line: %r" % line)
            key, value = key.strip(), value.strip()
            if key == "ranks":
                config_d[key] = tuple(int(x) for x in value.split(","))
            else:
                config_d[key] = int(value)
        elif line.startswith("tensor "):
            parts = line.split()
            if len(parts) != 6:
                raise CheckpointFormatError("malformed tensor line: %r" % line)
            _, name, dtype, shape_s, off_s, nbytes_s = parts
            shape = tuple(int(s) for s in shape_s.split(","))
            directory.append((name, dtype, shape, int(off_s), int(nbytes_s)))
        else:
            raise CheckpointFormatError("unrecognized header line: %r" % line)
    return config_d, directory


def load_checkpoint(path):
    """Read a checkpoint back into a freshly built model.

    Distinct failures: bad magic or unparseable header (format error),
    unsupported version (version error), blob section shorter than the
    directory promises (truncation error). No partial model escapes a
    failed load.
    """
    with open(str(path), "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a checkpoint: bad magic bytes")
    if len(raw) < 16:
        raise CheckpointTruncatedError("file ends inside the fixed header")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError("unsupported format version %d (expected %d)"
                                     % (version, CHECKPOINT_VERSION))
    header_len = struct.unpack("<Q", raw[8:16])[0]
    if 16 + header_len > len(raw):
        raise CheckpointTruncatedError("header length %d overruns the file" % header_len)
    try:
        text = raw[16:16 + header_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError("header is not valid UTF-8: %s" % exc)
    config_d, directory = _parse_header(text)
    try:
        config = ModelConfig.from_dict(config_d)
    except (ConfigError, TypeError) as exc:
        raise CheckpointFormatError("invalid config in header: %s" % exc)

    blob_base = 16 + header_len
    model = build(config, seed=0)
    expected = dict(model.named_tensors())
    seen = set()
    for name, dtype_s, shape, off, nbytes in directory:
        if name not in expected:
            raise CheckpointFormatError("unexpected tensor %r in checkpoint" % name)
        if name in seen:
            raise CheckpointFormatError("duplicate tensor %r in checkpoint" % name)
        seen.add(name)
        start = blob_base + off
        if start + nbytes > len(raw):
            raise CheckpointTruncatedError("tensor %r blob extends past end of file" % name)
        dt = np.dtype(dtype_s)
        if dt.itemsize * int(np.prod(shape)) != nbytes:
            raise CheckpointFormatError("tensor %r shape/byte mismatch" % name)
        arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)),
                            offset=start).reshape(shape)
        target = expected[name]
        if target.data.shape != arr.shape:
            raise CheckpointFormatError("tensor %r shape %s does not match model %s"
                                        % (name, shape, tuple(target.data.shape)))
        target.data = arr.astype(numerics.active_dtype(), copy=True)
    missing = set(expected) - seen
    if missing:
        raise CheckpointFormatError("checkpoint is missing tensors: %s" % sorted(missing)[:5])
    return model
