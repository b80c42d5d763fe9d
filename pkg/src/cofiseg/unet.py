"""Convolutional encoder-decoder backbone producing multi-scale features.

The encoder halves spatial dims per level with strided convolutions and the
decoder mirrors it with trilinear-resize-plus-conv upsampling (a transposed
variant via zero interleaving is available behind ``upsample="transposed"``).
Every conv block is conv3d -> instance norm -> activation.  Instance
normalization is realized as row standardization over flattened spatial dims
followed by a learnable per-channel affine, so its gradient comes from the
layer_norm primitive.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError


@dataclass
class BackboneConfig:
    in_channels: int = 1
    levels: int = 3                      # number of downsamplings
    widths: tuple = (16, 32, 64, 128)    # one per level, length levels+1
    activation: str = "gelu"             # gelu | relu | identity
    norm: str = "instance"               # instance | none
    upsample: str = "resize"             # resize | transposed
    norm_eps: float = 1e-5

    def validate(self):
        if self.levels < 1:
            raise ConfigError(f"backbone needs >= 1 level, got {self.levels}")
        if len(self.widths) != self.levels + 1:
            raise ConfigError(
                f"widths {self.widths} must have levels+1={self.levels + 1} entries")
        if any(b < a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError(f"widths must be monotone non-decreasing: {self.widths}")
        if self.activation not in ("gelu", "relu", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.norm not in ("instance", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.upsample not in ("resize", "transposed"):
            raise ConfigError(f"unknown upsample mode {self.upsample!r}")


_ACTIVATIONS = {"gelu": ad.gelu, "relu": ad.relu, "identity": lambda x: x}


_NORM_CONST_CACHE = {}


def _norm_consts(d, dtype):
    key = (d, np.dtype(dtype).name)
    hit = _NORM_CONST_CACHE.get(key)
    if hit is None:
        hit = (ad.tensor(np.ones(d), dtype=dtype), ad.tensor(np.zeros(d), dtype=dtype))
        _NORM_CONST_CACHE[key] = hit
    return hit


def instance_norm(x, gain, bias, eps=1e-5):
    """Per-channel standardization over spatial dims, then affine (C,1) params."""
    c = x.shape[0]
    m = int(np.prod(x.shape[1:]))
    rows = ad.reshape(x, (c, m))
    ones, zeros = _norm_consts(m, x.dtype)
    normed = ad.layer_norm(rows, ones, zeros, eps=eps)
    normed = normed * gain + bias
    return ad.reshape(normed, x.shape)


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class ConvBlock:
    """conv3d -> instance norm -> activation, with learnable affine."""

    def __init__(self, name, c_in, c_out, rng, k=3, stride=1, cfg=None):
        self.name = name
        self.k = k
        self.stride = stride
        self.pad = k // 2
        cfg = cfg or BackboneConfig()
        self.act = _ACTIVATIONS[cfg.activation]
        self.norm = cfg.norm
        self.eps = cfg.norm_eps
        self.kernel = ad.tensor(
            he_normal(rng, (c_out, c_in, k, k, k), c_in * k ** 3), requires_grad=True)
        self.gain = ad.tensor(np.ones((c_out, 1)), requires_grad=True)
        self.bias = ad.tensor(np.zeros((c_out, 1)), requires_grad=True)

    def params(self):
        out = {f"{self.name}.kernel": self.kernel}
        if self.norm == "instance":
            out[f"{self.name}.gain"] = self.gain
            out[f"{self.name}.bias"] = self.bias
        return out

    def forward(self, x):
        y = ad.conv3d(x, self.kernel, stride=self.stride, pad=self.pad)
        if self.norm == "instance":
            y = instance_norm(y, self.gain, self.bias, eps=self.eps)
        return self.act(y)


class PointwiseConv:
    """1x1x1 convolution with bias, via flatten + matmul."""

    def __init__(self, name, c_in, c_out, rng, scale=None):
        self.name = name
        std = scale if scale is not None else np.sqrt(2.0 / c_in)
        self.weight = ad.tensor(
            rng.normal(0.0, std, size=(c_out, c_in)), requires_grad=True)
        self.bias = ad.tensor(np.zeros((c_out, 1)), requires_grad=True)

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def forward(self, x):
        c = x.shape[0]
        m = int(np.prod(x.shape[1:]))
        flat = ad.reshape(x, (c, m))
        out = ad.matmul(self.weight, flat) + self.bias
        return ad.reshape(out, (self.weight.shape[0],) + tuple(x.shape[1:]))


class Encoder:
    """Per level: two conv blocks, then a strided-conv downsampler."""

    def __init__(self, cfg: BackboneConfig, rng):
        cfg.validate()
        self.cfg = cfg
        self.blocks = []
        self.downs = []
        w = cfg.widths
        for lvl in range(cfg.levels + 1):
            c_in = cfg.in_channels if lvl == 0 else w[lvl]
            self.blocks.append([
                ConvBlock(f"enc.l{lvl}.b0", c_in, w[lvl], rng, cfg=cfg),
                ConvBlock(f"enc.l{lvl}.b1", w[lvl], w[lvl], rng, cfg=cfg),
            ])
            if lvl < cfg.levels:
                self.downs.append(
                    ConvBlock(f"enc.l{lvl}.down", w[lvl], w[lvl + 1], rng,
                              stride=2, cfg=cfg))

    def params(self):
        out = {}
        for pair in self.blocks:
            for b in pair:
                out.update(b.params())
        for d in self.downs:
            out.update(d.params())
        return out

    def forward(self, x):
        """Feature pyramid: one tensor per level, dims halved per level."""
        dims = x.shape[1:]
        div = 2 ** self.cfg.levels
        if any(d % div for d in dims):
            raise ConfigError(
                f"input dims {dims} must be divisible by 2^levels = {div}")
        feats = []
        cur = x
        for lvl in range(self.cfg.levels + 1):
            for b in self.blocks[lvl]:
                cur = b.forward(cur)
            feats.append(cur)
            if lvl < self.cfg.levels:
                cur = self.downs[lvl].forward(cur)
        return feats


class Decoder:
    """Mirror path: upsample, concat skip, two conv blocks per level."""

    def __init__(self, cfg: BackboneConfig, rng, bottleneck_channels=None):
        cfg.validate()
        self.cfg = cfg
        w = cfg.widths
        c_bot = bottleneck_channels or w[cfg.levels]
        self.ups = []
        self.blocks = []
        for lvl in range(cfg.levels - 1, -1, -1):
            c_src = c_bot if lvl == cfg.levels - 1 else w[lvl + 1]
            self.ups.append(ConvBlock(f"dec.l{lvl}.up", c_src, w[lvl], rng, cfg=cfg))
            self.blocks.append([
                ConvBlock(f"dec.l{lvl}.b0", 2 * w[lvl], w[lvl], rng, cfg=cfg),
                ConvBlock(f"dec.l{lvl}.b1", w[lvl], w[lvl], rng, cfg=cfg),
            ])

    def params(self):
        out = {}
        for u in self.ups:
            out.update(u.params())
        for pair in self.blocks:
            for b in pair:
                out.update(b.params())
        return out

    def forward(self, pyramid, bottleneck):
        """Returns decoder features per level, index 0 = full resolution."""
        if bottleneck.shape[1:] != pyramid[-1].shape[1:]:
            raise DimensionError(
                f"bottleneck dims {bottleneck.shape} do not match deepest level "
                f"{pyramid[-1].shape}")
        feats = [None] * self.cfg.levels
        cur = bottleneck
        for i, lvl in enumerate(range(self.cfg.levels - 1, -1, -1)):
            target = tuple(2 * d for d in cur.shape[1:])
            if self.cfg.upsample == "resize":
                up = ad.resize3d(cur, target, mode="trilinear")
            else:
                up = ad.zero_interleave(cur, 2)
            up = self.ups[i].forward(up)
            skip = pyramid[lvl]
            if skip.shape[1:] != up.shape[1:]:
                raise DimensionError(
                    f"skip at level {lvl} has dims {skip.shape}, upsampled path "
                    f"has {up.shape}")
            cur = ad.concat([up, skip], axis=0)
            for b in self.blocks[i]:
                cur = b.forward(cur)
            feats[lvl] = cur
        return feats


class SegHead:
    """Per-class logit maps from a feature grid: 1x1x1 conv to K+1 channels."""

    def __init__(self, name, c_in, n_classes, rng):
        self.proj = PointwiseConv(name, c_in, n_classes + 1, rng, scale=0.02)

    def params(self):
        return self.proj.params()

    def forward(self, feat):
        return self.proj.forward(feat)


def parameter_count(params):
    return int(sum(int(np.prod(t.shape)) for t in params.values()))
