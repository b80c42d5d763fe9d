"""Patch sequentialization and the transformer encoder stack.

A (C, D, H, W) feature grid is cut into P x P x P patches in lexicographic
(d, h, w) order, each flattened channel-major into a token of length P^3*C,
linearly projected, and offset by learnable positional embeddings.  Encoder
layers are pre-norm residual blocks: multi-head self-attention followed by
an MLP, with per-head projection matrices and 1/sqrt(d/h) dot-product
scaling.  The encoded tokens can be reassembled into a grid for the
convolutional decoder path.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError


@dataclass
class VitConfig:
    d_enc: int = 96
    n_layers: int = 4
    n_heads: int = 4
    patch: int = 1
    mlp_ratio: float = 4.0
    norm_eps: float = 1e-5
    activation: str = "gelu"   # gelu | relu
    init_std: float = 0.02

    def validate(self):
        if self.n_layers < 0:
            raise ConfigError(f"encoder layer count must be >= 0, got {self.n_layers}")
        if self.d_enc % self.n_heads:
            raise ConfigError(
                f"embedding width {self.d_enc} not divisible by {self.n_heads} heads")
        if self.patch < 1:
            raise ConfigError(f"patch size must be >= 1, got {self.patch}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")


def sequentialize(feat, patch):
    """Tokens (N, P^3*C) in lexicographic patch order; N = D*H*W / P^3."""
    c, d, h, w = feat.shape
    p = int(patch)
    if d % p or h % p or w % p:
        raise ConfigError(f"dims {(d, h, w)} not divisible by patch size {p}")
    gd, gh, gw = d // p, h // p, w // p
    x = ad.reshape(feat, (c, gd, p, gh, p, gw, p))
    x = ad.transpose(x, (1, 3, 5, 0, 2, 4, 6))  # (gd, gh, gw, c, p, p, p)
    return ad.reshape(x, (gd * gh * gw, c * p ** 3))


def unflatten(tokens, grid_dims):
    """Inverse of token layout: (N, C') back to a (C', gd, gh, gw) grid."""
    n, c = tokens.shape
    gd, gh, gw = grid_dims
    if n != gd * gh * gw:
        raise DimensionError(f"{n} tokens cannot fill grid {grid_dims}")
    x = ad.reshape(tokens, (gd, gh, gw, c))
    return ad.transpose(x, (3, 0, 1, 2))


def embed(seq, proj, pos):
    """Token embedding: seq @ proj + pos."""
    if seq.shape[1] != proj.shape[0]:
        raise DimensionError(
            f"token width {seq.shape} does not match projection {proj.shape}")
    if pos.shape[0] != seq.shape[0]:
        raise DimensionError(
            f"positional table has {pos.shape[0]} rows for {seq.shape[0]} tokens "
            f"(volume size must match the configured token grid)")
    return ad.matmul(seq, proj) + pos


class EncoderLayer:
    """Pre-norm residual MSA + MLP block with per-head projections."""

    def __init__(self, name, cfg: VitConfig, rng):
        cfg.validate()
        self.name = name
        self.cfg = cfg
        d = cfg.d_enc
        dh = d // cfg.n_heads
        self.scale = 1.0 / np.sqrt(dh)
        self.act = ad.gelu if cfg.activation == "gelu" else ad.relu
        hidden = int(round(d * cfg.mlp_ratio))

        def mat(shape, std=cfg.init_std):
            return ad.tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        self.wq = [mat((d, dh)) for _ in range(cfg.n_heads)]
        self.wk = [mat((d, dh)) for _ in range(cfg.n_heads)]
        self.wv = [mat((d, dh)) for _ in range(cfg.n_heads)]
        self.wo = mat((d, d))
        self.ln1_g = ad.tensor(np.ones(d), requires_grad=True)
        self.ln1_b = ad.tensor(np.zeros(d), requires_grad=True)
        self.w1 = mat((d, hidden))
        self.b1 = ad.tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = mat((hidden, d))
        self.b2 = ad.tensor(np.zeros(d), requires_grad=True)
        self.ln2_g = ad.tensor(np.ones(d), requires_grad=True)
        self.ln2_b = ad.tensor(np.zeros(d), requires_grad=True)

    def params(self):
        out = {}
        for i in range(self.cfg.n_heads):
            out[f"{self.name}.h{i}.wq"] = self.wq[i]
            out[f"{self.name}.h{i}.wk"] = self.wk[i]
            out[f"{self.name}.h{i}.wv"] = self.wv[i]
        out.update({
            f"{self.name}.wo": self.wo,
            f"{self.name}.ln1.g": self.ln1_g, f"{self.name}.ln1.b": self.ln1_b,
            f"{self.name}.mlp.w1": self.w1, f"{self.name}.mlp.b1": self.b1,
            f"{self.name}.mlp.w2": self.w2, f"{self.name}.mlp.b2": self.b2,
            f"{self.name}.ln2.g": self.ln2_g, f"{self.name}.ln2.b": self.ln2_b,
        })
        return out

    def attention(self, z, observer=None):
        normed = ad.layer_norm(z, self.ln1_g, self.ln1_b, eps=self.cfg.norm_eps)
        heads = []
        for i in range(self.cfg.n_heads):
            q = ad.matmul(normed, self.wq[i])
            k = ad.matmul(normed, self.wk[i])
            v = ad.matmul(normed, self.wv[i])
            att = ad.softmax_rows(ad.matmul(q, ad.transpose(k)) * self.scale)
            if observer is not None:
                observer(f"{self.name}.h{i}", att.data)
            heads.append(ad.matmul(att, v))
        merged = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
        return ad.matmul(merged, self.wo)

    def forward(self, z, observer=None):
        z_mid = self.attention(z, observer) + z
        normed = ad.layer_norm(z_mid, self.ln2_g, self.ln2_b, eps=self.cfg.norm_eps)
        mlp = ad.matmul(self.act(ad.matmul(normed, self.w1) + self.b1), self.w2) + self.b2
        return mlp + z_mid


class VitEncoder:
    """Patch embedding + layer stack + grid reassembly at the CNN bottleneck."""

    def __init__(self, cfg: VitConfig, in_channels, grid_dims, out_channels, rng):
        cfg.validate()
        self.cfg = cfg
        self.grid_dims = tuple(g // cfg.patch for g in grid_dims)
        n_tokens = int(np.prod(self.grid_dims))
        token_len = in_channels * cfg.patch ** 3
        self.proj = ad.tensor(
            rng.normal(0.0, cfg.init_std, size=(token_len, cfg.d_enc)),
            requires_grad=True)
        pos = np.clip(rng.normal(0.0, cfg.init_std, size=(n_tokens, cfg.d_enc)),
                      -2 * cfg.init_std, 2 * cfg.init_std)
        self.pos = ad.tensor(pos, requires_grad=True)
        self.layers = [EncoderLayer(f"vit.l{i}", cfg, rng) for i in range(cfg.n_layers)]
        self.out_proj = ad.tensor(
            rng.normal(0.0, cfg.init_std, size=(cfg.d_enc, out_channels)),
            requires_grad=True)

    def params(self):
        out = {"vit.embed.proj": self.proj, "vit.embed.pos": self.pos,
               "vit.out_proj": self.out_proj}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def forward(self, feat, observer=None):
        """Bottleneck grid in, same-spatial-dims grid out (out_channels wide)."""
        seq = sequentialize(feat, self.cfg.patch)
        z = embed(seq, self.proj, self.pos)
        for layer in self.layers:
            z = layer.forward(z, observer=observer)
        out = ad.matmul(z, self.out_proj)
        return unflatten(out, self.grid_dims)


def encode_stack(z0, layers, observer=None):
    """Sequential application of encoder layers (empty stack = identity)."""
    z = z0
    for layer in layers:
        z = layer.forward(z, observer=observer)
    return z
