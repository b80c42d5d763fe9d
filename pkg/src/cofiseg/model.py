"""Network assembly: the encoder-transformer and decoder-transformer variants.

Variants:
    enc   CNN encoder + transformer encoder at the bottleneck + CNN decoder
          + plain per-class segmentation heads (one per decoder level for
          deep supervision).
    dec   CNN encoder + CNN decoder + query-based coarse-to-fine transformer
          decoder head.
    both  transformer in both places; the query head produces the output.

The query head reads two views of the decoder: the full-resolution feature
map F (width d = first backbone width) and an intermediate decoder feature
projected to d channels (default the penultimate, half-resolution level).
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import querydec
from .errors import ConfigError, DimensionError
from .unet import BackboneConfig, Decoder, Encoder, PointwiseConv, SegHead
from .vit import VitConfig, VitEncoder
from .volume import LabelMap

VARIANTS = ("enc", "dec", "both")


@dataclass
class ModelConfig:
    variant: str = "dec"
    n_classes: int = 2
    volume_dims: tuple = (32, 32, 32)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    vit: VitConfig = field(default_factory=VitConfig)
    n_queries: int = 20
    refine_iters: int = 2
    d_q: int = 0                  # 0 -> query/key projection width = d
    bias_gain: float = 1.0
    threshold: float = 0.5
    tie_projections: bool = False
    bias_source: str = "binary"   # binary | prob
    attention_scale: bool = False
    feature_level: int = 1        # decoder level feeding the query head

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        self.backbone.validate()
        self.vit.validate()
        if self.n_classes < 1:
            raise ConfigError(f"need >= 1 foreground class, got {self.n_classes}")
        if self.n_queries <= self.n_classes:
            raise ConfigError(
                f"query count {self.n_queries} must exceed class count {self.n_classes}")
        div = 2 ** self.backbone.levels
        if any(d % div for d in self.volume_dims):
            raise ConfigError(
                f"volume dims {self.volume_dims} must be divisible by {div}")
        if not (0 <= self.feature_level <= self.backbone.levels - 1):
            raise ConfigError(
                f"feature level {self.feature_level} outside decoder range "
                f"0..{self.backbone.levels - 1}")
        grid = tuple(d // div for d in self.volume_dims)
        if self.variant in ("enc", "both") and any(g % self.vit.patch for g in grid):
            raise ConfigError(
                f"bottleneck grid {grid} not divisible by patch {self.vit.patch}")

    @property
    def embed_dim(self):
        return self.backbone.widths[0]


@dataclass
class QueryOutputs:
    """Per-iteration predictions of the query head, finest (final) first."""

    refine: querydec.RefineResult
    cls_levels: list          # class logit tensors, aligned with prediction levels
    dims: tuple

    def prediction_levels(self):
        return list(zip(self.refine.prediction_levels(), self.cls_levels))


class SegModel:
    def __init__(self, cfg: ModelConfig, seed=0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0F1]))
        bb = cfg.backbone
        self.encoder = Encoder(bb, rng)
        self.grid_dims = tuple(d // 2 ** bb.levels for d in cfg.volume_dims)
        self.vit = None
        if cfg.variant in ("enc", "both"):
            self.vit = VitEncoder(cfg.vit, in_channels=bb.widths[-1],
                                  grid_dims=self.grid_dims,
                                  out_channels=bb.widths[-1], rng=rng)
        self.decoder = Decoder(bb, rng)
        d = cfg.embed_dim
        self.heads = []
        self.fm_proj = None
        self.queries = None
        self.projections = []
        self.cls_w = self.cls_b = None
        if cfg.variant == "enc":
            # one plain head per decoder level for deep supervision
            self.heads = [SegHead(f"head.l{lvl}", bb.widths[lvl], cfg.n_classes, rng)
                          for lvl in range(bb.levels)]
        else:
            m = cfg.feature_level
            self.fm_proj = PointwiseConv("query.fm_proj", bb.widths[m], d, rng)
            self.queries = ad.tensor(
                rng.normal(0.0, 0.02, size=(cfg.n_queries, d)), requires_grad=True)
            d_q = cfg.d_q or d
            n_stages = 1 if cfg.tie_projections else max(cfg.refine_iters, 1)
            for t in range(n_stages):
                def mat(cols):
                    return ad.tensor(
                        rng.normal(0.0, 0.02, size=(d, cols)), requires_grad=True)
                self.projections.append(
                    querydec.AttentionProjections(wq=mat(d_q), wk=mat(d_q), wv=mat(d)))
            self.cls_w = ad.tensor(
                rng.normal(0.0, 0.02, size=(d, cfg.n_classes + 1)), requires_grad=True)
            self.cls_b = ad.tensor(
                np.zeros((1, cfg.n_classes + 1)), requires_grad=True)

    # parameters -------------------------------------------------------------

    def params(self):
        out = {}
        out.update(self.encoder.params())
        if self.vit is not None:
            out.update(self.vit.params())
        out.update(self.decoder.params())
        for head in self.heads:
            out.update(head.params())
        if self.fm_proj is not None:
            out.update(self.fm_proj.params())
        if self.queries is not None:
            out["query.embeddings"] = self.queries
            for t, proj in enumerate(self.projections):
                out[f"query.stage{t}.wq"] = proj.wq
                out[f"query.stage{t}.wk"] = proj.wk
                out[f"query.stage{t}.wv"] = proj.wv
            out["query.cls.weight"] = self.cls_w
            out["query.cls.bias"] = self.cls_b
        return out

    def load_params(self, arrays):
        params = self.params()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ConfigError(
                f"weight set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, tensor in params.items():
            if tuple(arrays[name].shape) != tuple(tensor.shape):
                raise DimensionError(
                    f"weight {name} has shape {arrays[name].shape}, expected {tensor.shape}")
            tensor.assign_(arrays[name])

    # forward paths ----------------------------------------------------------

    def features(self, x, observer=None):
        """Decoder feature list, index 0 = full resolution."""
        if x.shape[1:] != tuple(self.cfg.volume_dims):
            raise DimensionError(
                f"input dims {x.shape[1:]} do not match configured {self.cfg.volume_dims}")
        pyramid = self.encoder.forward(x)
        bottleneck = pyramid[-1]
        if self.vit is not None:
            bottleneck = self.vit.forward(bottleneck, observer=observer)
            if bottleneck.shape[1:] != pyramid[-1].shape[1:]:
                bottleneck = ad.resize3d(bottleneck, pyramid[-1].shape[1:])
        return self.decoder.forward(pyramid, bottleneck)

    def forward_plain(self, x, observer=None):
        """Per-level class logit grids, finest first (enc variant)."""
        feats = self.features(x, observer=observer)
        return [head.forward(feats[lvl]) for lvl, head in enumerate(self.heads)]

    def forward_query(self, x, n_iters=None, observer=None) -> QueryOutputs:
        cfg = self.cfg
        if n_iters is None:
            n_iters = cfg.refine_iters
        feats = self.features(x, observer=observer)
        full = feats[0]
        d = cfg.embed_dim
        dims = tuple(full.shape[1:])
        m_feat = self.fm_proj.forward(feats[cfg.feature_level])
        m_dims = tuple(m_feat.shape[1:])
        f_flat = ad.transpose(ad.reshape(full, (d, int(np.prod(dims)))))
        fm_flat = ad.transpose(ad.reshape(m_feat, (d, int(np.prod(m_dims)))))
        res = querydec.refine(
            self.queries, f_flat, dims, fm_flat, m_dims, self.projections, n_iters,
            beta=cfg.bias_gain, threshold=cfg.threshold,
            bias_source=cfg.bias_source, scale=cfg.attention_scale,
            observer=observer)
        cls_per_query_state = [
            querydec.classify_queries(p, self.cls_w, self.cls_b)
            for p in res.query_trace]
        # align with prediction_levels(): finest (P^T) first, then P^(T-1)..P^0
        cls_levels = [cls_per_query_state[-1]] + cls_per_query_state[:-1][::-1]
        return QueryOutputs(refine=res, cls_levels=cls_levels, dims=dims)

    def predict(self, x, observer=None, n_iters=None):
        """Label grid for one input tensor; also returns the raw outputs."""
        if self.cfg.variant == "enc":
            logits = self.forward_plain(x, observer=observer)[0]
            labels = np.argmax(logits.data, axis=0).astype(np.uint8)
            return labels, logits
        out = self.forward_query(x, n_iters=n_iters, observer=observer)
        labels = querydec.assemble_semantic(
            out.refine.z_fine, out.cls_levels[0].data, out.dims)
        return labels, out

    def predict_volume(self, vol, n_iters=None) -> LabelMap:
        x = ad.tensor(vol.data)
        labels, _ = self.predict(x, n_iters=n_iters)
        return LabelMap(labels=labels, spacing=vol.spacing)
