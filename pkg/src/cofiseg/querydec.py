"""Query-driven coarse-to-fine mask decoder.

N_q learnable query embeddings attend over a flattened intermediate decoder
feature map.  Each refinement iteration: (1) coarse per-query masks from the
dot product with the full-resolution feature map, sigmoid + 0.5 threshold;
(2) cross-attention logits additively biased by the block-average-downsampled
coarse masks, row-softmaxed into an affinity matrix; (3) residual query
update with the attention-weighted value vectors.  After T iterations the
final queries produce the fine masks and per-query class logits.

The hard threshold carries no gradient: losses consume the retained sigmoid
probabilities, and in the default ("binary") bias mode the attention bias is
a constant of the iteration.  Attention logits are unscaled by default; a
config flag enables 1/sqrt(d_q) scaling.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError

DEFAULT_THRESHOLD = 0.5


@dataclass
class AttentionProjections:
    """Per-stage q/k/v weight matrices (d x d_q, d x d_k, d x d_v)."""

    wq: ad.Tensor
    wk: ad.Tensor
    wv: ad.Tensor

    def __post_init__(self):
        if self.wq.shape[1] != self.wk.shape[1]:
            raise DimensionError(
                f"query/key widths must agree: {self.wq.shape} vs {self.wk.shape}")


@dataclass
class CoarseMap:
    """Per-query maps: sigmoid probabilities (on tape) and thresholded binaries."""

    probs: ad.Tensor          # (N_q, D*H*W)
    binary: np.ndarray        # (N_q, D*H*W) uint8, probs >= threshold
    dims: tuple
    threshold: float = DEFAULT_THRESHOLD

    def binary_grids(self):
        return self.binary.reshape((-1,) + tuple(self.dims))

    def prob_grids(self):
        return self.probs.data.reshape((-1,) + tuple(self.dims))


def coarse_attention(queries, feat, proj: AttentionProjections,
                     scale=False, observer=None):
    """Row-stochastic affinity of queries over flattened feature positions."""
    if queries.shape[1] != proj.wq.shape[0] or feat.shape[1] != proj.wk.shape[0]:
        raise DimensionError(
            f"width mismatch: queries {queries.shape}, features {feat.shape}, "
            f"projections {proj.wq.shape}/{proj.wk.shape}")
    logits = ad.matmul(ad.matmul(queries, proj.wq),
                       ad.transpose(ad.matmul(feat, proj.wk)))
    if scale:
        logits = logits * (1.0 / np.sqrt(proj.wq.shape[1]))
    att = ad.softmax_rows(logits)
    if observer is not None:
        observer("coarse_attention", att.data)
    return att


def masked_attention(queries, feat, proj: AttentionProjections, bias,
                     scale=False, observer=None):
    """Affinity with additive logit bias from the downsampled coarse masks."""
    logits = ad.matmul(ad.matmul(queries, proj.wq),
                       ad.transpose(ad.matmul(feat, proj.wk)))
    assert bias.shape == logits.shape, \
        f"bias grid {bias.shape} does not match attention logits {logits.shape}"
    if scale:
        logits = logits * (1.0 / np.sqrt(proj.wq.shape[1]))
    att = ad.softmax_rows(logits + bias)
    if observer is not None:
        observer("masked_attention", att.data)
    return att


def update_queries(queries, affinity, feat, proj: AttentionProjections):
    """Residual update: P + A @ (feat @ wv)."""
    return queries + ad.matmul(affinity, ad.matmul(feat, proj.wv))


def coarse_predict(queries, feat, dims, threshold=DEFAULT_THRESHOLD) -> CoarseMap:
    """Per-query masks g(P @ F^T): sigmoid probabilities, then >= threshold."""
    logits = ad.matmul(queries, ad.transpose(feat))
    probs = ad.sigmoid(logits)
    binary = (probs.data >= threshold).astype(np.uint8)
    return CoarseMap(probs=probs, binary=binary, dims=tuple(dims),
                     threshold=threshold)


def downsample_mask(mask, src_dims, dst_dims, beta=1.0):
    """Block-average pool per-query maps to the attention grid, scaled by beta.

    ``mask`` is either a (N_q, M) numpy array (constant bias) or a tensor
    (differentiable bias); returns a (N_q, prod(dst_dims)) tensor.
    """
    src_dims, dst_dims = tuple(src_dims), tuple(dst_dims)
    if any(s % d for s, d in zip(src_dims, dst_dims)):
        raise DimensionError(
            f"target dims {dst_dims} must divide source dims {src_dims}")
    fz, fy, fx = (s // d for s, d in zip(src_dims, dst_dims))
    if isinstance(mask, ad.Tensor):
        n = mask.shape[0]
        grid = ad.reshape(mask, (n, dst_dims[0], fz, dst_dims[1], fy, dst_dims[2], fx))
        pooled = ad.tmean(grid, axis=(2, 4, 6))
        return ad.reshape(pooled, (n, int(np.prod(dst_dims)))) * float(beta)
    n = mask.shape[0]
    grid = mask.reshape(n, dst_dims[0], fz, dst_dims[1], fy, dst_dims[2], fx)
    pooled = grid.mean(axis=(2, 4, 6), dtype=np.float64).reshape(n, -1)
    return ad.tensor(beta * pooled)


@dataclass
class RefineResult:
    z_fine: CoarseMap
    trace: list                  # coarse maps per iteration (from P^(t-1))
    queries: ad.Tensor           # P^(T)
    query_trace: list = field(default_factory=list)  # P^(0) .. P^(T)

    def prediction_levels(self):
        """All T+1 prediction maps, finest (final) first."""
        return [self.z_fine] + list(reversed(self.trace))


def refine(queries, feat_full, full_dims, feat_m, m_dims, projections, n_iters,
           beta=1.0, threshold=DEFAULT_THRESHOLD, bias_source="binary",
           scale=False, observer=None) -> RefineResult:
    """The iterative loop: coarse predict, biased attention, query update.

    ``projections`` holds one AttentionProjections per iteration (untied) or
    a single-element list reused every iteration (tied).  ``n_iters`` = 0
    skips attention entirely and just thresholds the initial prediction.
    """
    if n_iters < 0:
        raise ConfigError(f"iteration count must be >= 0, got {n_iters}")
    if bias_source not in ("binary", "prob"):
        raise ConfigError(f"bias_source must be binary|prob, got {bias_source!r}")
    if n_iters > 0 and len(projections) not in (1, n_iters):
        raise ConfigError(
            f"{len(projections)} projection stages for {n_iters} iterations")
    p = queries
    trace = []
    query_trace = [p]
    for t in range(1, n_iters + 1):
        coarse = coarse_predict(p, feat_full, full_dims, threshold=threshold)
        trace.append(coarse)
        source = coarse.probs if bias_source == "prob" else coarse.binary
        bias = downsample_mask(source, full_dims, m_dims, beta=beta)
        proj = projections[0] if len(projections) == 1 else projections[t - 1]
        att = masked_attention(p, feat_m, proj, bias, scale=scale, observer=observer)
        p = update_queries(p, att, feat_m, proj)
        query_trace.append(p)
    z_fine = coarse_predict(p, feat_full, full_dims, threshold=threshold)
    return RefineResult(z_fine=z_fine, trace=trace, queries=p,
                        query_trace=query_trace)


def classify_queries(queries, weight, bias_row):
    """Per-query class logits over K+1 classes (index K = no-object)."""
    return ad.matmul(queries, weight) + bias_row


def assemble_semantic(z_fine: CoarseMap, cls_logits, dims):
    """Combine per-query masks and classes into one label grid.

    Per voxel: among queries whose binary mask covers it and whose argmax
    class is not no-object, pick the highest class-probability times
    mask-probability; background when no query covers it.
    """
    logits = np.asarray(cls_logits, dtype=np.float64)
    n_q, k1 = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs_cls = np.exp(shifted)
    probs_cls /= probs_cls.sum(axis=1, keepdims=True)
    top = probs_cls.argmax(axis=1)
    is_object = top < (k1 - 1)
    conf = probs_cls[np.arange(n_q), top]
    score = z_fine.binary.astype(np.float64) * np.asarray(z_fine.probs.data, np.float64)
    score *= (conf * is_object)[:, None]
    winner = score.argmax(axis=0)
    covered = score.max(axis=0) > 0
    labels = np.where(covered, (top + 1)[winner], 0).astype(np.uint8)
    return labels.reshape(tuple(dims))
