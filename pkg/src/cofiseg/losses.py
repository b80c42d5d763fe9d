"""Differentiable training losses: matched mask losses, class loss, deep supervision.

The combined objective is ``lam0 * (ce + dice) + lam1 * cls`` where ce and
dice are averaged over matched (segment, query) pairs and cls is a weighted
categorical cross-entropy over all queries (unmatched queries target the
no-object class with a reduced weight).  Matching is computed on detached
values and treated as a constant of the step: gradients flow only through
the loss terms.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .matching import hungarian, match_cost

PROB_CLAMP = 1e-7


@dataclass
class LossBreakdown:
    """Component scalars of one objective evaluation (tensors stay on tape)."""

    ce: ad.Tensor
    dice: ad.Tensor
    cls: ad.Tensor
    lam0: float
    lam1: float
    total: ad.Tensor

    def values(self):
        return {
            "ce": float(self.ce.item()),
            "dice": float(self.dice.item()),
            "cls": float(self.cls.item()),
            "total": float(self.total.item()),
        }

    def check(self, tol=1e-6):
        expect = (self.lam0 * (float(self.ce.item()) + float(self.dice.item()))
                  + self.lam1 * float(self.cls.item()))
        got = float(self.total.item())
        if abs(got - expect) > tol:
            raise AssertionError(f"loss identity violated: {got} vs {expect}")
        return True


def _combine(ce, dice_t, cls_t, lam0, lam1):
    lam0 = float(lam0)
    lam1 = float(lam1)
    if lam0 < 0 or lam1 < 0:
        raise ValueError(f"loss weights must be non-negative, got {lam0}, {lam1}")
    total = lam0 * (ce + dice_t) + lam1 * cls_t
    out = LossBreakdown(ce=ce, dice=dice_t, cls=cls_t, lam0=lam0, lam1=lam1, total=total)
    out.check()
    return out


def dice_loss(prob, gt, eps=1.0):
    """Soft Dice loss: 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    gt_t = ad.tensor(np.asarray(gt), dtype=prob.dtype)
    inter = ad.tsum(prob * gt_t)
    denom = ad.tsum(prob) + ad.tsum(gt_t) + eps
    return 1.0 - (2.0 * inter + eps) / denom


def bce_loss(prob, gt):
    """Mean binary cross-entropy over voxels, probabilities clamped."""
    gt_arr = np.asarray(gt, dtype=prob.dtype)
    p = ad.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    gt_t = ad.tensor(gt_arr, dtype=prob.dtype)
    ll = gt_t * ad.log(p) + (1.0 - gt_t) * ad.log(1.0 - p)
    return -ad.tmean(ll)


def cls_loss(logits, targets, weights=None):
    """Weighted categorical cross-entropy over rows of (N, K+1) logits."""
    n, k1 = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    onehot = np.zeros((n, k1), dtype=logits.dtype)
    onehot[np.arange(n), targets] = 1.0
    if weights is None:
        weights = np.ones(n)
    w = np.asarray(weights, dtype=np.float64)
    probs = ad.clip(ad.softmax_rows(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    nll = -ad.tsum(ad.log(probs) * ad.tensor(onehot, dtype=logits.dtype), axis=1)  # (N,)
    wt = ad.tensor(w / w.sum(), dtype=logits.dtype)
    return ad.tsum(nll * wt)


def total_loss(probs, cls_logits, gt_masks, gt_classes, lam0=0.7, lam1=0.3,
               dice_eps=1.0, no_object_weight=0.1, assignment=None):
    """Matched set-prediction loss; returns (LossBreakdown, assignment).

    ``probs`` (N_q, M) and ``cls_logits`` (N_q, K+1) are tape tensors;
    ``gt_masks`` (G, M) / ``gt_classes`` (G,) come from the label map.  If no
    assignment is given, Hungarian matching runs on detached values.
    """
    n_q, m = probs.shape
    k1 = cls_logits.shape[1]
    g = len(gt_classes)
    dtype = probs.dtype
    if g == 0:
        zero = ad.tensor(np.zeros(()), dtype=dtype)
        targets = np.full(n_q, k1 - 1, dtype=np.int64)
        cls_t = cls_loss(cls_logits, targets,
                         np.full(n_q, no_object_weight))
        return _combine(zero, zero.detach(), cls_t, lam0, lam1), np.zeros(0, np.int64)
    if assignment is None:
        cost = match_cost(probs.data, cls_logits.data, gt_masks, gt_classes,
                          lam0=lam0, lam1=lam1, eps=dice_eps)
        assignment = hungarian(cost)

    selector = np.zeros((g, n_q), dtype=dtype)
    selector[np.arange(g), assignment] = 1.0
    matched = ad.matmul(ad.tensor(selector, dtype=dtype), probs)  # (G, M) matched prob maps
    gt_arr = np.asarray(gt_masks, dtype=dtype)
    gt_t = ad.tensor(gt_arr, dtype=dtype)

    p = ad.clip(matched, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = gt_t * ad.log(p) + (1.0 - gt_t) * ad.log(1.0 - p)
    ce = -ad.tmean(ll)

    inter = ad.tsum(matched * gt_t, axis=1)
    denom = ad.tsum(matched, axis=1) + ad.tensor(gt_arr.sum(axis=1), dtype=dtype) + dice_eps
    dice_t = ad.tmean(1.0 - (2.0 * inter + dice_eps) / denom)

    targets = np.full(n_q, k1 - 1, dtype=np.int64)
    weights = np.full(n_q, no_object_weight)
    targets[assignment] = np.asarray(gt_classes, dtype=np.int64) - 1
    weights[assignment] = 1.0
    cls_t = cls_loss(cls_logits, targets, weights)
    return _combine(ce, dice_t, cls_t, lam0, lam1), assignment


def plain_loss(logits, labels, lam0=1.0, dice_eps=1.0):
    """Per-voxel CE plus mean per-class soft Dice for a (K+1, D, H, W) logit grid."""
    k1 = logits.shape[0]
    labels = np.asarray(labels)
    m = labels.size
    flat = ad.reshape(logits, (k1, m))
    probs = ad.softmax_rows(ad.transpose(flat))  # (M, K+1)
    probs = ad.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    onehot = np.zeros((m, k1), dtype=logits.dtype)
    onehot[np.arange(m), labels.reshape(-1).astype(np.int64)] = 1.0
    ce = -ad.tmean(ad.tsum(ad.log(probs) * ad.tensor(onehot, dtype=logits.dtype), axis=1))

    dice_terms = []
    for c in range(1, k1):
        sel = np.zeros((1, k1), dtype=logits.dtype)
        sel[0, c] = 1.0
        p_c = ad.tsum(probs * ad.tensor(sel, dtype=logits.dtype), axis=1)  # (M,)
        dice_terms.append(dice_loss(p_c, (labels.reshape(-1) == c), eps=dice_eps))
    dice_t = dice_terms[0]
    for t in dice_terms[1:]:
        dice_t = dice_t + t
    dice_t = dice_t * (1.0 / len(dice_terms))
    zero = ad.tensor(np.zeros(()), dtype=logits.dtype)
    return _combine(ce, dice_t, zero, lam0, 0.0)


def level_weights(n_levels):
    """Deep-supervision weights: halving per level (finest first), normalized."""
    raw = np.array([0.5 ** i for i in range(n_levels)])
    return raw / raw.sum()


def deep_supervision(levels, loss_fn, weights=None):
    """Weighted sum of per-level losses; levels ordered finest first.

    ``loss_fn(level) -> LossBreakdown``; returns (total Tensor, breakdowns,
    normalized weights).
    """
    n = len(levels)
    if weights is None:
        w = level_weights(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
    breakdowns = [loss_fn(level) for level in levels]
    total = breakdowns[0].total * float(w[0])
    for wi, br in zip(w[1:], breakdowns[1:]):
        total = total + br.total * float(wi)
    return total, breakdowns, w
