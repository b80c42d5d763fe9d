"""Canned finite-difference verification suite over primitives and composites.

Each probe is deliberately small and sampled away from non-differentiable
points (relu kink, clip boundaries).  Multilinear ops (matmul, conv, resize,
reductions) use a larger float32 step because their central difference has no
truncation error; the step only has to beat float32 evaluation noise.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import querydec
from .losses import total_loss
from .matching import extract_segments, hungarian, match_cost
from .vit import EncoderLayer, VitConfig

F32_EPS_LINEAR = 0.1
F32_EPS_SMOOTH = 1e-2


def _away_from_zero(rng, shape, lo=0.3, hi=1.5):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _sq_sum(t):
    return ad.tsum(t * t)


def _sq_mean(t):
    return ad.tmean(t * t)


def _away_from_points(rng, shape):
    """Magnitudes in [0.3, 0.8] or [1.3, 1.8]: clear of both 0 and the +-1 clips."""
    mag = rng.uniform(0.3, 0.8, size=shape) + rng.choice([0.0, 1.0], size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _primitive_specs():
    return [
        ("add", F32_EPS_LINEAR, lambda rng: (lambda a, b: _sq_sum(a + b),
                                    [rng.normal(size=(3, 4)), rng.normal(size=(1, 4))])),
        ("sub", F32_EPS_LINEAR, lambda rng: (lambda a, b: _sq_sum(a - b),
                                    [rng.normal(size=(3, 4)), rng.normal(size=(3, 1))])),
        ("mul", F32_EPS_LINEAR, lambda rng: (lambda a, b: ad.tsum(a * b),
                                    [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))])),
        ("div", 6e-3, lambda rng: (lambda a, b: ad.tsum(a / b),
                                   [rng.normal(0, 0.3, size=(3, 4)),
                                    rng.uniform(1.0, 2.0, size=(3, 4))])),
        ("power", 7e-3, lambda rng: (lambda a: ad.tsum(ad.power(a, 3.0)),
                                      [rng.normal(0, 0.5, size=(5,))])),
        ("exp", F32_EPS_SMOOTH, lambda rng: (lambda a: ad.tsum(ad.exp(a)),
                                   [rng.normal(size=(5,))])),
        ("log", F32_EPS_SMOOTH, lambda rng: (lambda a: ad.tsum(ad.log(a)),
                                   [rng.uniform(1.0, 2.5, size=(5,))])),
        ("sigmoid", F32_EPS_SMOOTH, lambda rng: (lambda a: ad.tsum(ad.sigmoid(a)),
                                       [rng.normal(size=(6,))])),
        ("relu", F32_EPS_SMOOTH, lambda rng: (lambda a: _sq_sum(ad.relu(a)),
                                    [_away_from_zero(rng, (6,))])),
        ("gelu", F32_EPS_SMOOTH, lambda rng: (lambda a: ad.tsum(ad.gelu(a)),
                                    [rng.normal(size=(6,))])),
        ("clip", F32_EPS_SMOOTH, lambda rng: (lambda a: _sq_sum(ad.clip(a, -1.0, 1.0)),
                                    [_away_from_points(rng, (6,))])),
        ("reshape", F32_EPS_LINEAR, lambda rng: (lambda a: _sq_sum(ad.reshape(a, (6, 2))),
                                        [rng.normal(size=(3, 4))])),
        ("transpose", F32_EPS_LINEAR, lambda rng: (lambda a: _sq_sum(ad.transpose(a, (2, 0, 1))),
                                          [rng.normal(size=(2, 3, 4))])),
        ("concat", F32_EPS_LINEAR, lambda rng: (lambda a, b: _sq_sum(ad.concat([a, b], axis=1)),
                                       [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))])),
        ("sum", F32_EPS_LINEAR, lambda rng: (lambda a: _sq_sum(ad.tsum(a, axis=1)),
                                    [rng.normal(size=(3, 4))])),
        ("mean", F32_EPS_LINEAR, lambda rng: (lambda a: _sq_sum(ad.tmean(a, axis=(0, 2))),
                                     [rng.normal(size=(2, 3, 4))])),
        ("matmul", F32_EPS_LINEAR, lambda rng: (lambda a, b: _sq_sum(ad.matmul(a, b)),
                                       [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])),
        ("softmax_rows", F32_EPS_SMOOTH, lambda rng: (lambda a: _sq_sum(ad.softmax_rows(a)),
                                            [rng.normal(size=(3, 5))])),
        ("layer_norm", F32_EPS_SMOOTH, lambda rng: (
            lambda x, g, b: _sq_mean(ad.layer_norm(x, g, b)),
            [np.array([[-3.0, -1.0, 1.0, 3.0], [3.0, 1.0, -1.0, -3.0]])
             + rng.normal(0, 0.5, size=(2, 4)),
             rng.normal(0, 0.5, size=(4,)), rng.normal(0, 0.5, size=(4,))])),
        ("conv3d", F32_EPS_LINEAR, lambda rng: (
            lambda x, k: _sq_mean(ad.conv3d(x, k, stride=1, pad=1)),
            [rng.normal(0, 0.5, size=(1, 3, 3, 3)),
             rng.normal(0, 0.5, size=(2, 1, 3, 3, 3))])),
        ("conv3d_strided", F32_EPS_LINEAR, lambda rng: (
            lambda x, k: _sq_mean(ad.conv3d(x, k, stride=2, pad=1)),
            [rng.normal(0, 0.5, size=(1, 4, 4, 4)),
             rng.normal(0, 0.5, size=(2, 1, 3, 3, 3))])),
        ("unfold", F32_EPS_LINEAR, lambda rng: (
            lambda x: _sq_mean(ad.unfold(x, 3, stride=1, pad=1)),
            [rng.normal(0, 0.5, size=(1, 3, 3, 3))])),
        ("resize_trilinear", F32_EPS_LINEAR, lambda rng: (
            lambda x: _sq_sum(ad.resize3d(x, (4, 4, 4), mode="trilinear")),
            [rng.normal(size=(1, 2, 2, 2))])),
        ("resize_nearest", F32_EPS_LINEAR, lambda rng: (
            lambda x: _sq_sum(ad.resize3d(x, (3, 3, 3), mode="nearest")),
            [rng.normal(size=(1, 2, 2, 2))])),
        ("zero_interleave", F32_EPS_LINEAR, lambda rng: (
            lambda x: _sq_sum(ad.zero_interleave(x, 2)),
            [rng.normal(size=(1, 2, 2, 2))])),
        ("block_mean", F32_EPS_LINEAR, lambda rng: (
            lambda x: _sq_sum(querydec.downsample_mask(x, (4, 4, 4), (2, 2, 2))),
            [rng.normal(size=(2, 64))])),
    ]


@dataclass
class SuiteRow:
    name: str
    max_rel_err: float
    n_checked: int


def run_primitive_suite(dtype=np.float64, seeds=20, eps=None):
    """Per-primitive worst relative error across seeds."""
    rows = []
    for name, f32_eps, make in _primitive_specs():
        worst = 0.0
        checked = 0
        for s in range(seeds):
            rng = np.random.default_rng(np.random.SeedSequence([17, s]))
            f, inputs = make(rng)
            if eps is not None:
                step = eps
            elif np.dtype(dtype) == np.float64:
                step = None  # grad_check default
            else:
                step = f32_eps
            rep = ad.grad_check(f, inputs, eps=step, dtype=dtype)
            worst = max(worst, rep.max_rel_err)
            checked += rep.n_checked
        rows.append(SuiteRow(name=name, max_rel_err=worst, n_checked=checked))
    return rows


# composites -----------------------------------------------------------------


def _encoder_layer_check(rng, dtype):
    cfg = VitConfig(d_enc=8, n_layers=1, n_heads=2, mlp_ratio=2.0)
    with ad.precision(dtype):
        layer = EncoderLayer("probe", cfg, rng)
        z = ad.tensor(rng.normal(size=(5, 8)), requires_grad=True)
        params = dict(layer.params())
        params["z"] = z
        rep = ad.grad_check_params(lambda: _sq_sum(layer.forward(z)), params)
    return rep


def _decoder_check(rng, dtype):
    d, n_q, t_iters = 4, 2, 2
    full_dims, m_dims = (2, 2, 2), (2, 2, 2)
    with ad.precision(dtype):
        queries = ad.tensor(rng.normal(0, 0.5, size=(n_q, d)), requires_grad=True)
        feat_full = ad.tensor(rng.normal(size=(8, d)), requires_grad=True)
        feat_m = ad.tensor(rng.normal(size=(8, d)), requires_grad=True)
        projs = [querydec.AttentionProjections(
            wq=ad.tensor(rng.normal(0, 0.3, size=(d, d)), requires_grad=True),
            wk=ad.tensor(rng.normal(0, 0.3, size=(d, d)), requires_grad=True),
            wv=ad.tensor(rng.normal(0, 0.3, size=(d, d)), requires_grad=True))
            for _ in range(t_iters)]
        params = {"queries": queries, "feat_full": feat_full, "feat_m": feat_m}
        for i, p in enumerate(projs):
            params[f"wq{i}"], params[f"wk{i}"], params[f"wv{i}"] = p.wq, p.wk, p.wv

        def f():
            res = querydec.refine(queries, feat_full, full_dims, feat_m, m_dims,
                                  projs, t_iters)
            return _sq_sum(res.z_fine.probs)

        rep = ad.grad_check_params(f, params)
    return rep


def _matched_loss_check(rng, dtype):
    n_q, m, k = 4, 27, 2
    labels = rng.integers(0, k + 1, size=(3, 3, 3)).astype(np.uint8)
    gt_masks, gt_classes = extract_segments(labels)
    with ad.precision(dtype):
        mask_logits = ad.tensor(rng.normal(size=(n_q, m)), requires_grad=True)
        cls_logits = ad.tensor(rng.normal(size=(n_q, k + 1)), requires_grad=True)
        probs0 = ad.sigmoid(mask_logits).data
        cost = match_cost(probs0, cls_logits.data, gt_masks, gt_classes)
        frozen = hungarian(cost)

        def f():
            br, _ = total_loss(ad.sigmoid(mask_logits), cls_logits, gt_masks,
                               gt_classes, assignment=frozen)
            return br.total

        rep = ad.grad_check_params(
            f, {"mask_logits": mask_logits, "cls_logits": cls_logits})
    return rep


def run_composite_suite(dtype=np.float64, seeds=20):
    specs = [("encoder_layer", _encoder_layer_check),
             ("decoder_refine", _decoder_check),
             ("matched_loss", _matched_loss_check)]
    rows = []
    for name, fn in specs:
        worst = 0.0
        checked = 0
        for s in range(seeds):
            rng = np.random.default_rng(np.random.SeedSequence([23, s]))
            rep = fn(rng, dtype)
            worst = max(worst, rep.max_rel_err)
            checked += rep.n_checked
        rows.append(SuiteRow(name=name, max_rel_err=worst, n_checked=checked))
    return rows
