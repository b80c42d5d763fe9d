"""Training and inference orchestration.

SGD with Nesterov momentum, polynomial learning-rate decay, gradient clipping
at a global norm, per-iteration loss logging, periodic checkpoints carrying
the full optimizer and rng state (so a reload reproduces the uninterrupted
run bit for bit), and optional early stopping once training-set Dice bars
are met.  A NaN/Inf loss aborts the run and leaves the last good checkpoint
in place.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .augment import augment
from .config import RunConfig, diff_configs, fingerprint, parse_config, render_config
from .errors import ConfigError, DataError, NumericError
from .losses import deep_supervision, plain_loss, total_loss
from .matching import extract_segments
from .metrics import dice, lesion_wise_dice
from .model import SegModel
from .volume import LabelMap, Volume, list_cases, read_case


def poly_lr(t, t_max, base, power=0.9):
    """base * (1 - t/t_max)^power, clamped to 0 past t_max."""
    if t < 0:
        raise ValueError(f"iteration must be >= 0, got {t}")
    if t >= t_max:
        return 0.0 if t > t_max else base * 0.0
    return base * (1.0 - t / t_max) ** power


class SgdNesterov:
    """SGD with (Nesterov) momentum and global-norm gradient clipping."""

    def __init__(self, params, momentum=0.99, nesterov=True, clip_norm=12.0):
        self.params = params
        self.momentum = momentum
        self.nesterov = nesterov
        self.clip_norm = clip_norm
        self.velocity = {name: np.zeros(t.shape, dtype=np.float32)
                         for name, t in params.items()}

    def step(self, grad_map, lr):
        grads = {}
        sq = 0.0
        for name, p in self.params.items():
            g = grad_map.get(p.node_id)
            arr = np.zeros(p.shape, dtype=np.float32) if g is None \
                else g.data.astype(np.float32)
            grads[name] = arr
            sq += float((arr.astype(np.float64) ** 2).sum())
        norm = np.sqrt(sq)
        scale = 1.0
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm
        mu = self.momentum
        for name, p in self.params.items():
            g = grads[name] * scale
            v = self.velocity[name]
            v[...] = mu * v + g
            update = g + mu * v if self.nesterov else v
            p.assign_(p.data - np.float32(lr) * update)
        return norm

    def state_arrays(self):
        return {f"opt.velocity.{n}": v for n, v in self.velocity.items()}

    def load_state_arrays(self, arrays):
        for name in self.velocity:
            key = f"opt.velocity.{name}"
            if key not in arrays:
                raise ConfigError(f"checkpoint missing optimizer state {key}")
            self.velocity[name][...] = arrays[key]


@dataclass
class TrainResult:
    iterations: int
    final_loss: float
    loss_log: list
    checkpoint_path: str
    stopped_early: bool = False
    dice_history: list = field(default_factory=list)


def _rng_state(rng):
    return json.loads(json.dumps(rng.bit_generator.state))


def save_checkpoint(path, model, optimizer, next_iter, rng, cfg):
    arrays = {name: t.data for name, t in model.params().items()}
    arrays.update(optimizer.state_arrays())
    meta = {
        "next_iter": int(next_iter),
        "rng_state": _rng_state(rng),
        "config_fingerprint": fingerprint(cfg),
        "config_text": render_config(cfg),
    }
    ckpt.save_weights(path, arrays, meta=meta)


def load_checkpoint(path, expect_cfg=None):
    """Returns (model, arrays, meta, cfg). Fingerprint mismatches refuse with a diff."""
    arrays, meta = ckpt.load_weights(path)
    cfg = parse_config(meta["config_text"], base=RunConfig())
    if expect_cfg is not None:
        if fingerprint(expect_cfg) != meta["config_fingerprint"]:
            delta = diff_configs(render_config(expect_cfg), meta["config_text"])
            lines = "\n".join(f"  {k}: expected {a}, checkpoint has {b}"
                              for k, a, b in delta)
            raise ConfigError(f"config fingerprint mismatch with {path}:\n{lines}")
    model = SegModel(cfg.model_config(), seed=cfg.seed)
    weights = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    model.load_params(weights)
    return model, arrays, meta, cfg


def load_dataset(data_dir):
    cases = list_cases(data_dir)
    if not cases:
        raise DataError(f"no case_* directories in dataset dir {data_dir!r}")
    return cases, [read_case(data_dir, c) for c in cases]


def _item_loss(model, cfg: RunConfig, vol: Volume, lab: LabelMap, observer=None):
    x = ad.tensor(vol.data)
    if cfg.variant == "enc":
        level_logits = model.forward_plain(x, observer=observer)
        if not cfg.deep_supervision:
            level_logits = level_logits[:1]
        labels_per_level = []
        lab_arr = lab.labels
        for lvl, logits in enumerate(level_logits):
            stride = 2 ** lvl
            labels_per_level.append(lab_arr[::stride, ::stride, ::stride])
        total, breakdowns, _ = deep_supervision(
            list(zip(level_logits, labels_per_level)),
            lambda pair: plain_loss(pair[0], pair[1], dice_eps=cfg.dice_eps))
        return total, breakdowns[0]
    out = model.forward_query(x, observer=observer)
    gt_masks, gt_classes = extract_segments(lab.labels)
    levels = out.prediction_levels()
    if not cfg.deep_supervision:
        levels = levels[:1]
    # matching on the final prediction, reused for every level
    final_map, final_cls = levels[0]
    first, assignment = total_loss(
        final_map.probs, final_cls, gt_masks, gt_classes,
        lam0=cfg.lam0, lam1=cfg.lam1, dice_eps=cfg.dice_eps,
        no_object_weight=cfg.no_object_weight)

    def level_loss(pair):
        cmap, cls_logits = pair
        if cmap is final_map:
            return first
        br, _ = total_loss(cmap.probs, cls_logits, gt_masks, gt_classes,
                           lam0=cfg.lam0, lam1=cfg.lam1, dice_eps=cfg.dice_eps,
                           no_object_weight=cfg.no_object_weight,
                           assignment=assignment)
        return br

    total, breakdowns, _ = deep_supervision(levels, level_loss)
    return total, breakdowns[0]


def training_dice(model, dataset):
    """Per-class volumetric and lesion-wise Dice over the training cases."""
    per_class = {}
    for vol, lab in dataset:
        pred = model.predict_volume(vol)
        classes = np.unique(lab.labels)
        for c in classes[classes > 0]:
            pm, gm = pred.labels == c, lab.labels == c
            vol_d = dice(pm, gm)
            lw = lesion_wise_dice(pm, gm)
            rec = per_class.setdefault(int(c), {"vol": [], "lw": []})
            rec["vol"].append(vol_d)
            if lw.mean is not None:
                rec["lw"].append(lw.mean)
    return {c: {"vol": float(np.mean(v["vol"])),
                "lw": float(np.mean(v["lw"])) if v["lw"] else 0.0}
            for c, v in per_class.items()}


def train(cfg: RunConfig, data_dir, out_dir, observer=None) -> TrainResult:
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    case_names, dataset = load_dataset(data_dir)
    model = SegModel(cfg.model_config(), seed=cfg.seed)
    optimizer = SgdNesterov(model.params(), momentum=cfg.momentum,
                            nesterov=cfg.nesterov, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A1]))
    aug_cfg = cfg.augment_config()

    log_path = os.path.join(out_dir, "loss_log.tsv")
    final_path = os.path.join(out_dir, "checkpoint_final.ckpt")
    loss_log = []
    dice_history = []
    stopped = False
    log_fh = open(log_path, "w", encoding="utf-8")
    log_fh.write("iter\tlr\tce\tdice\tcls\ttotal\n")
    try:
        it = 0
        while it < cfg.max_iters:
            lr = poly_lr(it, cfg.max_iters, cfg.base_lr, cfg.lr_power)
            idx = rng.integers(0, len(dataset), size=cfg.batch_size)
            batch = []
            for i in idx:
                vol, lab = dataset[int(i)]
                batch.append(augment(vol, lab, aug_cfg, rng))
            with ad.Tape() as tape:
                first_bd = None
                total = None
                for vol, lab in batch:
                    item_total, bd = _item_loss(model, cfg, vol, lab,
                                                observer=observer)
                    first_bd = first_bd or bd
                    total = item_total if total is None else total + item_total
                total = total * (1.0 / len(batch))
                loss_val = float(total.item())
                if not np.isfinite(loss_val):
                    raise NumericError(
                        f"non-finite loss at iteration {it}; last good checkpoint "
                        f"retained at {final_path}")
                grad_map = tape.backward(total)
            optimizer.step(grad_map, lr)
            vals = first_bd.values()
            entry = {"iter": it, "lr": lr, "ce": vals["ce"], "dice": vals["dice"],
                     "cls": vals["cls"], "total": loss_val}
            loss_log.append(entry)
            log_fh.write(f"{it}\t{lr!r}\t{vals['ce']!r}\t{vals['dice']!r}\t"
                         f"{vals['cls']!r}\t{loss_val!r}\n")
            it += 1
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"checkpoint_{it:06d}.ckpt"),
                                model, optimizer, it, rng, cfg)
            if cfg.eval_every and it % cfg.eval_every == 0:
                scores = training_dice(model, dataset)
                dice_history.append({"iter": it, "scores": scores})
                if cfg.stop_dice_vol > 0 and scores:
                    vol_ok = all(s["vol"] >= cfg.stop_dice_vol for s in scores.values())
                    lw_ok = all(s["lw"] >= cfg.stop_dice_lesion for s in scores.values())
                    if vol_ok and lw_ok:
                        stopped = True
                        break
        save_checkpoint(final_path, model, optimizer, it, rng, cfg)
    finally:
        log_fh.close()
    return TrainResult(iterations=it, final_loss=loss_log[-1]["total"],
                       loss_log=loss_log, checkpoint_path=final_path,
                       stopped_early=stopped, dice_history=dice_history)


def resume_step(checkpoint_path, data_dir):
    """Load a checkpoint and run exactly one training step; returns the loss.

    Used to verify the checkpoint round-trip contract: the loss equals the
    uninterrupted run's next-step loss.
    """
    model, arrays, meta, cfg = load_checkpoint(checkpoint_path)
    optimizer = SgdNesterov(model.params(), momentum=cfg.momentum,
                            nesterov=cfg.nesterov, clip_norm=cfg.clip_norm)
    optimizer.load_state_arrays(arrays)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    _, dataset = load_dataset(data_dir)
    it = meta["next_iter"]
    lr = poly_lr(it, cfg.max_iters, cfg.base_lr, cfg.lr_power)
    aug_cfg = cfg.augment_config()
    idx = rng.integers(0, len(dataset), size=cfg.batch_size)
    batch = [augment(*dataset[int(i)], aug_cfg, rng) for i in idx]
    with ad.Tape() as tape:
        total = None
        for vol, lab in batch:
            item_total, _ = _item_loss(model, cfg, vol, lab)
            total = item_total if total is None else total + item_total
        total = total * (1.0 / len(batch))
        loss_val = float(total.item())
        tape.backward(total)
    return loss_val


def infer_volume(model, cfg: RunConfig, vol: Volume, resample=False,
                 n_iters=None):
    """Predict a label map; off-geometry inputs are resampled or rejected."""
    from .kernels import resize3d_linear, resize3d_nearest

    target = tuple(cfg.volume_dims)
    dims = vol.dims
    if dims != target:
        if not resample:
            raise DataError(
                f"input dims {dims} do not match configured {target}; "
                f"pass resample=True to resample")
        data = resize3d_linear(vol.data, target)
        pred = model.predict_volume(Volume(data=data, spacing=vol.spacing),
                                    n_iters=n_iters)
        back = resize3d_nearest(pred.labels[None].astype(np.float32), dims)[0]
        return LabelMap(labels=back.astype(np.uint8), spacing=vol.spacing)
    return model.predict_volume(vol, n_iters=n_iters)
