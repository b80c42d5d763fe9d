"""Spacing-aware segmentation metrics: volumetric Dice, lesion-wise Dice, HD95.

Lesions are connected components (configurable 6/18/26 connectivity) found by
flood fill.  The lesion-wise score of a ground-truth lesion B_i is
``2|A_i n B_i| / (|A_i| + |B_i|)`` where A_i is the union of predicted
components that overlap B_i; lesions with no overlapping prediction score 0.
Predicted components overlapping no ground-truth lesion are reported as false
positives; by default they do not enter the mean (``count_fp=True`` adds them
as score-0 entries, the challenge-tool convention).

HD95 takes 95th-percentile (linear-interpolated) directed surface distances
in both directions and returns the maximum, in millimeters.  Conventions:
Dice of two empty masks is 1.0; HD95 of two empty masks is 0.0; HD95 with
exactly one empty mask returns a penalty sentinel (default 373.13).  Both
conventions are configurable (pass ``nan`` for the strict undefined reading).

Report records (one JSON object per line, `evaluate_cohort`):
    case                 case directory name, or "cohort" for the summary row
    region               "r1" (label 1), "r2" (labels 1+2), "r3" (all foreground)
    volumetric_dice      float
    lesion_dice_mean     float or null (null when the case has no gt lesions)
    lesion_dice_scores   per-gt-lesion scores (omitted in the cohort row)
    false_positive_lesions  int
    hd95                 float
    no_lesion            bool (gt region empty)
Cohort means skip no-lesion cases for lesion_dice_mean and hd95 skips nothing.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import DataError, DimensionError
from .volume import LabelMap, list_cases, load_labels

HD95_SENTINEL = 373.13

REGION_KEYS = ("r1", "r2", "r3")


def _offsets(connectivity):
    if connectivity not in (6, 18, 26):
        raise ValueError(f"connectivity must be one of 6/18/26, got {connectivity}")
    offs = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                order = abs(dz) + abs(dy) + abs(dx)
                if order == 0:
                    continue
                if connectivity == 6 and order > 1:
                    continue
                if connectivity == 18 and order > 2:
                    continue
                offs.append((dz, dy, dx))
    return np.array(offs, dtype=np.int64)


@dataclass
class LesionSet:
    """Connected components of a binary mask, largest first."""

    lesions: list            # flat voxel-index arrays, each sorted ascending
    dims: tuple
    spacing: tuple
    connectivity: int

    def __len__(self):
        return len(self.lesions)

    def label_grid(self):
        """Int grid: 0 background, i+1 for the i-th lesion."""
        grid = np.zeros(self.dims, dtype=np.int32)
        flat = grid.reshape(-1)
        for i, idx in enumerate(self.lesions):
            flat[idx] = i + 1
        return grid


def connected_components(mask, connectivity=26, spacing=(1.0, 1.0, 1.0)) -> LesionSet:
    """Flood-fill labeling; components ordered by size desc, then seed voxel."""
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 3:
        raise DimensionError(f"mask must be 3D, got shape {mask.shape}")
    dims = mask.shape
    offs = _offsets(connectivity)
    visited = np.zeros(dims, dtype=bool)
    comps = []
    seeds = []
    fg = np.argwhere(mask)
    taken = visited.reshape(-1)
    flat_strides = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    for seed in fg:
        sflat = int(seed @ flat_strides)
        if taken[sflat]:
            continue
        frontier = seed[None, :]
        taken[sflat] = True
        members = [np.array([sflat])]
        while frontier.size:
            cand = (frontier[:, None, :] + offs[None, :, :]).reshape(-1, 3)
            ok = np.all((cand >= 0) & (cand < np.array(dims)), axis=1)
            cand = cand[ok]
            cflat = cand @ flat_strides
            keep = mask.reshape(-1)[cflat] & ~taken[cflat]
            cflat = np.unique(cflat[keep])
            taken[cflat] = True
            members.append(cflat)
            frontier = np.stack(np.unravel_index(cflat, dims), axis=1)
        comps.append(np.sort(np.concatenate(members)))
        seeds.append(sflat)
    order = sorted(range(len(comps)), key=lambda i: (-comps[i].size, seeds[i]))
    return LesionSet(lesions=[comps[i] for i in order], dims=dims,
                     spacing=tuple(spacing), connectivity=connectivity)


def dice(a, b, empty_value=1.0):
    """Plain volumetric Dice of two binary masks of identical dims."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise DimensionError(f"dice mask dims differ: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return float(empty_value)
    inter = int(np.count_nonzero(a & b))
    return 2.0 * inter / (na + nb)


@dataclass
class LesionWiseResult:
    scores: list = field(default_factory=list)  # one per ground-truth lesion
    mean: float = None                          # None when gt has no lesions
    false_positives: int = 0
    gt_empty: bool = False


def lesion_wise_dice(pred, gt, connectivity=26, count_fp=False) -> LesionWiseResult:
    """Per-ground-truth-lesion Dice against overlapping predicted components."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"lesion_wise_dice mask dims differ: {pred.shape} vs {gt.shape}")
    gt_set = connected_components(gt, connectivity)
    pred_set = connected_components(pred, connectivity)
    pred_grid = pred_set.label_grid().reshape(-1)
    pred_sizes = np.array([c.size for c in pred_set.lesions], dtype=np.int64)
    matched_pred = set()
    scores = []
    for b in gt_set.lesions:
        hit_ids = np.unique(pred_grid[b])
        hit_ids = hit_ids[hit_ids > 0]
        if hit_ids.size == 0:
            scores.append(0.0)
            continue
        matched_pred.update(int(i) for i in hit_ids)
        inter = int(np.count_nonzero(pred_grid[b]))
        a_size = int(pred_sizes[hit_ids - 1].sum())
        scores.append(2.0 * inter / (a_size + b.size))
    n_fp = len(pred_set) - len(matched_pred)
    if not gt_set.lesions:
        return LesionWiseResult(scores=[], mean=None,
                                false_positives=n_fp, gt_empty=True)
    pool = scores + [0.0] * n_fp if count_fp else scores
    return LesionWiseResult(scores=scores, mean=float(np.mean(pool)),
                            false_positives=n_fp, gt_empty=False)


def _surface(mask):
    """Foreground voxels with a 6-neighbor background voxel (or volume edge)."""
    core = mask.copy()
    for axis in range(3):
        for shift in (1, -1):
            moved = np.zeros_like(mask)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if shift == 1:
                src[axis], dst[axis] = slice(0, -1), slice(1, None)
            else:
                src[axis], dst[axis] = slice(1, None), slice(0, -1)
            moved[tuple(dst)] = mask[tuple(src)]
            core &= moved
    return mask & ~core


def hd95(a, b, spacing=(1.0, 1.0, 1.0), sentinel=HD95_SENTINEL):
    """Symmetric 95th-percentile Hausdorff surface distance in mm."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise DimensionError(f"hd95 mask dims differ: {a.shape} vs {b.shape}")
    a_any, b_any = bool(a.any()), bool(b.any())
    if not a_any and not b_any:
        return 0.0
    if a_any != b_any:
        return float(sentinel)
    dt_to_b = distance_transform_edt(~b, sampling=spacing)
    dt_to_a = distance_transform_edt(~a, sampling=spacing)
    d_ab = dt_to_b[_surface(a)]
    d_ba = dt_to_a[_surface(b)]
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


# region composition and cohort evaluation ----------------------------------


def region_masks(labels):
    """The three nested evaluation regions of a label grid."""
    labels = np.asarray(labels)
    return {
        "r1": labels == 1,
        "r2": (labels == 1) | (labels == 2),
        "r3": labels > 0,
    }


def evaluate_case(pred: LabelMap, gt: LabelMap, connectivity=26, count_fp=False,
                  sentinel=HD95_SENTINEL, empty_dice=1.0):
    """Per-region metric records for one case (list of dicts, one per region)."""
    if pred.dims != gt.dims:
        raise DataError(f"geometry mismatch: pred {pred.dims} vs gt {gt.dims}")
    if tuple(pred.spacing) != tuple(gt.spacing):
        raise DataError(f"spacing mismatch: pred {pred.spacing} vs gt {gt.spacing}")
    pred_regions = region_masks(pred.labels)
    gt_regions = region_masks(gt.labels)
    rows = []
    for key in REGION_KEYS:
        pm, gm = pred_regions[key], gt_regions[key]
        lw = lesion_wise_dice(pm, gm, connectivity=connectivity, count_fp=count_fp)
        rows.append({
            "region": key,
            "volumetric_dice": dice(pm, gm, empty_value=empty_dice),
            "lesion_dice_mean": lw.mean,
            "lesion_dice_scores": lw.scores,
            "false_positive_lesions": lw.false_positives,
            "hd95": hd95(pm, gm, spacing=gt.spacing, sentinel=sentinel),
            "no_lesion": lw.gt_empty,
        })
    return rows


def evaluate_cohort(pred_root, gt_root, connectivity=26, count_fp=False,
                    sentinel=HD95_SENTINEL, empty_dice=1.0):
    """Evaluate every paired case; returns (case records, cohort record, errors)."""
    cases = list_cases(gt_root)
    if not cases:
        raise DataError(f"no case_* directories under {gt_root}")
    records = []
    errors = []
    for case in cases:
        gt_path = os.path.join(gt_root, case, "label.seg")
        pred_path = os.path.join(pred_root, case, "label.seg")
        try:
            if not os.path.exists(pred_path):
                raise DataError(f"missing prediction for {case}: {pred_path}")
            gt_lab = load_labels(gt_path)
            pred_lab = load_labels(pred_path)
            for row in evaluate_case(pred_lab, gt_lab, connectivity=connectivity,
                                     count_fp=count_fp, sentinel=sentinel,
                                     empty_dice=empty_dice):
                row["case"] = case
                records.append(row)
        except Exception as exc:  # keep evaluating the remaining cases
            errors.append({"case": case, "error": str(exc)})
    cohort = {"case": "cohort", "n_cases": len(cases), "n_errors": len(errors)}
    for key in REGION_KEYS:
        rows = [r for r in records if r["region"] == key]
        vol = [r["volumetric_dice"] for r in rows]
        lw = [r["lesion_dice_mean"] for r in rows if not r["no_lesion"]]
        hd = [r["hd95"] for r in rows]
        cohort[key] = {
            "volumetric_dice": float(np.mean(vol)) if vol else None,
            "lesion_dice_mean": float(np.mean(lw)) if lw else None,
            "hd95": float(np.mean(hd)) if hd else None,
        }
    return records, cohort, errors


def format_report_table(records, cohort):
    """Human-readable fixed-width table of per-case and cohort rows."""

    def fmt(v):
        return "   n/a" if v is None else f"{v:6.4f}"

    lines = [f"{'case':<12} {'region':<6} {'vol_dice':>8} {'lw_dice':>8} "
             f"{'fp':>3} {'hd95':>8}"]
    for r in records:
        lines.append(f"{r['case']:<12} {r['region']:<6} {r['volumetric_dice']:8.4f} "
                     f"{fmt(r['lesion_dice_mean']):>8} {r['false_positive_lesions']:3d} "
                     f"{r['hd95']:8.3f}")
    for key in REGION_KEYS:
        c = cohort[key]
        lines.append(f"{'cohort':<12} {key:<6} {fmt(c['volumetric_dice']):>8} "
                     f"{fmt(c['lesion_dice_mean']):>8} {'':>3} "
                     f"{fmt(c['hd95']):>8}")
    return "\n".join(lines) + "\n"


def write_report(prefix, records, cohort, errors):
    """Side-by-side text table (<prefix>.txt) and JSONL records (<prefix>.jsonl)."""
    with open(prefix + ".jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        for err in errors:
            fh.write(json.dumps(err, sort_keys=True) + "\n")
        fh.write(json.dumps(cohort, sort_keys=True) + "\n")
    with open(prefix + ".txt", "w", encoding="utf-8") as fh:
        fh.write(format_report_table(records, cohort))
        for err in errors:
            fh.write(f"ERROR {err['case']}: {err['error']}\n")
