"""Minimum-cost injective assignment of ground-truth segments to query slots.

``hungarian`` solves the rectangular assignment problem (rows = ground-truth
segments, columns = candidate queries, rows <= columns) with the classic
potential-based shortest-augmenting-path formulation, then canonicalizes the
result so that among all minimum-cost assignments the one with the lowest
query index per segment (scanning segments in order) is returned.  The cost
matrix mirrors the training objective so matching optimizes what training
minimizes.
"""

import numpy as np

from .errors import DimensionError, NumericError


def _solve(cost):
    """Row -> column assignment minimizing total cost; requires rows <= cols."""
    g, n = cost.shape
    u = np.zeros(g + 1)
    v = np.zeros(n + 1)
    col_row = np.zeros(n + 1, dtype=np.int64)  # matched row per column, 1-based
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, g + 1):
        col_row[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_row[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[col_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if col_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_row[j0] = col_row[j1]
            j0 = j1
    row_col = np.full(g, -1, dtype=np.int64)
    for j in range(1, n + 1):
        if col_row[j] > 0:
            row_col[col_row[j] - 1] = j - 1
    return row_col


def _total(cost, row_col):
    return float(sum(cost[i, row_col[i]] for i in range(len(row_col))))


def hungarian(cost):
    """Optimal assignment as an int array (query index per segment row).

    Ties between equal-cost optima break toward the lowest query index,
    segment by segment.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionError(f"cost matrix must be 2D, got shape {cost.shape}")
    g, n = cost.shape
    if g > n:
        raise DimensionError(f"more segments than queries: {g} > {n}")
    if not np.isfinite(cost).all():
        raise NumericError("cost matrix contains non-finite entries")
    if g == 0:
        return np.zeros(0, dtype=np.int64)
    best_total = _total(cost, _solve(cost))
    tol = 1e-9 * (1.0 + abs(best_total))
    chosen = []
    rows_left = list(range(g))
    cols_left = list(range(n))
    fixed = 0.0
    for row in range(g):
        rows_left.remove(row)
        for q in cols_left:
            rest_cols = [c for c in cols_left if c != q]
            if rows_left:
                sub = cost[np.ix_(rows_left, rest_cols)]
                rest = _total(sub, _solve(sub))
            else:
                rest = 0.0
            if fixed + cost[row, q] + rest <= best_total + tol:
                chosen.append(q)
                fixed += cost[row, q]
                cols_left = rest_cols
                break
        else:
            raise AssertionError("no column completes an optimal assignment")
    return np.array(chosen, dtype=np.int64)


def assignment_total(cost, assignment):
    """Total cost of an assignment, summed in segment order."""
    return _total(np.asarray(cost, dtype=np.float64), assignment)


# cost construction ----------------------------------------------------------


def extract_segments(labels):
    """Per-class binary masks of a label grid: (masks (G, M) bool, classes (G,))."""
    labels = np.asarray(labels)
    flat = labels.reshape(-1)
    classes = np.unique(flat)
    classes = classes[classes > 0]
    masks = np.stack([flat == c for c in classes]) if classes.size else \
        np.zeros((0, flat.size), dtype=bool)
    return masks, classes.astype(np.int64)


def match_cost(probs, cls_logits, gt_masks, gt_classes,
               lam0=0.7, lam1=0.3, eps=1.0):
    """(G, N_q) matching cost mirroring the training loss.

    ``probs`` (N_q, M) are mask probabilities, ``cls_logits`` (N_q, K+1) raw
    class scores (index K = no-object), ``gt_masks`` (G, M) binary,
    ``gt_classes`` (G,) label values in 1..K.
    """
    probs = np.asarray(probs, dtype=np.float64)
    logits = np.asarray(cls_logits, dtype=np.float64)
    gt = np.asarray(gt_masks, dtype=np.float64)
    g, m = gt.shape
    if probs.shape[1] != m:
        raise DimensionError(f"prob maps ({probs.shape}) do not match gt ({gt.shape})")
    p = np.clip(probs, 1e-7, 1.0 - 1e-7)
    bce = -(gt @ np.log(p).T + (1.0 - gt) @ np.log(1.0 - p).T) / m  # (G, N_q)
    inter = gt @ probs.T
    sums = probs.sum(axis=1)[None, :] + gt.sum(axis=1)[:, None]
    dice_cost = 1.0 - (2.0 * inter + eps) / (sums + eps)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    cls_cost = -logp[:, np.asarray(gt_classes, dtype=np.int64) - 1].T  # (G, N_q)
    return lam0 * (bce + dice_cost) + lam1 * cls_cost
