"""Pure-numpy reference implementations of the hot spatial kernels.

Every function here has a compiled twin in ``_native.pyx``; the package
selects one backend at import time (see ``kernels/__init__.py``).  The
numpy versions lean on stride tricks and ``bincount`` scatter-adds, which
keeps them correct but slower than the compiled loops, especially for the
col2im fold used by every conv3d backward pass.
"""

import numpy as np

BACKEND = "python"


def _out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def unfold3d(x, k, stride, pad):
    """im2col for a (C, D, H, W) array.

    Returns a (C*k^3, N_out) matrix whose column j holds the k^3 patch
    (channel-major, then kd/kh/kw row-major) centered on output position j.
    """
    c, d, h, w = x.shape
    od = _out_extent(d, k, stride, pad)
    oh = _out_extent(h, k, stride, pad)
    ow = _out_extent(w, k, stride, pad)
    if pad > 0:
        xp = np.zeros((c, d + 2 * pad, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, pad:pad + d, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]  # (C, od, oh, ow, k, k, k)
    cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c * k * k * k, od * oh * ow)
    return np.ascontiguousarray(cols)


_FOLD_INDEX_CACHE = {}


def _fold_indices(shape, k, stride, pad):
    key = (shape, k, stride, pad)
    hit = _FOLD_INDEX_CACHE.get(key)
    if hit is not None:
        return hit
    c, d, h, w = shape
    pd, ph, pw = d + 2 * pad, h + 2 * pad, w + 2 * pad
    od = _out_extent(d, k, stride, pad)
    oh = _out_extent(h, k, stride, pad)
    ow = _out_extent(w, k, stride, pad)
    oz = np.arange(od) * stride
    oy = np.arange(oh) * stride
    ox = np.arange(ow) * stride
    base = (oz[:, None, None] * ph * pw + oy[None, :, None] * pw + ox[None, None, :]).ravel()
    kz, ky, kx = np.meshgrid(np.arange(k), np.arange(k), np.arange(k), indexing="ij")
    koff = (kz * ph * pw + ky * pw + kx).ravel()
    # flat index into the padded (C, pd, ph, pw) volume for every cols entry
    idx = (koff[None, :, None] + base[None, None, :]
           + (np.arange(c) * pd * ph * pw)[:, None, None])
    idx = np.ascontiguousarray(idx.reshape(-1))
    _FOLD_INDEX_CACHE[key] = (idx, (pd, ph, pw))
    return idx, (pd, ph, pw)


def fold3d(cols, shape, k, stride, pad):
    """col2im scatter-add, the adjoint of :func:`unfold3d`.

    ``cols`` is (C*k^3, N_out); returns the accumulated (C, D, H, W) array.
    """
    c, d, h, w = shape
    idx, (pd, ph, pw) = _fold_indices(tuple(shape), k, stride, pad)
    acc = np.bincount(idx, weights=cols.reshape(-1).astype(np.float64),
                      minlength=c * pd * ph * pw)
    acc = acc.reshape(c, pd, ph, pw)[:, pad:pad + d, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(acc).astype(cols.dtype)


def _linear_axis_weights(n_in, n_out):
    """Source indices and weights for size-preserving linear resampling.

    Uses the half-pixel (align_corners=False) convention; samples are clamped
    to the valid range so boundary voxels replicate.
    """
    if n_out == n_in:
        i0 = np.arange(n_in)
        return i0, i0, np.ones(n_in)
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, 1.0 - frac


def resize3d_linear(x, out_dims):
    """Trilinear resampling of a (C, D, H, W) array to (C, *out_dims)."""
    c = x.shape[0]
    dims_in = x.shape[1:]
    axes = [_linear_axis_weights(dims_in[a], out_dims[a]) for a in range(3)]
    out = x
    for a, (lo, hi, w_lo) in enumerate(axes):
        ax = a + 1
        lo_take = np.take(out, lo, axis=ax)
        hi_take = np.take(out, hi, axis=ax)
        shape = [1, 1, 1, 1]
        shape[ax] = len(lo)
        w = w_lo.reshape(shape)
        out = lo_take * w + hi_take * (1.0 - w)
    return np.ascontiguousarray(out.astype(x.dtype))


def resize3d_linear_adj(g, in_dims):
    """Adjoint of :func:`resize3d_linear`: scatter grads back to (C, *in_dims)."""
    c = g.shape[0]
    out = g.astype(np.float64)
    for a in range(2, -1, -1):
        ax = a + 1
        lo, hi, w_lo = _linear_axis_weights(in_dims[a], g.shape[ax])
        shape = [1, 1, 1, 1]
        shape[ax] = g.shape[ax]
        w = w_lo.reshape(shape)
        acc_shape = list(out.shape)
        acc_shape[ax] = in_dims[a]
        acc = np.zeros(acc_shape)
        np.add.at(acc, _axis_index(acc.ndim, ax, lo), out * w)
        np.add.at(acc, _axis_index(acc.ndim, ax, hi), out * (1.0 - w))
        out = acc
    return out.astype(g.dtype)


def _axis_index(ndim, axis, idx):
    sel = [slice(None)] * ndim
    sel[axis] = idx
    return tuple(sel)


def _nearest_axis_index(n_in, n_out):
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    idx = np.rint(np.clip(pos, 0.0, n_in - 1.0)).astype(np.int64)
    return idx


def resize3d_nearest(x, out_dims):
    """Nearest-neighbor resampling of a (C, D, H, W) array."""
    iz = _nearest_axis_index(x.shape[1], out_dims[0])
    iy = _nearest_axis_index(x.shape[2], out_dims[1])
    ix = _nearest_axis_index(x.shape[3], out_dims[2])
    return np.ascontiguousarray(x[:, iz[:, None, None], iy[None, :, None], ix[None, None, :]])


def resize3d_nearest_adj(g, in_dims):
    """Adjoint of :func:`resize3d_nearest`."""
    c = g.shape[0]
    iz = _nearest_axis_index(in_dims[0], g.shape[1])
    iy = _nearest_axis_index(in_dims[1], g.shape[2])
    ix = _nearest_axis_index(in_dims[2], g.shape[3])
    flat = (iz[:, None, None] * in_dims[1] * in_dims[2]
            + iy[None, :, None] * in_dims[2] + ix[None, None, :]).ravel()
    n_in = in_dims[0] * in_dims[1] * in_dims[2]
    out = np.empty((c, n_in), dtype=np.float64)
    gw = g.reshape(c, -1).astype(np.float64)
    for ch in range(c):
        out[ch] = np.bincount(flat, weights=gw[ch], minlength=n_in)
    return out.reshape(c, *in_dims).astype(g.dtype)
