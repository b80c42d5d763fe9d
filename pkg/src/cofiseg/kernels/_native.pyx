# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the numpy kernels in ``pykernels.py``.

Same contracts, hand-written loops: the col2im fold and the resize adjoints
are scatter-adds that numpy can only express through ``bincount``/``add.at``.
"""

import numpy as np

cimport numpy as cnp

from .pykernels import _linear_axis_weights, _nearest_axis_index, _out_extent

BACKEND = "native"

ctypedef fused floating:
    float
    double


def unfold3d(const floating[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t c = x.shape[0], d = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t od = (d + 2 * pad - k) // stride + 1
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    cdef Py_ssize_t n = od * oh * ow
    if floating is float:
        out_arr = np.zeros((c * k * k * k, n), dtype=np.float32)
    else:
        out_arr = np.zeros((c * k * k * k, n), dtype=np.float64)
    cdef floating[:, ::1] cols = out_arr
    cdef Py_ssize_t ci, kd, kh, kw, oz, oy, ox, r, j, sz, sy, sx
    for ci in range(c):
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    r = ((ci * k + kd) * k + kh) * k + kw
                    for oz in range(od):
                        sz = oz * stride - pad + kd
                        if sz < 0 or sz >= d:
                            continue
                        for oy in range(oh):
                            sy = oy * stride - pad + kh
                            if sy < 0 or sy >= h:
                                continue
                            j = (oz * oh + oy) * ow
                            for ox in range(ow):
                                sx = ox * stride - pad + kw
                                if 0 <= sx < w:
                                    cols[r, j + ox] = x[ci, sz, sy, sx]
    return out_arr


def fold3d(const floating[:, ::1] cols, shape, int k, int stride, int pad):
    cdef Py_ssize_t c = shape[0], d = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t od = (d + 2 * pad - k) // stride + 1
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    acc_arr = np.zeros((c, d, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] acc = acc_arr
    cdef Py_ssize_t ci, kd, kh, kw, oz, oy, ox, r, j, sz, sy, sx
    for ci in range(c):
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    r = ((ci * k + kd) * k + kh) * k + kw
                    for oz in range(od):
                        sz = oz * stride - pad + kd
                        if sz < 0 or sz >= d:
                            continue
                        for oy in range(oh):
                            sy = oy * stride - pad + kh
                            if sy < 0 or sy >= h:
                                continue
                            j = (oz * oh + oy) * ow
                            for ox in range(ow):
                                sx = ox * stride - pad + kw
                                if 0 <= sx < w:
                                    acc[ci, sz, sy, sx] += cols[r, j + ox]
    if floating is float:
        return acc_arr.astype(np.float32)
    return acc_arr


def resize3d_linear(const floating[:, :, :, ::1] x, out_dims):
    cdef Py_ssize_t c = x.shape[0]
    cdef Py_ssize_t od = out_dims[0], oh = out_dims[1], ow = out_dims[2]
    lo_z, hi_z, w_z = _linear_axis_weights(x.shape[1], od)
    lo_y, hi_y, w_y = _linear_axis_weights(x.shape[2], oh)
    lo_x, hi_x, w_x = _linear_axis_weights(x.shape[3], ow)
    cdef cnp.int64_t[::1] lz = np.ascontiguousarray(lo_z, dtype=np.int64)
    cdef cnp.int64_t[::1] hz = np.ascontiguousarray(hi_z, dtype=np.int64)
    cdef cnp.int64_t[::1] ly = np.ascontiguousarray(lo_y, dtype=np.int64)
    cdef cnp.int64_t[::1] hy = np.ascontiguousarray(hi_y, dtype=np.int64)
    cdef cnp.int64_t[::1] lx = np.ascontiguousarray(lo_x, dtype=np.int64)
    cdef cnp.int64_t[::1] hx = np.ascontiguousarray(hi_x, dtype=np.int64)
    cdef double[::1] wz = np.ascontiguousarray(w_z, dtype=np.float64)
    cdef double[::1] wy = np.ascontiguousarray(w_y, dtype=np.float64)
    cdef double[::1] wx = np.ascontiguousarray(w_x, dtype=np.float64)
    if floating is float:
        out_arr = np.empty((c, od, oh, ow), dtype=np.float32)
    else:
        out_arr = np.empty((c, od, oh, ow), dtype=np.float64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ci, oz, oy, ox
    cdef double az, ay, ax, v
    for ci in range(c):
        for oz in range(od):
            az = wz[oz]
            for oy in range(oh):
                ay = wy[oy]
                for ox in range(ow):
                    ax = wx[ox]
                    v = (az * (ay * (ax * x[ci, lz[oz], ly[oy], lx[ox]]
                                     + (1 - ax) * x[ci, lz[oz], ly[oy], hx[ox]])
                               + (1 - ay) * (ax * x[ci, lz[oz], hy[oy], lx[ox]]
                                             + (1 - ax) * x[ci, lz[oz], hy[oy], hx[ox]]))
                         + (1 - az) * (ay * (ax * x[ci, hz[oz], ly[oy], lx[ox]]
                                             + (1 - ax) * x[ci, hz[oz], ly[oy], hx[ox]])
                                       + (1 - ay) * (ax * x[ci, hz[oz], hy[oy], lx[ox]]
                                                     + (1 - ax) * x[ci, hz[oz], hy[oy], hx[ox]])))
                    out[ci, oz, oy, ox] = <floating> v
    return out_arr


def resize3d_linear_adj(const floating[:, :, :, ::1] g, in_dims):
    cdef Py_ssize_t c = g.shape[0]
    cdef Py_ssize_t od = g.shape[1], oh = g.shape[2], ow = g.shape[3]
    lo_z, hi_z, w_z = _linear_axis_weights(in_dims[0], od)
    lo_y, hi_y, w_y = _linear_axis_weights(in_dims[1], oh)
    lo_x, hi_x, w_x = _linear_axis_weights(in_dims[2], ow)
    cdef cnp.int64_t[::1] lz = np.ascontiguousarray(lo_z, dtype=np.int64)
    cdef cnp.int64_t[::1] hz = np.ascontiguousarray(hi_z, dtype=np.int64)
    cdef cnp.int64_t[::1] ly = np.ascontiguousarray(lo_y, dtype=np.int64)
    cdef cnp.int64_t[::1] hy = np.ascontiguousarray(hi_y, dtype=np.int64)
    cdef cnp.int64_t[::1] lx = np.ascontiguousarray(lo_x, dtype=np.int64)
    cdef cnp.int64_t[::1] hx = np.ascontiguousarray(hi_x, dtype=np.int64)
    cdef double[::1] wz = np.ascontiguousarray(w_z, dtype=np.float64)
    cdef double[::1] wy = np.ascontiguousarray(w_y, dtype=np.float64)
    cdef double[::1] wx = np.ascontiguousarray(w_x, dtype=np.float64)
    acc_arr = np.zeros((c, in_dims[0], in_dims[1], in_dims[2]), dtype=np.float64)
    cdef double[:, :, :, ::1] acc = acc_arr
    cdef Py_ssize_t ci, oz, oy, ox
    cdef double az, ay, ax, gv
    for ci in range(c):
        for oz in range(od):
            az = wz[oz]
            for oy in range(oh):
                ay = wy[oy]
                for ox in range(ow):
                    ax = wx[ox]
                    gv = g[ci, oz, oy, ox]
                    acc[ci, lz[oz], ly[oy], lx[ox]] += gv * az * ay * ax
                    acc[ci, lz[oz], ly[oy], hx[ox]] += gv * az * ay * (1 - ax)
                    acc[ci, lz[oz], hy[oy], lx[ox]] += gv * az * (1 - ay) * ax
                    acc[ci, lz[oz], hy[oy], hx[ox]] += gv * az * (1 - ay) * (1 - ax)
                    acc[ci, hz[oz], ly[oy], lx[ox]] += gv * (1 - az) * ay * ax
                    acc[ci, hz[oz], ly[oy], hx[ox]] += gv * (1 - az) * ay * (1 - ax)
                    acc[ci, hz[oz], hy[oy], lx[ox]] += gv * (1 - az) * (1 - ay) * ax
                    acc[ci, hz[oz], hy[oy], hx[ox]] += gv * (1 - az) * (1 - ay) * (1 - ax)
    if floating is float:
        return acc_arr.astype(np.float32)
    return acc_arr


def resize3d_nearest(const floating[:, :, :, ::1] x, out_dims):
    cdef Py_ssize_t c = x.shape[0]
    cdef Py_ssize_t od = out_dims[0], oh = out_dims[1], ow = out_dims[2]
    cdef cnp.int64_t[::1] iz = _nearest_axis_index(x.shape[1], od)
    cdef cnp.int64_t[::1] iy = _nearest_axis_index(x.shape[2], oh)
    cdef cnp.int64_t[::1] ix = _nearest_axis_index(x.shape[3], ow)
    if floating is float:
        out_arr = np.empty((c, od, oh, ow), dtype=np.float32)
    else:
        out_arr = np.empty((c, od, oh, ow), dtype=np.float64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ci, oz, oy, ox
    for ci in range(c):
        for oz in range(od):
            for oy in range(oh):
                for ox in range(ow):
                    out[ci, oz, oy, ox] = x[ci, iz[oz], iy[oy], ix[ox]]
    return out_arr


def resize3d_nearest_adj(const floating[:, :, :, ::1] g, in_dims):
    cdef Py_ssize_t c = g.shape[0]
    cdef Py_ssize_t od = g.shape[1], oh = g.shape[2], ow = g.shape[3]
    cdef cnp.int64_t[::1] iz = _nearest_axis_index(in_dims[0], od)
    cdef cnp.int64_t[::1] iy = _nearest_axis_index(in_dims[1], oh)
    cdef cnp.int64_t[::1] ix = _nearest_axis_index(in_dims[2], ow)
    acc_arr = np.zeros((c, in_dims[0], in_dims[1], in_dims[2]), dtype=np.float64)
    cdef double[:, :, :, ::1] acc = acc_arr
    cdef Py_ssize_t ci, oz, oy, ox
    for ci in range(c):
        for oz in range(od):
            for oy in range(oh):
                for ox in range(ow):
                    acc[ci, iz[oz], iy[oy], ix[ox]] += g[ci, oz, oy, ox]
    if floating is float:
        return acc_arr.astype(np.float32)
    return acc_arr
