"""Spatial kernels with a compiled core and a numpy fallback.

The compiled extension (``_native``, built from Cython) is preferred when
present; ``COFISEG_KERNELS=python`` forces the numpy fallback, and
``COFISEG_KERNELS=native`` makes a missing extension a hard error.  Both
backends implement the same six functions with identical contracts:

    unfold3d / fold3d            im2col / col2im for 3D cross-correlation
    resize3d_linear (+_adj)      trilinear resampling and its adjoint
    resize3d_nearest (+_adj)     nearest-neighbor resampling and its adjoint

``benchmarks/bench_kernels.py`` compares the two.
"""

import os

import numpy as np

from . import pykernels

_requested = os.environ.get("COFISEG_KERNELS", "auto")
if _requested not in ("auto", "native", "python"):
    raise ValueError(f"COFISEG_KERNELS must be auto|native|python, got {_requested!r}")

_impl = None
if _requested in ("auto", "native"):
    try:
        from . import _native as _impl
    except ImportError:
        if _requested == "native":
            raise
        _impl = None
if _impl is None:
    _impl = pykernels

BACKEND = _impl.BACKEND


def _as_c4(x):
    if x.ndim != 4:
        raise ValueError(f"expected a 4D (C, D, H, W) array, got shape {x.shape}")
    return np.ascontiguousarray(x)


def unfold3d(x, k, stride=1, pad=0):
    return _impl.unfold3d(_as_c4(x), k, stride, pad)


def fold3d(cols, shape, k, stride=1, pad=0):
    return _impl.fold3d(np.ascontiguousarray(cols), tuple(shape), k, stride, pad)


def resize3d_linear(x, out_dims):
    return _impl.resize3d_linear(_as_c4(x), tuple(out_dims))


def resize3d_linear_adj(g, in_dims):
    return _impl.resize3d_linear_adj(_as_c4(g), tuple(in_dims))


def resize3d_nearest(x, out_dims):
    return _impl.resize3d_nearest(_as_c4(x), tuple(out_dims))


def resize3d_nearest_adj(g, in_dims):
    return _impl.resize3d_nearest_adj(_as_c4(g), tuple(in_dims))


def conv_out_extent(n, k, stride, pad):
    """Output extent of a cross-correlation along one axis."""
    return (n + 2 * pad - k) // stride + 1
