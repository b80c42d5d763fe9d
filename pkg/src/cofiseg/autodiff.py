"""Tape-based reverse-mode automatic differentiation over dense numpy tensors.

A :class:`Tensor` wraps an immutable numpy array.  While a :class:`Tape` is
active, every primitive records its inputs, output, and an adjoint closure;
``Tape.backward`` runs the reverse topological sweep and returns a gradient
map keyed by node id.  Tensors are float32 by default; verification code
(finite-difference checks) runs in float64, where central differences are
trustworthy.

Conventions:
  * primitives never mutate their inputs; op outputs are write-protected;
  * a tensor participates in at most one live tape at a time, and a tape is
    single-owner: recording and backward must be externally serialized;
  * with finite-checking enabled, any NaN/Inf leaving a primitive raises
    :class:`~cofiseg.errors.NumericError`.
"""

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import DimensionError, NumericError

_uid_counter = itertools.count()
_DEFAULT_DTYPE = np.float32
_CHECK_FINITE = False
_state = threading.local()

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"default dtype must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (e.g. float64 verification mode)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def set_check_finite(flag):
    """Toggle NaN/Inf rejection at primitive boundaries."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


def _active_tape():
    return getattr(_state, "tape", None)


class Tensor:
    """Immutable dense array with an identity on the active tape."""

    __slots__ = ("_data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False, dtype=None, _copy=True):
        arr = np.asarray(data)
        owned = arr is not data
        if dtype is None:
            dtype = _DEFAULT_DTYPE
        if arr.dtype != np.dtype(dtype):
            arr = arr.astype(dtype)
            owned = True
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
            owned = True
        if _copy and not owned:
            # never freeze a caller-owned buffer
            arr = arr.copy()
        if _CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NumericError("non-finite values in tensor payload")
        if arr.flags.writeable:
            arr.flags.writeable = False
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_uid_counter)

    @property
    def data(self):
        return self._data

    @property
    def shape(self):
        return self._data.shape

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def size(self):
        return self._data.size

    def item(self):
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else self._data.item()

    def assign_(self, new_data):
        """Swap the underlying buffer in place (trainer-only, between tapes)."""
        arr = np.asarray(new_data, dtype=self._data.dtype)
        if arr is new_data:  # never freeze a caller-owned buffer
            arr = arr.copy()
        arr = np.ascontiguousarray(arr)
        if arr.shape != self._data.shape:
            raise DimensionError(f"assign_ shape {arr.shape} != {self._data.shape}")
        if arr.flags.writeable:
            arr.flags.writeable = False
        self._data = arr

    def detach(self):
        return Tensor(self._data, requires_grad=False, dtype=self._data.dtype, _copy=False)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class _Record:
    out_id: int
    in_ids: tuple
    in_reqs: tuple
    backward_fn: object


class Tape:
    """Ordered record of executed primitives for one reverse sweep.

    Activate with ``with Tape() as tape:``; operations executed inside are
    recorded in topological (execution) order.  After ``backward`` the tape
    refuses further work until ``reset``.
    """

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active in this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def _record(self, out, inputs, backward_fn):
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); call reset() first")
        self._records.append(_Record(
            out_id=out.node_id,
            in_ids=tuple(t.node_id for t in inputs),
            in_reqs=tuple(t.requires_grad for t in inputs),
            backward_fn=backward_fn,
        ))

    def __len__(self):
        return len(self._records)

    def reset(self):
        self._records.clear()
        self._consumed = False

    def backward(self, loss):
        """Reverse sweep from a scalar loss; returns {node_id: Tensor gradient}."""
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); call reset() first")
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise DimensionError("backward requires a scalar loss tensor")
        self._consumed = True
        grads = {loss.node_id: np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g_out = grads.pop(rec.out_id, None)
            if g_out is None:
                continue
            in_grads = rec.backward_fn(g_out)
            for nid, req, g in zip(rec.in_ids, rec.in_reqs, in_grads):
                if not req or g is None:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + g
                else:
                    grads[nid] = g
        return {nid: Tensor(g, dtype=g.dtype, _copy=False) for nid, g in grads.items()}


def _apply(out_data, inputs, backward_fn):
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NumericError("non-finite values produced by a primitive")
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req, dtype=out_data.dtype, _copy=False)
    tape = _active_tape()
    if tape is not None and req:
        tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    return _apply(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    return _apply(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    ad, bd = a.data, b.data
    return _apply(ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a, b):
    ad, bd = a.data, b.data
    out = ad / bd
    return _apply(out, (a, b),
                  lambda g: (_unbroadcast(g / bd, a.shape),
                             _unbroadcast(-g * ad / (bd * bd), b.shape)))


def neg(a):
    return _apply(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    p = float(p)
    ad = a.data
    return _apply(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def exp(a):
    out = np.exp(a.data)
    return _apply(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _apply(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a):
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _apply(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    ad = a.data
    return _apply(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),))


def gelu(a):
    """Exact erf-based GELU: x * Phi(x)."""
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))
    out = (ad * cdf).astype(ad.dtype)

    def bwd(g):
        pdf = np.exp(-0.5 * ad * ad) * _INV_SQRT_2PI
        return (g * (cdf + ad * pdf),)

    return _apply(out, (a,), bwd)


def clip(a, lo, hi):
    """Clamp values; gradient passes through only where unclamped."""
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)
    return _apply(np.clip(ad, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape
    return _apply(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _apply(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def tsum(a, axis=None, keepdims=False):
    ad = a.data
    out = ad.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, ad.shape).astype(ad.dtype),)

    return _apply(np.asarray(out, dtype=ad.dtype), (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    ad = a.data
    out = ad.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = ad.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([ad.shape[i] for i in ax]))

    def bwd(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return ((np.broadcast_to(gg, ad.shape) / count).astype(ad.dtype),)

    return _apply(np.asarray(out, dtype=ad.dtype), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and normalization


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _apply(ad @ bd, (a, b),
                  lambda g: (g @ bd.T, ad.T @ g))


def softmax_rows(x):
    """Row-wise softmax of a 2D tensor, max-subtracted for stability."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a 2D tensor, got {x.shape}")
    xd = x.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - dot) * out,)

    return _apply(out.astype(xd.dtype), (x,), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row standardization of a 2D tensor, then affine (gamma, beta)."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm expects a 2D tensor, got {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd, bd_ = gamma.data, beta.data
    out = xhat * gd + bd_

    def bwd(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx.astype(xd.dtype), dgamma.astype(xd.dtype), dbeta.astype(xd.dtype)

    return _apply(out.astype(xd.dtype), (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# spatial primitives (backed by the kernels module)


def unfold(x, k, stride=1, pad=0):
    """Patch-unfold a (C, D, H, W) tensor into a (C*k^3, N_out) matrix."""
    if x.data.ndim != 4:
        raise DimensionError(f"unfold expects a (C, D, H, W) tensor, got {x.shape}")
    shape = x.shape
    cols = kernels.unfold3d(x.data, k, stride, pad)
    return _apply(cols, (x,),
                  lambda g: (kernels.fold3d(g, shape, k, stride, pad),))


def conv3d(x, kernel, stride=1, pad=0):
    """3D cross-correlation via unfold + matmul; gradients come from those adjoints.

    ``x`` is (C_in, D, H, W), ``kernel`` is (C_out, C_in, k, k, k) with odd k.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 5:
        raise DimensionError(
            f"conv3d expects x (C,D,H,W) and kernel (Co,Ci,k,k,k), got {x.shape} and {kernel.shape}")
    c_out, c_in, k1, k2, k3 = kernel.shape
    if not (k1 == k2 == k3):
        raise DimensionError(f"conv3d kernel must be cubic, got {kernel.shape}")
    k = k1
    if k % 2 == 0:
        raise DimensionError(f"conv3d kernel extent must be odd, got {k}")
    if x.shape[0] != c_in:
        raise DimensionError(
            f"conv3d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    out_dims = tuple(kernels.conv_out_extent(n, k, stride, pad) for n in x.shape[1:])
    if min(out_dims) < 1:
        raise DimensionError(
            f"conv3d output extent underflow: input {x.shape}, kernel {kernel.shape}, "
            f"stride {stride}, pad {pad} -> {out_dims}")
    cols = unfold(x, k, stride, pad)
    w2d = reshape(kernel, (c_out, c_in * k * k * k))
    out2d = matmul(w2d, cols)
    return reshape(out2d, (c_out,) + out_dims)


def resize3d(x, out_dims, mode="trilinear"):
    """Resample a (C, D, H, W) tensor; the adjoint is the transposed map."""
    if x.data.ndim != 4:
        raise DimensionError(f"resize3d expects a (C, D, H, W) tensor, got {x.shape}")
    out_dims = tuple(int(v) for v in out_dims)
    in_dims = x.shape[1:]
    if mode == "trilinear":
        out = kernels.resize3d_linear(x.data, out_dims)
        return _apply(out, (x,), lambda g: (kernels.resize3d_linear_adj(g, in_dims),))
    if mode == "nearest":
        out = kernels.resize3d_nearest(x.data, out_dims)
        return _apply(out, (x,), lambda g: (kernels.resize3d_nearest_adj(g, in_dims),))
    raise ValueError(f"unknown resize mode {mode!r}")


def zero_interleave(x, factor):
    """Insert ``factor - 1`` zeros between voxels along each spatial axis."""
    if x.data.ndim != 4:
        raise DimensionError(f"zero_interleave expects a (C, D, H, W) tensor, got {x.shape}")
    f = int(factor)
    c, d, h, w = x.shape
    out = np.zeros((c, d * f, h * f, w * f), dtype=x.dtype)
    out[:, ::f, ::f, ::f] = x.data
    return _apply(out, (x,),
                  lambda g: (np.ascontiguousarray(g[:, ::f, ::f, ::f]),))


# ---------------------------------------------------------------------------
# finite-difference verification harness


@dataclass
class GradCheckReport:
    """Result of comparing tape gradients against central differences."""

    max_rel_err: float
    worst_input: int = -1
    worst_index: int = -1
    n_checked: int = 0
    per_input: list = field(default_factory=list)

    def ok(self, tol):
        return self.max_rel_err < tol


def grad_check(f, inputs, eps=None, dtype=np.float64):
    """Compare tape gradients of scalar-valued ``f`` against central differences.

    Relative error uses a max(1, |analytic|, |numeric|) denominator.  Inputs
    are cast to ``dtype``; float64 is the reliable regime, float32 exists to
    bound the training-precision error.
    """
    dtype = np.dtype(dtype).type
    if eps is None:
        eps = 1e-5 if dtype == np.float64 else 1e-2
    work = [Tensor(np.asarray(t.data if isinstance(t, Tensor) else t, dtype=dtype),
                   requires_grad=True, dtype=dtype) for t in inputs]
    with Tape() as tape:
        out = f(*work)
        if not isinstance(out, Tensor) or out.size != 1:
            raise DimensionError("grad_check requires f to return a scalar tensor")
        if not np.isfinite(out.data).all():
            raise NumericError("grad_check: non-finite function output")
        grad_map = tape.backward(out)
    analytic = []
    for t in work:
        g = grad_map.get(t.node_id)
        analytic.append(np.zeros_like(t.data) if g is None else g.data)

    def eval_scalar(args):
        val = f(*[Tensor(a, dtype=dtype) for a in args]).data
        if not np.isfinite(val).all():
            raise NumericError("grad_check: non-finite function output during probing")
        return float(val.reshape(-1)[0])

    report = GradCheckReport(max_rel_err=0.0)
    base = [t.data.copy() for t in work]
    for i, arr in enumerate(base):
        flat = arr.reshape(-1)
        worst = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = eval_scalar(base)
            flat[j] = orig - eps
            f_minus = eval_scalar(base)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[i].reshape(-1)[j])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            report.n_checked += 1
            if rel > worst:
                worst = rel
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst_input = i
                report.worst_index = j
        report.per_input.append(worst)
    return report


def grad_check_params(f, params, eps=None, max_entries=None, rng=None):
    """Finite-difference check of scalar ``f()`` against tape gradients of ``params``.

    ``params`` maps names to leaf tensors that ``f`` closes over; each is
    perturbed in place (via assign_) for the central differences, so this
    also covers composites whose parameters live inside model objects.
    ``max_entries`` subsamples coordinates per parameter for large blocks.
    """
    sample_rng = rng or np.random.default_rng(0)
    names = list(params)
    if eps is None:
        eps = 1e-5 if all(params[n].dtype == np.float64 for n in names) else 1e-2
    with Tape() as tape:
        out = f()
        if not isinstance(out, Tensor) or out.size != 1:
            raise DimensionError("grad_check_params requires a scalar-valued f")
        grad_map = tape.backward(out)
    report = GradCheckReport(max_rel_err=0.0)
    for i, name in enumerate(names):
        p = params[name]
        g = grad_map.get(p.node_id)
        analytic = np.zeros(p.shape, dtype=np.float64) if g is None \
            else g.data.astype(np.float64)
        base = p.data.copy()
        flat = base.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            coords = sample_rng.choice(flat.size, size=max_entries, replace=False)
        else:
            coords = range(flat.size)
        worst = 0.0
        for j in coords:
            orig = flat[j]
            flat[j] = orig + eps
            p.assign_(base)
            f_plus = float(f().data.reshape(-1)[0])
            flat[j] = orig - eps
            p.assign_(base)
            f_minus = float(f().data.reshape(-1)[0])
            flat[j] = orig
            p.assign_(base)
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic.reshape(-1)[j])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            report.n_checked += 1
            worst = max(worst, rel)
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst_input = i
                report.worst_index = int(j)
        report.per_input.append(worst)
    return report
