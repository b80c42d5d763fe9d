"""Synthetic desk-scale volumes: nested ellipsoidal blobs on a smooth background.

Each case holds a configurable number of axis-aligned ellipsoids.  The full
ellipsoid is labeled class 2 (outer shell) and a concentric ellipsoid shrunk
by ``nested_ratio`` is relabeled class 1 (inner core), giving the nested
two-class hierarchy the evaluation regions are built from.  Image intensity
is a smooth low-frequency background plus per-label offsets plus Gaussian
noise.  Generation is deterministic per (seed, case index).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .kernels import resize3d_linear
from .volume import LabelMap, Volume

OUTER_LABEL = 2
INNER_LABEL = 1

_BACKGROUND_BASE = 0.2
_BACKGROUND_FIELD = 0.15
_LABEL_OFFSET = 0.4  # added once for the shell, twice for the core


@dataclass
class SynthSpec:
    """Recipe for one synthetic cohort."""

    seed: int = 0
    dims: tuple = (32, 32, 32)
    blob_count: tuple = (1, 3)
    blob_radius: tuple = (3.0, 6.0)
    nested_ratio: float = 0.55
    noise_sigma: float = 0.03

    def validate(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 4:
            raise ConfigError(f"synth dims must be 3 extents >= 4, got {self.dims}")
        lo, hi = self.blob_count
        if not (0 <= lo <= hi):
            raise ConfigError(f"blob count range invalid: {self.blob_count}")
        r_lo, r_hi = self.blob_radius
        if not (0 < r_lo <= r_hi):
            raise ConfigError(f"blob radius range invalid: {self.blob_radius}")
        if not (0.0 < self.nested_ratio < 1.0):
            raise ConfigError(f"nested ratio must lie in (0, 1), got {self.nested_ratio}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        # a blob of maximal radius must fit strictly inside the volume
        if any(2.0 * r_hi + 2.0 > d for d in dims):
            raise ConfigError(
                f"blob radius {r_hi} cannot fit inside volume dims {dims}")


@dataclass
class Blob:
    center: tuple  # (z, y, x) voxel coordinates, float
    axes: tuple    # ellipsoid semi-axes in voxels


def _case_rng(spec: SynthSpec, index: int):
    return np.random.default_rng(np.random.SeedSequence([int(spec.seed), int(index)]))


def blob_parameters(spec: SynthSpec, index: int):
    """The blob geometry a given case is rendered from (deterministic)."""
    spec.validate()
    rng = _case_rng(spec, index)
    return _draw_blobs(spec, rng)


def _draw_blobs(spec: SynthSpec, rng):
    lo, hi = spec.blob_count
    count = int(rng.integers(lo, hi + 1))
    blobs = []
    dims = spec.dims
    for _ in range(count):
        axes = rng.uniform(spec.blob_radius[0], spec.blob_radius[1], size=3)
        center = [rng.uniform(a + 1.0, d - 1.0 - a) for a, d in zip(axes, dims)]
        blobs.append(Blob(center=tuple(center), axes=tuple(axes)))
    return blobs


def ellipsoid_mask(dims, center, axes):
    """Boolean grid of voxels with sum(((v - c) / a)^2) <= 1."""
    zz, yy, xx = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims),
                             indexing="ij")
    q = (((zz - center[0]) / axes[0]) ** 2
         + ((yy - center[1]) / axes[1]) ** 2
         + ((xx - center[2]) / axes[2]) ** 2)
    return q <= 1.0


def _render_case(spec: SynthSpec, rng, blobs):
    dims = tuple(int(d) for d in spec.dims)
    labels = np.zeros(dims, dtype=np.uint8)
    for blob in blobs:
        labels[ellipsoid_mask(dims, blob.center, blob.axes)] = OUTER_LABEL
    for blob in blobs:
        inner = tuple(a * spec.nested_ratio for a in blob.axes)
        labels[ellipsoid_mask(dims, blob.center, inner)] = INNER_LABEL

    # smooth background: linear ramp + upsampled low-frequency noise field
    zz = np.arange(dims[0], dtype=np.float32) / max(dims[0] - 1, 1)
    base = _BACKGROUND_BASE + 0.1 * zz[:, None, None]
    coarse = rng.normal(0.0, 1.0, size=(1, 4, 4, 4)).astype(np.float32)
    field = resize3d_linear(coarse, dims)[0]
    img = base + _BACKGROUND_FIELD * field
    img = img + _LABEL_OFFSET * (labels > 0)
    img = img + _LABEL_OFFSET * (labels == INNER_LABEL)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=dims).astype(np.float32)
    return (Volume(data=img.astype(np.float32)[None]),
            LabelMap(labels=labels))


def synthesize_case(spec: SynthSpec, index: int):
    """One (Volume, LabelMap) pair, bit-identical for the same (seed, index)."""
    spec.validate()
    rng = _case_rng(spec, index)
    blobs = _draw_blobs(spec, rng)
    return _render_case(spec, rng, blobs)


def generate_synthetic(spec: SynthSpec, n: int):
    """The first ``n`` cases of the cohort described by ``spec``."""
    if n < 1:
        raise ConfigError(f"case count must be >= 1, got {n}")
    return [synthesize_case(spec, i) for i in range(n)]
