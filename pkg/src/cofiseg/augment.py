"""Training-time augmentations for (Volume, LabelMap) pairs.

Transforms are applied in a fixed order, each with its own probability:
axis flips, 90-degree rotations, isotropic scaling, additive Gaussian noise,
Gaussian blur, brightness/contrast jitter, low-resolution simulation, and a
gamma transform on min-max-normalized intensities.  Label maps receive only
the geometric transforms (flips, rotations, scaling with nearest sampling),
so they never acquire values outside the input label set.  Everything is
pure given the supplied rng.
"""

from dataclasses import dataclass, fields

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import LabelMap, Volume


@dataclass
class AugmentConfig:
    p_flip: float = 0.3
    p_rot90: float = 0.3
    p_scale: float = 0.2
    scale_range: tuple = (0.7, 1.4)
    p_noise: float = 0.15
    noise_sigma_range: tuple = (0.0, 0.1)
    p_blur: float = 0.1
    blur_sigma_range: tuple = (0.5, 1.0)
    p_jitter: float = 0.15
    brightness_range: tuple = (0.75, 1.25)
    contrast_range: tuple = (0.75, 1.25)
    p_lowres: float = 0.1
    lowres_factor_range: tuple = (1.0, 2.0)
    p_gamma: float = 0.15
    gamma_range: tuple = (0.7, 1.5)

    def validate(self):
        for f in fields(self):
            if f.name.startswith("p_"):
                p = getattr(self, f.name)
                if not (0.0 <= p <= 1.0):
                    raise ValueError(f"{f.name} must lie in [0, 1], got {p}")

    @classmethod
    def disabled(cls):
        """All probabilities zero: augment() becomes the identity."""
        kwargs = {f.name: 0.0 for f in fields(cls) if f.name.startswith("p_")}
        return cls(**kwargs)


def _grid_coords(dims, scale):
    """Sampling coordinates for isotropic zoom about the volume center."""
    coords = []
    for d in dims:
        c = (d - 1) / 2.0
        coords.append(c + (np.arange(d, dtype=np.float64) - c) / scale)
    return np.meshgrid(*coords, indexing="ij")


def _sample_linear(img, zz, yy, xx):
    d, h, w = img.shape
    z0 = np.clip(np.floor(zz).astype(np.int64), 0, d - 1)
    y0 = np.clip(np.floor(yy).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xx).astype(np.int64), 0, w - 1)
    z1, y1, x1 = np.minimum(z0 + 1, d - 1), np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fz = np.clip(zz, 0, d - 1) - z0
    fy = np.clip(yy, 0, h - 1) - y0
    fx = np.clip(xx, 0, w - 1) - x0
    out = ((1 - fz) * ((1 - fy) * ((1 - fx) * img[z0, y0, x0] + fx * img[z0, y0, x1])
                       + fy * ((1 - fx) * img[z0, y1, x0] + fx * img[z0, y1, x1]))
           + fz * ((1 - fy) * ((1 - fx) * img[z1, y0, x0] + fx * img[z1, y0, x1])
                   + fy * ((1 - fx) * img[z1, y1, x0] + fx * img[z1, y1, x1])))
    return out.astype(img.dtype)


def _sample_nearest(grid, zz, yy, xx):
    d, h, w = grid.shape
    zi = np.clip(np.rint(zz).astype(np.int64), 0, d - 1)
    yi = np.clip(np.rint(yy).astype(np.int64), 0, h - 1)
    xi = np.clip(np.rint(xx).astype(np.int64), 0, w - 1)
    return grid[zi, yi, xi]


def _zoom(img, labels, scale):
    zz, yy, xx = _grid_coords(labels.shape, scale)
    out_img = np.stack([_sample_linear(ch, zz, yy, xx) for ch in img])
    inside = ((zz >= 0) & (zz <= labels.shape[0] - 1)
              & (yy >= 0) & (yy <= labels.shape[1] - 1)
              & (xx >= 0) & (xx <= labels.shape[2] - 1))
    out_lab = np.where(inside, _sample_nearest(labels, zz, yy, xx), 0).astype(labels.dtype)
    return out_img, out_lab


def _minmax_gamma(img, gamma):
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-8:
        return img
    norm = (img - lo) / (hi - lo)
    return (lo + (hi - lo) * norm ** gamma).astype(img.dtype)


def augment(vol: Volume, lab: LabelMap, cfg: AugmentConfig, rng) -> tuple:
    """One augmented copy of the pair; the inputs are left untouched."""
    cfg.validate()
    img = vol.data.copy()
    labels = lab.labels.copy()

    for axis in (1, 2, 3):  # spatial axes of the (C, D, H, W) image
        if rng.random() < cfg.p_flip:
            img = np.flip(img, axis=axis)
            labels = np.flip(labels, axis=axis - 1)
    for axes in ((1, 2), (1, 3), (2, 3)):
        if rng.random() < cfg.p_rot90:
            k = int(rng.integers(1, 4))
            if img.shape[axes[0]] == img.shape[axes[1]]:  # keep dims fixed
                img = np.rot90(img, k=k, axes=axes)
                labels = np.rot90(labels, k=k, axes=(axes[0] - 1, axes[1] - 1))
    img = np.ascontiguousarray(img)
    labels = np.ascontiguousarray(labels)

    if rng.random() < cfg.p_scale:
        scale = float(np.clip(rng.uniform(*cfg.scale_range), 0.7, 1.4))
        img, labels = _zoom(img, labels, scale)
    if rng.random() < cfg.p_noise:
        sigma = rng.uniform(*cfg.noise_sigma_range)
        img = img + rng.normal(0.0, sigma, size=img.shape).astype(np.float32)
    if rng.random() < cfg.p_blur:
        sigma = rng.uniform(*cfg.blur_sigma_range)
        img = np.stack([gaussian_filter(ch, sigma=sigma) for ch in img])
    if rng.random() < cfg.p_jitter:
        brightness = rng.uniform(*cfg.brightness_range)
        contrast = rng.uniform(*cfg.contrast_range)
        mean = img.mean(axis=(1, 2, 3), keepdims=True)
        img = (mean + (img - mean) * contrast) * brightness
    if rng.random() < cfg.p_lowres:
        factor = rng.uniform(*cfg.lowres_factor_range)
        small = tuple(max(1, int(round(d / factor))) for d in labels.shape)
        if small != labels.shape:
            from .kernels import resize3d_linear, resize3d_nearest
            down = resize3d_nearest(img, small)
            img = resize3d_linear(down, labels.shape)
    if rng.random() < cfg.p_gamma:
        gamma = rng.uniform(*cfg.gamma_range)
        img = np.stack([_minmax_gamma(ch, gamma) for ch in img])

    return (Volume(data=np.ascontiguousarray(img, dtype=np.float32), spacing=vol.spacing),
            LabelMap(labels=np.ascontiguousarray(labels), spacing=lab.spacing))
