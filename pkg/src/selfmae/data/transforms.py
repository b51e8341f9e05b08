"""Intensity preprocessing and geometric augmentation."""

from __future__ import annotations

import numpy as np

NONZERO_EPS = 1e-6


def clip_rescale(x, lo: float = -175.0, hi: float = 250.0) -> np.ndarray:
    """Clamp to ``[lo, hi]`` and map linearly onto ``[0, 1]``."""
    if not lo < hi:
        raise ValueError(f"clip_rescale needs lo < hi, got {lo}, {hi}")
    x = np.asarray(x)
    dtype = x.dtype if x.dtype.kind == "f" else np.float32
    return ((np.clip(x, lo, hi) - lo) / (hi - lo)).astype(dtype, copy=False)


def instance_norm_nonzero(x, eps: float = NONZERO_EPS) -> np.ndarray:
    """Standardise each channel of ``[C, *spatial]`` over its non-zero voxels; zeros stay zero."""
    x = np.asarray(x)
    out = x.astype(np.float32 if x.dtype.kind != "f" else x.dtype, copy=True)
    for c in range(out.shape[0]):
        ch = out[c]
        nz = ch != 0
        if not nz.any():
            continue
        vals = ch[nz]
        mu = vals.mean()
        sd = np.sqrt(vals.var() + eps)
        ch[nz] = (vals - mu) / sd
    return out


def hist_equalize(img) -> np.ndarray:
    """Classic CDF remap of a single-channel ``uint8`` image."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError(f"hist_equalize expects a 2D uint8 image, got {img.dtype} {img.shape}")
    hist = np.bincount(img.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    n = img.size
    cdf_min = cdf[hist > 0][0]
    if n == cdf_min:
        return img.copy()
    lut = np.floor(255.0 * (cdf - cdf_min) / (n - cdf_min) + 0.5)
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    return lut[img]


def random_flip_crop(x, labels=None, out_size=None, rng: np.random.Generator | None = None, flip: bool = True):
    """Random per-axis flips (p = 0.5 each) then a uniform crop of ``x [C, *spatial]``.

    ``labels`` (``[*spatial]``) receives the identical geometry. Returns
    ``(x, labels)``.
    """
    x = np.asarray(x)
    spatial = x.shape[1:]
    if out_size is None:
        out_size = spatial
    if isinstance(out_size, int):
        out_size = (out_size,) * len(spatial)
    out_size = tuple(int(s) for s in out_size)
    if len(out_size) != len(spatial):
        raise ValueError(f"crop size {out_size} does not match spatial rank {len(spatial)}")
    for n, o in zip(spatial, out_size):
        if o > n:
            raise ValueError(f"crop size {out_size} exceeds input size {spatial}")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != spatial:
            raise ValueError(f"labels {labels.shape} do not match image {spatial}")
    if rng is None and (flip or out_size != spatial):
        raise ValueError("random_flip_crop needs an explicit rng")
    if flip:
        for ax in range(len(spatial)):
            if rng.random() < 0.5:
                x = np.flip(x, axis=ax + 1)
                if labels is not None:
                    labels = np.flip(labels, axis=ax)
    origin = [int(rng.integers(0, n - o + 1)) if n > o else 0 for n, o in zip(spatial, out_size)]
    sl = tuple(slice(a, a + o) for a, o in zip(origin, out_size))
    x = np.ascontiguousarray(x[(slice(None),) + sl])
    if labels is not None:
        labels = np.ascontiguousarray(labels[sl])
    return x, labels


def center_crop(x, labels=None, out_size=None):
    x = np.asarray(x)
    spatial = x.shape[1:]
    if out_size is None:
        return x, labels
    if isinstance(out_size, int):
        out_size = (out_size,) * len(spatial)
    sl = tuple(slice((n - o) // 2, (n - o) // 2 + o) for n, o in zip(spatial, out_size))
    x = np.ascontiguousarray(x[(slice(None),) + sl])
    if labels is not None:
        labels = np.ascontiguousarray(np.asarray(labels)[sl])
    return x, labels
