"""Point-spread-function post-processing of rendered detector images."""

from __future__ import annotations

from dataclasses import replace
import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from .renderer import DetectorImage


def gaussian_psf(sigma: float, radius: int | None = None) -> np.ndarray:
    """Sampled isotropic Gaussian of ``sigma`` pixels on a (2r+1)^2 grid, unit sum.

    The default radius is ``ceil(4 sigma)``.
    """
    if not sigma > 0:
        raise ValueError(f"PSF sigma must be positive, got {sigma}")
    r = int(math.ceil(4.0 * sigma)) if radius is None else int(radius)
    k = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (k / sigma) ** 2)
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def load_kernel(path) -> np.ndarray:
    """Whitespace-separated 2-D kernel (one row per line) or a ``.npy`` array."""
    path = Path(path)
    if path.suffix == ".npy":
        kernel = np.load(path)
    else:
        kernel = np.loadtxt(path, ndmin=2)
    return np.asarray(kernel, dtype=np.float64)


def normalize_kernel(kernel) -> np.ndarray:
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2 or k.size == 0:
        raise ValueError("PSF kernel must be a non-empty 2-D array")
    if not np.all(np.isfinite(k)):
        raise ValueError("PSF kernel must be finite")
    if np.any(k < 0):
        raise ValueError("PSF kernel has negative entries")
    total = k.sum()
    if not total > 0:
        raise ValueError("PSF kernel sums to zero")
    return k / total


def apply_psf(image: DetectorImage, sigma: float | None = None, kernel=None) -> DetectorImage:
    """Convolve with a unit-sum PSF; borders use edge replication.

    Give either a Gaussian ``sigma`` in pixels or an explicit ``kernel``
    (array or path to a kernel file). With edge replication the convolved
    image does not conserve the sum exactly near bright borders, so the
    result is rescaled to the input total.
    """
    if (sigma is None) == (kernel is None):
        raise ValueError("give exactly one of sigma or kernel")
    if kernel is not None:
        k = normalize_kernel(load_kernel(kernel) if isinstance(kernel, (str, Path)) else kernel)
    else:
        k = gaussian_psf(float(sigma))
    counts = image.counts
    out = ndimage.convolve(counts, k, mode="nearest")
    total_in = counts.sum()
    total_out = out.sum()
    if total_out > 0:
        out *= total_in / total_out
    meta = dict(image.meta)
    meta["psf"] = {"sigma": float(sigma)} if sigma is not None else {"kernel_shape": list(k.shape)}
    return replace(image, counts=out, meta=meta)
