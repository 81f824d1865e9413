"""Vertical scanning, focus metrics and height reconstruction.

Scan coordinate convention: at scan position ``z`` the sample stage is
lowered by ``z`` (stage offset ``-z``), which is the same as raising the
focal plane by ``z`` relative to the sample. A surface point at height
``h`` is therefore sharpest at ``z = h`` and reconstructed heights are
read off the scan axis directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import math
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .instrument import InstrumentConfig
from .renderer import DetectorImage, RenderJob, RenderStats, render_image
from .scene.objects import Scene
from .scene.surfaces import Heightfield

SEED_POLICIES = ("fixed", "per-image")
DEFAULT_WINDOW = 5
DEFAULT_PROMINENCE = 0.1


class StackAcquisitionError(RuntimeError):
    def __init__(self, z: float, cause: Exception):
        super().__init__(f"render failed at scan position z={z} µm: {cause}")
        self.z = z


@dataclass
class ScanConfig:
    z_start: float
    z_end: float
    delta_z: float
    rays_per_image: int
    seed_policy: str = "per-image"
    seed: int = 0
    max_depth: int = 16
    batch_size: int = 100_000

    def __post_init__(self):
        if not self.delta_z > 0:
            raise ValueError("delta_z must be positive")
        if not self.z_end > self.z_start:
            raise ValueError("z_end must exceed z_start")
        if self.seed_policy not in SEED_POLICIES:
            raise ValueError(f"seed_policy must be one of {SEED_POLICIES}")
        if int(self.rays_per_image) < 1:
            raise ValueError("rays_per_image must be >= 1")
        if self.n_images < 3:
            raise ValueError("a scan needs at least 3 images")

    @property
    def n_images(self) -> int:
        # tolerate ranges that are a whole number of steps up to rounding
        return int(math.floor((self.z_end - self.z_start) / self.delta_z + 1e-9)) + 1

    def positions(self) -> np.ndarray:
        return self.z_start + self.delta_z * np.arange(self.n_images)

    def image_seed(self, index: int) -> int:
        if self.seed_policy == "fixed":
            return int(self.seed)
        ss = np.random.SeedSequence([int(self.seed) & (2 ** 63 - 1), int(index)])
        return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class ImageStack:
    images: list[DetectorImage]
    z_positions: np.ndarray
    stats: list[RenderStats] = field(default_factory=list)

    def __post_init__(self):
        self.z_positions = np.asarray(self.z_positions, dtype=np.float64)
        if len(self.images) != len(self.z_positions):
            raise ValueError("one z position per image is required")
        if len(self.z_positions) > 1 and np.any(np.diff(self.z_positions) <= 0):
            raise ValueError("z positions must be strictly increasing")
        if self.images:
            shape = self.images[0].counts.shape
            if any(im.counts.shape != shape for im in self.images):
                raise ValueError("stack images differ in dimensions")

    def __len__(self) -> int:
        return len(self.images)

    def array(self) -> np.ndarray:
        """Counts as a (n_z, height, width) array."""
        return np.stack([im.counts for im in self.images])


def acquire_stack(instrument: InstrumentConfig, scene: Scene, scan: ScanConfig,
                  workers: int | None = None, progress=None) -> ImageStack:
    """Render one image per scan position with the stage offset by ``-z``."""
    images, stats = [], []
    z_pos = scan.positions()
    for k, z in enumerate(z_pos):
        inst = replace(instrument, sample_stage_z=instrument.sample_stage_z - float(z))
        job = RenderJob(inst, scene, scan.rays_per_image, scan.image_seed(k), scan.max_depth,
                        scan.batch_size)
        try:
            image, st = render_image(job, workers)
        except Exception as exc:
            raise StackAcquisitionError(float(z), exc) from exc
        image.meta["z"] = float(z)
        images.append(image)
        stats.append(st)
        if progress is not None:
            progress(k, float(z), st)
    return ImageStack(images, z_pos, stats)


# ---------------------------------------------------------------- focus metric

def modified_laplacian(image: np.ndarray) -> np.ndarray:
    """|2I - I(x-1) - I(x+1)| + |2I - I(y-1) - I(y+1)| with replicated edges."""
    p = np.pad(np.asarray(image, dtype=np.float64), 1, mode="edge")
    c = p[1:-1, 1:-1]
    return (np.abs(2 * c - p[1:-1, :-2] - p[1:-1, 2:])
            + np.abs(2 * c - p[:-2, 1:-1] - p[2:, 1:-1]))


def _check_window(window: int, shape) -> int:
    window = int(window)
    if window < 3 or window % 2 == 0:
        raise ValueError(f"focus window must be odd and >= 3, got {window}")
    if window > min(shape):
        raise ValueError(f"focus window {window} exceeds image size {tuple(shape)}")
    return window


def _box_sum(a: np.ndarray, window: int) -> np.ndarray:
    """Sum over window x window neighbourhoods of an array padded by window // 2."""
    c = np.pad(np.cumsum(np.cumsum(a, axis=0), axis=1), ((1, 0), (1, 0)))
    return c[window:, window:] - c[:-window, window:] - c[window:, :-window] + c[:-window, :-window]


def focus_metric(image, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Sum-modified-Laplacian over a ``window`` x ``window`` neighbourhood.

    The image is extended by edge replication, so the Laplacian terms near
    the border are those of the replicated image.
    """
    counts = image.counts if isinstance(image, DetectorImage) else np.asarray(image, np.float64)
    if counts.ndim != 2:
        raise ValueError("focus_metric expects a 2-D image")
    window = _check_window(window, counts.shape)
    r = window // 2
    ml = modified_laplacian(np.pad(counts, r, mode="edge"))
    return _box_sum(ml, window)


def focus_curves(stack: ImageStack, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Focus metric of every image, shape (n_z, height, width)."""
    return np.stack([focus_metric(im, window) for im in stack.images])


# ---------------------------------------------------------------- reconstruction

@dataclass
class Topography:
    heights: np.ndarray          # (ny, nx) µm, NaN where invalid
    valid: np.ndarray            # (ny, nx) bool
    dx: float                    # lateral pixel pitch on the sample (µm)
    dy: float
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape

    def x_coords(self) -> np.ndarray:
        nx = self.heights.shape[1]
        return (np.arange(nx) - (nx - 1) / 2.0) * self.dx

    def y_coords(self) -> np.ndarray:
        ny = self.heights.shape[0]
        return (np.arange(ny) - (ny - 1) / 2.0) * self.dy

    def to_heightfield(self, fill: float | None = None) -> Heightfield:
        """Heightfield for export; invalid pixels take ``fill`` (default: median valid height)."""
        if fill is None:
            fill = float(np.median(self.heights[self.valid])) if self.valid.any() else 0.0
        h = np.where(self.valid, self.heights, fill)
        ny, nx = h.shape
        return Heightfield(nx, ny, self.dx, self.dy, h)


def parabolic_peak(z_prev, z_peak, z_next, f_prev, f_peak, f_next):
    """Abscissa of the vertex of the parabola through three points (arrays ok)."""
    z0, z1, z2 = (np.asarray(v, dtype=np.float64) for v in (z_prev, z_peak, z_next))
    f0, f1, f2 = (np.asarray(v, dtype=np.float64) for v in (f_prev, f_peak, f_next))
    a = z1 - z0
    b = z1 - z2
    num = a * a * (f1 - f2) - b * b * (f1 - f0)
    den = a * (f1 - f2) - b * (f1 - f0)
    safe = den != 0
    shift = np.divide(num, 2.0 * den, out=np.zeros_like(num), where=safe)
    return z1 - np.where(safe, shift, 0.0)


def peak_heights(curves: np.ndarray, z: np.ndarray, prominence: float = DEFAULT_PROMINENCE):
    """Per-pixel refined peak position and validity from focus curves (n_z, ...).

    A pixel is invalid when its maximum sits on the first or last image or
    when ``(max - min) / max`` of its curve is below ``prominence``.
    """
    curves = np.asarray(curves, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n = curves.shape[0]
    if n < 3:
        raise ValueError("peak localisation needs at least 3 samples")
    k = np.argmax(curves, axis=0)
    fmax = np.take_along_axis(curves, k[None], 0)[0]
    fmin = curves.min(axis=0)
    prom = np.divide(fmax - fmin, fmax, out=np.zeros_like(fmax), where=fmax > 0)
    valid = (k > 0) & (k < n - 1) & (prom >= prominence)
    kc = np.clip(k, 1, n - 2)
    f0 = np.take_along_axis(curves, (kc - 1)[None], 0)[0]
    f1 = np.take_along_axis(curves, kc[None], 0)[0]
    f2 = np.take_along_axis(curves, (kc + 1)[None], 0)[0]
    h = parabolic_peak(z[kc - 1], z[kc], z[kc + 1], f0, f1, f2)
    h = np.clip(h, z[kc - 1], z[kc + 1])
    return np.where(valid, h, np.nan), valid


def reconstruct_topography(stack: ImageStack, window: int = DEFAULT_WINDOW,
                           prominence: float = DEFAULT_PROMINENCE,
                           pixel_pitch: tuple[float, float] = (1.0, 1.0)) -> Topography:
    """Height of maximal sharpness per pixel, refined by a 3-point parabola.

    ``pixel_pitch`` is the pixel size projected onto the sample (µm).
    """
    if len(stack) < 3:
        raise ValueError("reconstruction needs a stack of at least 3 images")
    curves = focus_curves(stack, window)
    h, valid = peak_heights(curves, stack.z_positions, prominence)
    meta = dict(window=int(window), prominence=float(prominence), n_images=len(stack),
                z_start=float(stack.z_positions[0]), z_end=float(stack.z_positions[-1]))
    return Topography(h, valid, float(pixel_pitch[0]), float(pixel_pitch[1]), meta)


def topography_pitch(instrument: InstrumentConfig) -> tuple[float, float]:
    """Detector pixel pitch projected onto the sample, µm."""
    px, py = instrument.detector.pixel_pitch
    return px / instrument.magnification * 1e3, py / instrument.magnification * 1e3


# ---------------------------------------------------------------- comparison

@dataclass
class Comparison:
    rms_deviation: float
    max_deviation: float
    piston: float
    n_valid: int
    deviation: np.ndarray        # measured - reference - piston, NaN where invalid
    reference: np.ndarray        # reference resampled to the measured grid
    measured: np.ndarray

    def profile(self, row: int | None = None, column: int | None = None):
        """(measured, reference) profile pair along one row or one column.

        The measured profile is piston-corrected and NaN at invalid pixels.
        """
        if (row is None) == (column is None):
            raise ValueError("give exactly one of row or column")
        m = self.measured - self.piston
        if row is not None:
            return m[row].copy(), self.reference[row].copy()
        return m[:, column].copy(), self.reference[:, column].copy()


def resample_heightfield(reference: Heightfield, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear samples of ``reference`` at the grid ``x`` (columns) by ``y`` (rows)."""
    interp = RegularGridInterpolator((reference.y_coords(), reference.x_coords()), reference.heights,
                                     method="linear", bounds_error=False, fill_value=None)
    Y, X = np.meshgrid(y, x, indexing="ij")
    return interp(np.stack([Y.ravel(), X.ravel()], axis=1)).reshape(len(y), len(x))


def compare_topography(measured: Topography, reference: Heightfield) -> Comparison:
    """RMS and max |deviation| over valid pixels after removing the mean offset."""
    ref = resample_heightfield(reference, measured.x_coords(), measured.y_coords())
    valid = measured.valid & np.isfinite(measured.heights)
    if not valid.any():
        raise ValueError("measured topography has no valid pixels")
    diff = measured.heights[valid] - ref[valid]
    piston = float(diff.mean())
    diff = diff - piston
    dev = np.full(measured.heights.shape, np.nan)
    dev[valid] = diff
    return Comparison(float(np.sqrt(np.mean(diff ** 2))), float(np.max(np.abs(diff))), piston,
                      int(valid.sum()), dev, ref, measured.heights.copy())


def fit_plane(topo: Topography) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares plane ``a + b x + c y`` through valid pixels; returns (coeffs, residuals)."""
    X, Y = np.meshgrid(topo.x_coords(), topo.y_coords())
    v = topo.valid & np.isfinite(topo.heights)
    if v.sum() < 3:
        raise ValueError("plane fit needs at least 3 valid pixels")
    A = np.column_stack([np.ones(v.sum()), X[v], Y[v]])
    coeffs, *_ = np.linalg.lstsq(A, topo.heights[v], rcond=None)
    res = np.full(topo.heights.shape, np.nan)
    res[v] = topo.heights[v] - A @ coeffs
    return coeffs, res


# ---------------------------------------------------------------- stack files

MANIFEST = "manifest.txt"


def write_stack(stack: ImageStack, directory, provenance: dict | None = None) -> Path:
    """One 16-bit image (+ sidecar) per scan position and a text manifest.

    Manifest lines: ``filename z_um n_rays seed``.
    """
    from .io import write_image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# filename z_um n_rays seed"]
    for k, (im, z) in enumerate(zip(stack.images, stack.z_positions)):
        name = f"z{k:04d}.png"
        write_image(directory / name, im, provenance)
        lines.append(f"{name} {float(z)!r} {int(im.meta.get('n_rays', 0))} {int(im.meta.get('seed', 0))}")
    path = directory / MANIFEST
    path.write_text("\n".join(lines) + "\n")
    return path


def read_stack(directory) -> ImageStack:
    from .io import read_image

    directory = Path(directory)
    images, z = [], []
    for line in (directory / MANIFEST).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"malformed manifest line: {line!r}")
        im = read_image(directory / parts[0])
        im.meta.update(z=float(parts[1]), n_rays=int(parts[2]), seed=int(parts[3]))
        images.append(im)
        z.append(float(parts[1]))
    return ImageStack(images, np.array(z))
