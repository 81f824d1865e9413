"""Heightfields: procedural test structures, micro-roughness, text I/O.

Heights and lateral spacings are micrometres. Grid nodes sit at
``x_i = (i - (nx - 1) / 2) * dx`` (likewise for y), i.e. the grid is
centred on the optical axis. ``heights`` has shape ``(ny, nx)``: row j
holds the profile at ``y_j``.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
import warnings

import numpy as np
from scipy import ndimage

SURFACE_KINDS = ("plane", "inclined_plane", "step", "sphere_cap", "sinusoid", "chirp", "plateau")


class ParameterError(ValueError):
    pass


@dataclass
class Heightfield:
    nx: int
    ny: int
    dx: float
    dy: float
    heights: np.ndarray

    def __post_init__(self):
        self.nx = int(self.nx)
        self.ny = int(self.ny)
        if self.nx < 2 or self.ny < 2:
            raise ValueError("heightfield needs at least 2x2 nodes")
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError("grid spacing must be positive")
        self.heights = np.asarray(self.heights, dtype=np.float64).reshape(self.ny, self.nx)
        if not np.all(np.isfinite(self.heights)):
            raise ValueError("heights must be finite")

    def x_coords(self) -> np.ndarray:
        return (np.arange(self.nx) - (self.nx - 1) / 2.0) * self.dx

    def y_coords(self) -> np.ndarray:
        return (np.arange(self.ny) - (self.ny - 1) / 2.0) * self.dy

    def grid(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x_coords(), self.y_coords())

    def with_heights(self, heights) -> "Heightfield":
        return Heightfield(self.nx, self.ny, self.dx, self.dy, heights)

    def extent(self) -> tuple[float, float]:
        return (self.nx - 1) * self.dx, (self.ny - 1) * self.dy


@dataclass
class MicroRoughnessParams:
    noise_mean: float = 0.0
    noise_sigma: float = 0.1
    kernel_sigma: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")
        if not self.kernel_sigma > 0:
            raise ParameterError("kernel_sigma must be > 0")


def _positive(params: dict, name: str, default=None) -> float:
    v = params.get(name, default)
    if v is None:
        raise ParameterError(f"missing parameter '{name}'")
    v = float(v)
    if not v > 0:
        raise ParameterError(f"'{name}' must be positive, got {v}")
    return v


def surface_function(kind: str, params: dict):
    """Analytic height function ``z(x, y)`` (µm) for the deterministic kinds."""
    p = dict(params)
    if kind == "plane":
        h = float(p.get("height", 0.0))
        return lambda x, y: np.full(np.broadcast(x, y).shape, h)
    if kind == "inclined_plane":
        sx = float(p.get("slope_x", p.get("slope", 0.0)))
        sy = float(p.get("slope_y", 0.0))
        h = float(p.get("height", 0.0))
        return lambda x, y: h + sx * np.asarray(x) + sy * np.asarray(y)
    if kind == "step":
        step = _positive(p, "height")
        base = float(p.get("base", 0.0))
        edge = float(p.get("position", 0.0))
        return lambda x, y: np.where(np.asarray(x) + 0 * np.asarray(y) < edge, base, base + step)
    if kind == "sphere_cap":
        r = _positive(p, "radius")
        cap = _positive(p, "cap_height", r)
        if cap > r:
            raise ParameterError("cap_height must not exceed radius")
        base = float(p.get("base", 0.0))

        def cap_fn(x, y):
            rr = np.asarray(x) ** 2 + np.asarray(y) ** 2
            z = np.sqrt(np.maximum(r * r - rr, 0.0)) - (r - cap)
            return base + np.maximum(z, 0.0)
        return cap_fn
    if kind == "sinusoid":
        a = _positive(p, "amplitude")
        lam = _positive(p, "wavelength")
        phase = float(p.get("phase", 0.0))
        return lambda x, y: a * np.sin(2 * np.pi * np.asarray(x) / lam + phase) + 0 * np.asarray(y)
    if kind == "chirp":
        # phase 2*pi*scale*s^2/(wavelength*length) with s measured from x_start:
        # local frequency rises linearly from 0 to 2*scale/wavelength at s = length
        a = _positive(p, "amplitude")
        lam = _positive(p, "wavelength")
        length = _positive(p, "length")
        scale = _positive(p, "scale", 1.0)
        x0 = float(p.get("x_start", -length / 2.0))

        def chirp_fn(x, y):
            s = np.asarray(x) - x0
            return a * np.sin(2 * np.pi * scale * s * s / (lam * length)) + 0 * np.asarray(y)
        return chirp_fn
    raise ParameterError(f"no analytic form for surface kind '{kind}'")


def generate_surface(kind: str, params: dict | None = None, **kw) -> Heightfield:
    """Sample a test structure on a regular grid.

    Grid keys: ``nx``, ``ny`` (nodes), ``dx``, ``dy`` (µm). Kind keys:

    plane          height
    inclined_plane slope_x, slope_y, height
    step           height (> 0), base, position (edge x)
    sphere_cap     radius, cap_height, base
    sinusoid       amplitude, wavelength, phase
    chirp          amplitude, wavelength, length, scale, x_start
    plateau        levels, n_blocks, block_size, tilt_range,
                   texture_amplitude, texture_scale, seed
    """
    p = dict(params or {})
    p.update(kw)
    if kind not in SURFACE_KINDS:
        raise ParameterError(f"unknown surface kind '{kind}'; expected one of {SURFACE_KINDS}")
    nx = int(p.get("nx", 64))
    ny = int(p.get("ny", nx))
    dx = _positive(p, "dx", 1.0)
    dy = _positive(p, "dy", dx)
    if kind == "chirp" and "length" not in p:
        p["length"] = (nx - 1) * dx
    base = Heightfield(nx, ny, dx, dy, np.zeros((ny, nx)))
    X, Y = base.grid()
    if kind == "plateau":
        return base.with_heights(_plateau(X, Y, p))
    return base.with_heights(surface_function(kind, p)(X, Y))


def _plateau(X, Y, p: dict) -> np.ndarray:
    """Raised blocks at several levels, every facet tilted, plus a fine texture.

    A class stand-in for irregular multi-level samples with steep flanks.
    The base and each block are planar facets whose slope magnitude is
    drawn from ``tilt_range`` with a random azimuth, so no region faces
    the objective squarely. Blocks sit on a seeded random layout; the
    texture is band-limited noise of RMS ``texture_amplitude`` and
    correlation length ``texture_scale``.
    """
    levels = [float(v) for v in p.get("levels", (2.0, 4.0, 6.0))]
    if not levels or min(levels) < 0:
        raise ParameterError("plateau levels must be a non-empty list of heights >= 0")
    n_blocks = int(p.get("n_blocks", 6))
    lo_tilt, hi_tilt = (float(v) for v in p.get("tilt_range", (0.3, 0.6)))
    if not 0.0 <= lo_tilt <= hi_tilt:
        raise ParameterError("tilt_range must satisfy 0 <= low <= high")
    rng = np.random.default_rng(int(p.get("seed", 0)))
    width = X.max() - X.min()
    height = Y.max() - Y.min()
    block = float(p.get("block_size", 0.3 * min(width, height)))

    def facet(cx, cy):
        s = rng.uniform(lo_tilt, hi_tilt)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        return s * np.cos(phi) * (X - cx) + s * np.sin(phi) * (Y - cy)

    z = facet(0.0, 0.0)
    for k in range(n_blocks):
        cx = X.min() + rng.uniform(0.1, 0.9) * width
        cy = Y.min() + rng.uniform(0.1, 0.9) * height
        w = block * rng.uniform(0.5, 1.0)
        h = block * rng.uniform(0.5, 1.0)
        inside = (np.abs(X - cx) <= w / 2) & (np.abs(Y - cy) <= h / 2)
        z[inside] = levels[k % len(levels)] + facet(cx, cy)[inside]
    amp = float(p.get("texture_amplitude", 0.2))
    if amp < 0:
        raise ParameterError("texture_amplitude must be >= 0")
    if amp > 0:
        dx = X[0, 1] - X[0, 0]
        scale_nodes = float(p.get("texture_scale", 2.0)) / dx
        noise = rng.standard_normal(X.shape)
        tex = ndimage.gaussian_filter(noise, scale_nodes, mode="wrap")
        tex *= amp / max(tex.std(), 1e-300)
        z = z + tex
    return z


def gaussian_kernel1d(sigma_nodes: float) -> np.ndarray:
    """Sampled Gaussian truncated at 4 sigma and normalised to unit sum."""
    radius = max(1, int(math.ceil(4.0 * sigma_nodes)))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma_nodes) ** 2)
    return w / w.sum()


def roughness_kernels(h: Heightfield, p: MicroRoughnessParams) -> tuple[np.ndarray, np.ndarray]:
    return gaussian_kernel1d(p.kernel_sigma / h.dx), gaussian_kernel1d(p.kernel_sigma / h.dy)


def predicted_roughness_sigma(h: Heightfield, p: MicroRoughnessParams) -> float:
    """Std of the filtered noise: sigma * sqrt(sum of squared kernel weights)."""
    kx, ky = roughness_kernels(h, p)
    return p.noise_sigma * math.sqrt(float(np.sum(kx ** 2) * np.sum(ky ** 2)))


def add_micro_roughness(h: Heightfield, p: MicroRoughnessParams) -> Heightfield:
    """Superimpose seeded, Gaussian-filtered white noise on ``h``.

    The noise is drawn on a grid padded by the kernel radius and filtered
    with the separable truncated kernel, so every output node sees a full
    kernel support and the field statistics are stationary.
    """
    if p.kernel_sigma < 0.5 * min(h.dx, h.dy):
        warnings.warn(f"kernel_sigma={p.kernel_sigma} µm is below half a grid cell; "
                      "the filter is close to the identity", stacklevel=2)
    if p.noise_sigma == 0.0 and p.noise_mean == 0.0:
        return h.with_heights(h.heights.copy())
    kx, ky = roughness_kernels(h, p)
    rx = len(kx) // 2
    ry = len(ky) // 2
    rng = np.random.default_rng(p.rng_seed)
    noise = rng.standard_normal((h.ny + 2 * ry, h.nx + 2 * rx)) * p.noise_sigma
    noise = ndimage.correlate1d(noise, kx, axis=1, mode="constant")
    noise = ndimage.correlate1d(noise, ky, axis=0, mode="constant")
    noise = noise[ry:ry + h.ny, rx:rx + h.nx]
    return h.with_heights(h.heights + noise + p.noise_mean)


# ---------------------------------------------------------------- text I/O

def write_heightfield(h: Heightfield, path) -> None:
    """Header ``nx ny dx dy`` then nx*ny heights, row-major (x fastest), µm."""
    with open(path, "w") as f:
        f.write(f"{h.nx} {h.ny} {h.dx!r} {h.dy!r}\n")
        for row in h.heights:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_heightfield(path) -> Heightfield:
    with open(path) as f:
        tokens = f.read().split()
    if len(tokens) < 4:
        raise ValueError(f"{path}: missing 'nx ny dx dy' header")
    try:
        nx, ny = int(tokens[0]), int(tokens[1])
        dx, dy = float(tokens[2]), float(tokens[3])
        values = np.array([float(t) for t in tokens[4:]])
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc
    if values.size != nx * ny:
        raise ValueError(f"{path}: expected {nx * ny} heights, found {values.size}")
    return Heightfield(nx, ny, dx, dy, values.reshape(ny, nx))
