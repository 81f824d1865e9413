"""Light-matter interaction: emission, refraction, reflection, surface scattering.

The surface-scattering model uses a Henyey-Greenstein lobe centred on the
specular direction. ``g = 0`` is special-cased to cosine-weighted
(Lambertian) sampling about the surface normal and ``g = 1`` to exact
mirror reflection, so both limits hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
from numba import njit

from .geometry import as_vec3
from .rng import RngStream, stream_key, uniform

HG_MAX_ATTEMPTS = 16
_HG_ISOTROPIC_G = 1e-6

# scatter kinds
REFLECTED, REFRACTED, SCATTERED, ABSORBED = "reflected", "refracted", "scattered", "absorbed"


# ---------------------------------------------------------------- materials

@dataclass(frozen=True)
class Dielectric:
    n: float

    def __post_init__(self):
        if not self.n >= 1.0:
            raise ValueError(f"refractive index must be >= 1, got {self.n}")


@dataclass(frozen=True)
class Mirror:
    pass


@dataclass(frozen=True)
class HGSurface:
    g: float

    def __post_init__(self):
        if not 0.0 <= self.g <= 1.0:
            raise ValueError(f"g must lie in [0, 1], got {self.g}")


@dataclass(frozen=True)
class Absorber:
    pass


@dataclass(frozen=True)
class Emitter:
    pass


MaterialModel = Dielectric | Mirror | HGSurface | Absorber | Emitter


@dataclass
class ScatterEvent:
    outgoing_direction: np.ndarray | None
    kind: str


# ---------------------------------------------------------------- kernels

@njit(cache=True, nogil=True, inline="always")
def onb(nx, ny, nz):
    """Orthonormal tangent pair for unit ``n`` (Duff et al. branchless form)."""
    sign = 1.0 if nz >= 0.0 else -1.0
    a = -1.0 / (sign + nz)
    b = nx * ny * a
    return (1.0 + sign * nx * nx * a, sign * b, -sign * nx), (b, sign + ny * ny * a, -ny)


@njit(cache=True, nogil=True, inline="always")
def reflect_k(dx, dy, dz, nx, ny, nz):
    c = 2.0 * (dx * nx + dy * ny + dz * nz)
    return dx - c * nx, dy - c * ny, dz - c * nz


@njit(cache=True, nogil=True, inline="always")
def refract_k(dx, dy, dz, nx, ny, nz, n1, n2):
    """Snell refraction; ``n`` must oppose ``d``. Returns (x, y, z, tir)."""
    eta = n1 / n2
    cosi = -(dx * nx + dy * ny + dz * nz)
    k = 1.0 - eta * eta * (1.0 - cosi * cosi)
    if k < 0.0:
        rx, ry, rz = reflect_k(dx, dy, dz, nx, ny, nz)
        return rx, ry, rz, True
    f = eta * cosi - math.sqrt(k)
    ox = eta * dx + f * nx
    oy = eta * dy + f * ny
    oz = eta * dz + f * nz
    s = 1.0 / math.sqrt(ox * ox + oy * oy + oz * oz)
    return ox * s, oy * s, oz * s, False


@njit(cache=True, nogil=True, inline="always")
def around(ax, ay, az, cos_t, phi):
    """Direction at polar angle acos(cos_t), azimuth phi about unit axis a."""
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    t1, t2 = onb(ax, ay, az)
    cp = math.cos(phi) * sin_t
    sp = math.sin(phi) * sin_t
    x = cp * t1[0] + sp * t2[0] + cos_t * ax
    y = cp * t1[1] + sp * t2[1] + cos_t * ay
    z = cp * t1[2] + sp * t2[2] + cos_t * az
    s = 1.0 / math.sqrt(x * x + y * y + z * z)
    return x * s, y * s, z * s


@njit(cache=True, nogil=True, inline="always")
def lambert_k(nx, ny, nz, u1, u2):
    # cos(theta) = sqrt(u) inverts F(c) = c^2; keep strictly inside the hemisphere
    c = math.sqrt(u1)
    if c <= 0.0:
        c = 1e-300
    return around(nx, ny, nz, c, 2.0 * math.pi * u2)


@njit(cache=True, nogil=True, inline="always")
def hg_cos(g, u):
    """Inverse-CDF sample of cos(theta) from the Henyey-Greenstein law."""
    if g < _HG_ISOTROPIC_G:
        return 1.0 - 2.0 * u
    s = (1.0 - g * g) / (1.0 - g + 2.0 * g * u)
    c = (1.0 + g * g - s * s) / (2.0 * g)
    if c > 1.0:
        return 1.0
    if c < -1.0:
        return -1.0
    return c


@njit(cache=True, nogil=True)
def hg_surface_k(dx, dy, dz, nx, ny, nz, g, key, counter):
    """Scatter incident ``d`` off a surface with normal ``n`` (n . d < 0).

    Returns (x, y, z, counter). The result always satisfies out . n > 0.
    ``counter`` is a plain integer position in the stream.
    """
    if g <= 0.0:
        x, y, z = lambert_k(nx, ny, nz, uniform(key, counter), uniform(key, counter + 1))
        return x, y, z, counter + 2
    sx, sy, sz = reflect_k(dx, dy, dz, nx, ny, nz)
    if g >= 1.0:
        return sx, sy, sz, counter
    x = sx
    y = sy
    z = sz
    for _ in range(HG_MAX_ATTEMPTS):
        c = hg_cos(g, uniform(key, counter))
        phi = 2.0 * math.pi * uniform(key, counter + 1)
        counter += 2
        x, y, z = around(sx, sy, sz, c, phi)
        if x * nx + y * ny + z * nz > 0.0:
            return x, y, z, counter
    # mirror the last draw across the tangent plane
    x, y, z = reflect_k(x, y, z, nx, ny, nz)
    if x * nx + y * ny + z * nz > 0.0:
        return x, y, z, counter
    return sx, sy, sz, counter


@njit(cache=True, nogil=True)
def _lambert_batch(nx, ny, nz, key, out):
    for i in range(out.shape[0]):
        x, y, z = lambert_k(nx, ny, nz, uniform(key, 2 * i), uniform(key, 2 * i + 1))
        out[i, 0] = x
        out[i, 1] = y
        out[i, 2] = z


@njit(cache=True, nogil=True)
def _hg_lobe_batch(ax, ay, az, g, key, out):
    for i in range(out.shape[0]):
        x, y, z = around(ax, ay, az, hg_cos(g, uniform(key, 2 * i)),
                         2.0 * math.pi * uniform(key, 2 * i + 1))
        out[i, 0] = x
        out[i, 1] = y
        out[i, 2] = z


@njit(cache=True, nogil=True)
def _hg_surface_batch(dx, dy, dz, nx, ny, nz, g, seed, out):
    for i in range(out.shape[0]):
        key = stream_key(seed, 0, i)
        x, y, z, _ = hg_surface_k(dx, dy, dz, nx, ny, nz, g, key, 0)
        out[i, 0] = x
        out[i, 1] = y
        out[i, 2] = z


# ---------------------------------------------------------------- public API

def _unit(v, what: str) -> np.ndarray:
    a = as_vec3(v)
    if abs(np.linalg.norm(a) - 1.0) > 1e-9:
        raise ValueError(f"{what} must be a unit vector")
    return a


def _check_incidence(d: np.ndarray, n: np.ndarray) -> None:
    if not float(np.dot(d, n)) < 0.0:
        raise ValueError("incident direction must oppose the normal (incident . normal < 0)")


def refract(incident, normal, n1: float, n2: float) -> ScatterEvent:
    d = _unit(incident, "incident")
    n = _unit(normal, "normal")
    _check_incidence(d, n)
    if n1 < 1.0 or n2 < 1.0:
        raise ValueError("refractive indices must be >= 1")
    x, y, z, tir = refract_k(d[0], d[1], d[2], n[0], n[1], n[2], float(n1), float(n2))
    return ScatterEvent(np.array([x, y, z]), REFLECTED if tir else REFRACTED)


def reflect_specular(incident, normal) -> ScatterEvent:
    d = _unit(incident, "incident")
    n = _unit(normal, "normal")
    _check_incidence(d, n)
    return ScatterEvent(np.array(reflect_k(d[0], d[1], d[2], n[0], n[1], n[2])), REFLECTED)


def sample_lambertian(normal, rng: RngStream) -> np.ndarray:
    n = _unit(normal, "normal")
    u1 = rng.uniform()
    u2 = rng.uniform()
    return np.array(lambert_k(n[0], n[1], n[2], u1, u2))


def sample_hg_lobe(axis, g: float, rng: RngStream) -> np.ndarray:
    """Untruncated Henyey-Greenstein lobe about ``axis`` (mean cosine = g)."""
    a = _unit(axis, "axis")
    if not 0.0 <= g <= 1.0:
        raise ValueError("g must lie in [0, 1]")
    c = hg_cos(float(g), rng.uniform())
    return np.array(around(a[0], a[1], a[2], c, 2.0 * math.pi * rng.uniform()))


def sample_hg_surface_scatter(incident, normal, g: float, rng: RngStream) -> ScatterEvent:
    d = _unit(incident, "incident")
    n = _unit(normal, "normal")
    _check_incidence(d, n)
    if not 0.0 <= g <= 1.0:
        raise ValueError("g must lie in [0, 1]")
    x, y, z, counter = hg_surface_k(d[0], d[1], d[2], n[0], n[1], n[2], float(g),
                                    rng.key, rng.counter)
    rng.counter = int(counter)
    return ScatterEvent(np.array([x, y, z]), REFLECTED if g >= 1.0 else SCATTERED)


def lambertian_samples(normal, n: int, seed: int = 0) -> np.ndarray:
    """``n`` cosine-weighted directions about ``normal`` from stream (seed, 0, 0)."""
    a = _unit(normal, "normal")
    out = np.empty((int(n), 3))
    _lambert_batch(a[0], a[1], a[2], RngStream(seed).key, out)
    return out


def hg_lobe_samples(axis, g: float, n: int, seed: int = 0) -> np.ndarray:
    a = _unit(axis, "axis")
    out = np.empty((int(n), 3))
    _hg_lobe_batch(a[0], a[1], a[2], float(g), RngStream(seed).key, out)
    return out


def hg_surface_samples(incident, normal, g: float, n: int, seed: int = 0) -> np.ndarray:
    """``n`` surface-scatter draws; draw ``i`` uses stream (seed, 0, i)."""
    d = _unit(incident, "incident")
    nn = _unit(normal, "normal")
    _check_incidence(d, nn)
    out = np.empty((int(n), 3))
    _hg_surface_batch(d[0], d[1], d[2], nn[0], nn[1], nn[2], float(g),
                      np.uint64(seed), out)
    return out


def hg_pdf(cos_theta, g: float):
    """Henyey-Greenstein density per unit cos(theta) (integrates to 1 on [-1, 1])."""
    c = np.asarray(cos_theta, dtype=np.float64)
    return 0.5 * (1.0 - g * g) / (1.0 + g * g - 2.0 * g * c) ** 1.5
