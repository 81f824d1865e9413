"""Ray and primitive intersection routines.

All lengths are millimetres in instrument space. The ``*_t`` kernels are
scalar-argument numba functions used by the tracer; the public
``intersect_*`` functions wrap them with :class:`Ray`/:class:`HitRecord`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
from numba import njit

INF = np.inf

#: self-intersection offset for secondary rays (mm)
SECONDARY_T_MIN = 1e-6
PARALLEL_EPS = 1e-12
DEGENERATE_AREA = 1e-15


def as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite vector {a}")
    return a


def normalize(v) -> np.ndarray:
    a = as_vec3(v)
    n = np.linalg.norm(a)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return a / n


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = INF
    depth: int = 0
    medium_index: float = 1.0

    def __post_init__(self):
        self.origin = as_vec3(self.origin)
        d = as_vec3(self.direction)
        n = np.linalg.norm(d)
        if n == 0.0:
            raise ValueError("ray direction must be non-zero")
        self.direction = d / n
        if self.t_min < 0 or not self.t_min < self.t_max:
            raise ValueError(f"invalid ray interval [{self.t_min}, {self.t_max}]")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.medium_index < 1.0:
            raise ValueError("medium_index must be >= 1")

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass
class HitRecord:
    t: float
    point: np.ndarray
    normal: np.ndarray
    object_id: int = -1
    is_front_face: bool = True
    primitive_index: int = -1


@dataclass
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = as_vec3(self.translation)
        r = self.rotation
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-10:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-10:
            raise ValueError("rotation must have determinant +1")

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        k = normalize(axis)
        kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        r = np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * kx @ kx
        return cls(r, translation)

    def point(self, p) -> np.ndarray:
        return self.rotation @ as_vec3(p) + self.translation

    def vector(self, v) -> np.ndarray:
        return self.rotation @ as_vec3(v)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def ray(self, ray: Ray) -> Ray:
        return Ray(self.point(ray.origin), self.vector(ray.direction), ray.t_min,
                   ray.t_max, ray.depth, ray.medium_index)

    def is_identity(self) -> bool:
        return bool(np.all(self.rotation == np.eye(3)) and np.all(self.translation == 0.0))


# ---------------------------------------------------------------- kernels

@njit(cache=True, nogil=True, inline="always")
def sphere_t(ox, oy, oz, dx, dy, dz, cx, cy, cz, r, tmin, tmax):
    """Nearest root of |o + t d - c| = r in [tmin, tmax]; inf if none."""
    fx = ox - cx
    fy = oy - cy
    fz = oz - cz
    b = fx * dx + fy * dy + fz * dz
    # discriminant from the perpendicular distance, stable for distant origins
    px = fx - b * dx
    py = fy - b * dy
    pz = fz - b * dz
    disc = r * r - (px * px + py * py + pz * pz)
    if disc < 0.0:
        return INF
    c = fx * fx + fy * fy + fz * fz - r * r
    sq = math.sqrt(disc)
    q = -b - sq if b >= 0.0 else -b + sq
    if q == 0.0:
        t0 = 0.0
        t1 = 0.0
    else:
        t0 = c / q
        t1 = q
    if t0 > t1:
        t0, t1 = t1, t0
    if tmin <= t0 <= tmax:
        return t0
    if tmin <= t1 <= tmax:
        return t1
    return INF


@njit(cache=True, nogil=True, inline="always")
def sphere_roots(ox, oy, oz, dx, dy, dz, cx, cy, cz, r):
    fx = ox - cx
    fy = oy - cy
    fz = oz - cz
    b = fx * dx + fy * dy + fz * dz
    px = fx - b * dx
    py = fy - b * dy
    pz = fz - b * dz
    disc = r * r - (px * px + py * py + pz * pz)
    if disc < 0.0:
        return INF, INF
    c = fx * fx + fy * fy + fz * fz - r * r
    sq = math.sqrt(disc)
    q = -b - sq if b >= 0.0 else -b + sq
    if q == 0.0:
        return 0.0, 0.0
    t0 = c / q
    t1 = q
    if t0 > t1:
        return t1, t0
    return t0, t1


@njit(cache=True, nogil=True, inline="always")
def plane_t(ox, oy, oz, dx, dy, dz, px, py, pz, nx, ny, nz, tmin, tmax):
    den = dx * nx + dy * ny + dz * nz
    if abs(den) < PARALLEL_EPS:
        return INF
    t = ((px - ox) * nx + (py - oy) * ny + (pz - oz) * nz) / den
    if tmin <= t <= tmax:
        return t
    return INF


@njit(cache=True, nogil=True, inline="always")
def ray_shear(ox, oy, oz, dx, dy, dz):
    """Per-ray constants of the watertight test.

    Returns (kx, ky, kz, sx, sy, sz, o[kx], o[ky], o[kz]) where kz is the
    dominant axis of ``d`` and (kx, ky) keep the frame right-handed.
    """
    adx = abs(dx)
    ady = abs(dy)
    adz = abs(dz)
    if adx > ady and adx > adz:
        kz = 0
    elif ady > adz:
        kz = 1
    else:
        kz = 2
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    d = (dx, dy, dz)
    if d[kz] < 0.0:
        kx, ky = ky, kx
    o = (ox, oy, oz)
    dkz = d[kz]
    return kx, ky, kz, d[kx] / dkz, d[ky] / dkz, 1.0 / dkz, o[kx], o[ky], o[kz]


@njit(cache=True, nogil=True, inline="always")
def triangle_t_sheared(kx, ky, kz, sx, sy, sz, okx, oky, okz, tri, tmin, tmax):
    """Watertight test against ``tri = (v0, v1, v2)`` flattened to 9 values.

    Edge functions are evaluated after shearing into a ray-aligned frame,
    so points on a shared edge are classified consistently for both
    triangles. A zero edge function counts as inside.
    """
    az = tri[kz] - okz
    bz = tri[3 + kz] - okz
    cz = tri[6 + kz] - okz
    Ax = tri[kx] - okx - sx * az
    Ay = tri[ky] - oky - sy * az
    Bx = tri[3 + kx] - okx - sx * bz
    By = tri[3 + ky] - oky - sy * bz
    Cx = tri[6 + kx] - okx - sx * cz
    Cy = tri[6 + ky] - oky - sy * cz
    U = Cx * By - Cy * Bx
    V = Ax * Cy - Ay * Cx
    W = Bx * Ay - By * Ax
    if min(U, V, W) < 0.0 and max(U, V, W) > 0.0:
        return INF
    det = U + V + W
    if det == 0.0:
        return INF
    t = (U * az + V * bz + W * cz) * sz / det
    if tmin <= t <= tmax:
        return t
    return INF


@njit(cache=True, nogil=True)
def triangle_t(ox, oy, oz, dx, dy, dz,
               ax_, ay_, az_, bx_, by_, bz_, cx_, cy_, cz_, tmin, tmax):
    """Watertight ray/triangle test for one pair; returns t or inf."""
    kx, ky, kz, sx, sy, sz, okx, oky, okz = ray_shear(ox, oy, oz, dx, dy, dz)
    tri = (ax_, ay_, az_, bx_, by_, bz_, cx_, cy_, cz_)
    return triangle_t_sheared(kx, ky, kz, sx, sy, sz, okx, oky, okz, tri, tmin, tmax)


@njit(cache=True, nogil=True)
def triangle_barycentric(ox, oy, oz, dx, dy, dz,
                         ax_, ay_, az_, bx_, by_, bz_, cx_, cy_, cz_):
    """Barycentric weights (u, v, w) of the ray/plane crossing (same frame as triangle_t)."""
    adx = abs(dx)
    ady = abs(dy)
    adz = abs(dz)
    if adx > ady and adx > adz:
        kz = 0
    elif ady > adz:
        kz = 1
    else:
        kz = 2
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    d = (dx, dy, dz)
    if d[kz] < 0.0:
        kx, ky = ky, kx
    sx = d[kx] / d[kz]
    sy = d[ky] / d[kz]
    a = (ax_ - ox, ay_ - oy, az_ - oz)
    b = (bx_ - ox, by_ - oy, bz_ - oz)
    c = (cx_ - ox, cy_ - oy, cz_ - oz)
    Ax = a[kx] - sx * a[kz]
    Ay = a[ky] - sy * a[kz]
    Bx = b[kx] - sx * b[kz]
    By = b[ky] - sy * b[kz]
    Cx = c[kx] - sx * c[kz]
    Cy = c[ky] - sy * c[kz]
    U = Cx * By - Cy * Bx
    V = Ax * Cy - Ay * Cx
    W = Bx * Ay - By * Ax
    det = U + V + W
    return U / det, V / det, W / det


# ---------------------------------------------------------------- wrappers

def _oriented(ray: Ray, t: float, n: np.ndarray, object_id: int = -1,
              primitive_index: int = -1) -> HitRecord:
    n = n / np.linalg.norm(n)
    front = float(np.dot(n, ray.direction)) < 0.0
    if not front:
        n = -n
    return HitRecord(t, ray.at(t), n, object_id, front, primitive_index)


def intersect_sphere(ray: Ray, center, radius: float) -> HitRecord | None:
    if radius <= 0:
        raise ValueError("radius must be positive")
    c = as_vec3(center)
    o, d = ray.origin, ray.direction
    t = sphere_t(o[0], o[1], o[2], d[0], d[1], d[2], c[0], c[1], c[2],
                 float(radius), ray.t_min, ray.t_max)
    if not math.isfinite(t):
        return None
    return _oriented(ray, t, ray.at(t) - c)


def intersect_plane(ray: Ray, point, normal) -> HitRecord | None:
    p = as_vec3(point)
    n = as_vec3(normal)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError("plane normal must be unit length")
    o, d = ray.origin, ray.direction
    t = plane_t(o[0], o[1], o[2], d[0], d[1], d[2], p[0], p[1], p[2],
                n[0], n[1], n[2], ray.t_min, ray.t_max)
    if not math.isfinite(t):
        return None
    return _oriented(ray, t, n.copy())


def triangle_area(v0, v1, v2) -> float:
    return 0.5 * float(np.linalg.norm(np.cross(as_vec3(v1) - as_vec3(v0), as_vec3(v2) - as_vec3(v0))))


def intersect_triangle(ray: Ray, v0, v1, v2) -> HitRecord | None:
    """Degenerate triangles (area <= 1e-15 mm^2) never report a hit."""
    a, b, c = as_vec3(v0), as_vec3(v1), as_vec3(v2)
    n = np.cross(b - a, c - a)
    if 0.5 * np.linalg.norm(n) <= DEGENERATE_AREA:
        return None
    o, d = ray.origin, ray.direction
    t = triangle_t(o[0], o[1], o[2], d[0], d[1], d[2], a[0], a[1], a[2],
                   b[0], b[1], b[2], c[0], c[1], c[2], ray.t_min, ray.t_max)
    if not math.isfinite(t):
        return None
    return _oriented(ray, t, n)
