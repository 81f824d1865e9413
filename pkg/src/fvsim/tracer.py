"""Packed primitive tables and the compiled path-tracing kernels.

Scene objects and instrument elements are flattened into a handful of
arrays (one row per primitive, concatenated BVH tables for meshes) so that
a single compiled kernel can trace complete light paths without calling
back into Python.

Primitive row layout (``pf`` float columns):

====  =========================================================
0-2   centre (disk/rect), sphere centre (sphere/cap)
3-5   unit normal (disk/rect); unit axis centre->vertex (cap)
6,7   inner / outer radius (disk); aperture radius in 7 (cap)
8-10  rect u axis
11,12 rect half extents along u and v
13    sphere radius
14,15 material parameters
16-18 rect v axis
====  =========================================================

``pi`` int columns: shape, material, mesh index, object id, pixels x,
pixels y. ``xf`` holds a world-from-local rotation (row-major) and
translation for mesh primitives.
"""

from __future__ import annotations

from collections import namedtuple
import math

import numpy as np
from numba import njit

from .geometry import INF, PARALLEL_EPS, SECONDARY_T_MIN, sphere_roots
from .optics import hg_surface_k, lambert_k, onb, reflect_k, refract_k
from .rng import stream_key, uniform
from .scene.bvh import STACK_DEPTH, bvh_nearest

# shapes
S_DISK, S_RECT, S_SPHERE, S_CAP, S_MESH = 0, 1, 2, 3, 4
# materials
M_ABSORBER, M_STOP, M_MIRROR, M_DIELECTRIC, M_HG, M_SPLITTER, M_THIN_LENS, M_DETECTOR = range(8)
# path outcomes
DETECTED, ABSORBED, LOST_APERTURE, ESCAPED, TERMINATED_DEPTH, SPILLED, CONTINUE = range(7)
N_OUTCOMES = 6

PF_WIDTH = 19
PI_WIDTH = 6

Packed = namedtuple("Packed", "pf pi xf mi bounds left right first count tris perm")


class PrimTable:
    """Incremental builder for :class:`Packed` scenes."""

    def __init__(self):
        self._pf: list[np.ndarray] = []
        self._pi: list[np.ndarray] = []
        self._xf: list[np.ndarray] = []
        self._meshes: list = []
        self.labels: list[str] = []

    def __len__(self) -> int:
        return len(self._pf)

    def _row(self, shape, material, params=(0.0, 0.0), object_id=-1, label=""):
        f = np.zeros(PF_WIDTH)
        i = np.zeros(PI_WIDTH, np.int64)
        i[0] = shape
        i[1] = material
        i[2] = -1
        i[3] = object_id
        f[14], f[15] = params
        x = np.zeros(12)
        x[:9] = np.eye(3).ravel()
        self._pf.append(f)
        self._pi.append(i)
        self._xf.append(x)
        self.labels.append(label)
        return f, i, x

    def add_disk(self, center, normal, r_out, material, params=(0.0, 0.0), r_in=0.0,
                 object_id=-1, label=""):
        f, _, _ = self._row(S_DISK, material, params, object_id, label)
        f[0:3] = center
        f[3:6] = _unit(normal)
        f[6] = r_in
        f[7] = r_out
        return len(self) - 1

    def add_rect(self, center, normal, u_axis, v_axis, half_u, half_v, material,
                 params=(0.0, 0.0), pixels=(0, 0), object_id=-1, label=""):
        f, i, _ = self._row(S_RECT, material, params, object_id, label)
        f[0:3] = center
        f[3:6] = _unit(normal)
        f[8:11] = _unit(u_axis)
        f[16:19] = _unit(v_axis)
        f[11] = half_u
        f[12] = half_v
        i[4], i[5] = pixels
        return len(self) - 1

    def add_sphere(self, center, radius, material, params=(0.0, 0.0), object_id=-1, label=""):
        f, _, _ = self._row(S_SPHERE, material, params, object_id, label)
        f[0:3] = center
        f[13] = radius
        return len(self) - 1

    def add_cap(self, sphere_center, radius, toward_vertex, aperture, material,
                params=(0.0, 0.0), object_id=-1, label=""):
        """Part of a sphere within ``aperture`` of the axis, on the vertex side."""
        f, _, _ = self._row(S_CAP, material, params, object_id, label)
        f[0:3] = sphere_center
        f[3:6] = _unit(toward_vertex)
        f[7] = aperture
        f[13] = radius
        return len(self) - 1

    def add_mesh(self, bvh, material, params=(0.0, 0.0), rotation=None, translation=None,
                 object_id=-1, label=""):
        _, i, x = self._row(S_MESH, material, params, object_id, label)
        for k, m in enumerate(self._meshes):
            if m is bvh:
                i[2] = k
                break
        else:
            self._meshes.append(bvh)
            i[2] = len(self._meshes) - 1
        if rotation is not None:
            x[:9] = np.asarray(rotation, dtype=np.float64).ravel()
        if translation is not None:
            x[9:] = translation
        return len(self) - 1

    def pack(self) -> Packed:
        n = len(self._pf)
        pf = np.array(self._pf).reshape(n, PF_WIDTH)
        pi = np.array(self._pi, dtype=np.int64).reshape(n, PI_WIDTH)
        xf = np.array(self._xf).reshape(n, 12)
        mi = np.zeros((len(self._meshes), 3), np.int64)
        node_off = tri_off = 0
        for k, b in enumerate(self._meshes):
            mi[k] = node_off, tri_off, len(b.tris)
            node_off += b.n_nodes
            tri_off += len(b.tris)
        if self._meshes:
            cat = lambda attr: np.ascontiguousarray(np.concatenate([getattr(b, attr) for b in self._meshes]))
            bounds, left, right = cat("bounds"), cat("left"), cat("right")
            first, count, tris, perm = cat("first"), cat("count"), cat("tris"), cat("perm")
        else:
            bounds = np.zeros((1, 6))
            left = right = first = count = perm = np.zeros(1, np.int64)
            tris = np.zeros((1, 9))
        return Packed(np.ascontiguousarray(pf), np.ascontiguousarray(pi), np.ascontiguousarray(xf),
                      mi, bounds, left, right, first, count, tris, perm)


def _unit(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    return a / np.linalg.norm(a)


# ---------------------------------------------------------------- hit search

@njit(cache=True, nogil=True, _nrt=False, error_model="numpy", inline="always")
def analytic_t(F, shape, p, ox, oy, oz, dx, dy, dz, tmin, tmax):
    """Distance to the disk, rect, sphere or cap primitive ``p``; inf if missed."""
    if shape == S_DISK or shape == S_RECT:
        # branch-free: these tests are the hot path and their outcomes are erratic;
        # den = 0 gives inf/nan here (numpy error model) and is rejected by ``ok``
        den = dx * F[p, 3] + dy * F[p, 4] + dz * F[p, 5]
        t = ((F[p, 0] - ox) * F[p, 3] + (F[p, 1] - oy) * F[p, 4] + (F[p, 2] - oz) * F[p, 5]) / den
        wx = ox + t * dx - F[p, 0]
        wy = oy + t * dy - F[p, 1]
        wz = oz + t * dz - F[p, 2]
        ok = (abs(den) >= PARALLEL_EPS) & (t >= tmin) & (t <= tmax)
        if shape == S_DISK:
            r2 = wx * wx + wy * wy + wz * wz
            ok = ok & (r2 >= F[p, 6] * F[p, 6]) & (r2 <= F[p, 7] * F[p, 7])
        else:
            a = wx * F[p, 8] + wy * F[p, 9] + wz * F[p, 10]
            b = wx * F[p, 16] + wy * F[p, 17] + wz * F[p, 18]
            ok = ok & (abs(a) <= F[p, 11]) & (abs(b) <= F[p, 12])
        return t if ok else INF
    if shape == S_SPHERE or shape == S_CAP:
        t0, t1 = sphere_roots(ox, oy, oz, dx, dy, dz, F[p, 0], F[p, 1], F[p, 2], F[p, 13])
        for k in range(2):
            t = t0 if k == 0 else t1
            if t < tmin or t > tmax or t == INF:
                continue
            if shape == S_SPHERE:
                return t
            wx = ox + t * dx - F[p, 0]
            wy = oy + t * dy - F[p, 1]
            wz = oz + t * dz - F[p, 2]
            along = wx * F[p, 3] + wy * F[p, 4] + wz * F[p, 5]
            if along <= 0.0:
                continue
            rad2 = wx * wx + wy * wy + wz * wz - along * along
            if rad2 <= F[p, 7] * F[p, 7]:
                return t
    return INF


@njit(cache=True, nogil=True, _nrt=False, error_model="numpy", inline="always")
def mesh_t(S, p, ox, oy, oz, dx, dy, dz, tmin, tmax, stack):
    """Nearest triangle of mesh primitive ``p``: (t, triangle slot)."""
    # move the ray into the mesh frame; t is unchanged by a rigid map
    X = S.xf
    qx = ox - X[p, 9]
    qy = oy - X[p, 10]
    qz = oz - X[p, 11]
    lox = X[p, 0] * qx + X[p, 3] * qy + X[p, 6] * qz
    loy = X[p, 1] * qx + X[p, 4] * qy + X[p, 7] * qz
    loz = X[p, 2] * qx + X[p, 5] * qy + X[p, 8] * qz
    ldx = X[p, 0] * dx + X[p, 3] * dy + X[p, 6] * dz
    ldy = X[p, 1] * dx + X[p, 4] * dy + X[p, 7] * dz
    ldz = X[p, 2] * dx + X[p, 5] * dy + X[p, 8] * dz
    m = S.pi[p, 2]
    t, slot, _ = bvh_nearest(lox, loy, loz, ldx, ldy, ldz, tmin, tmax, S.bounds, S.left, S.right,
                             S.first, S.count, S.tris, S.perm, S.mi[m, 0], S.mi[m, 1], stack)
    return t, slot


@njit(cache=True, nogil=True, _nrt=False, error_model="numpy")
def mesh_pass(S, ox, oy, oz, dx, dy, dz, tmin, tmax, best_t, best_p, stack):
    """Refine an analytic nearest hit with the mesh primitives.

    Equal distances still resolve to the lower primitive index.
    """
    best_s = -1
    I = S.pi
    for p in range(I.shape[0]):
        if I[p, 0] != S_MESH:
            continue
        t, s = mesh_t(S, p, ox, oy, oz, dx, dy, dz, tmin, best_t if best_t < tmax else tmax, stack)
        if t < best_t or (t == best_t and t < INF and p < best_p):
            best_t = t
            best_p = p
            best_s = s
    return best_t, best_p, best_s


@njit(cache=True, nogil=True, _nrt=False, error_model="numpy", inline="always")
def nearest(S, ox, oy, oz, dx, dy, dz, tmin, tmax, stack):
    """Nearest primitive hit: (t, primitive, triangle slot). Ties keep the lower primitive."""
    best_t = INF
    best_p = -1
    best_s = -1
    F = S.pf
    I = S.pi
    for p in range(F.shape[0]):
        shape = I[p, 0]
        if shape == S_MESH:
            continue
        t = analytic_t(F, shape, p, ox, oy, oz, dx, dy, dz, tmin, best_t if best_t < tmax else tmax)
        if t < best_t:
            best_t = t
            best_p = p
    if S.mi.shape[0] > 0:
        best_t, best_p, best_s = mesh_pass(S, ox, oy, oz, dx, dy, dz, tmin, tmax,
                                           best_t, best_p, stack)
    return best_t, best_p, best_s


@njit(cache=True, nogil=True, _nrt=False, error_model="numpy", inline="always")
def geometric_normal(S, p, slot, hx, hy, hz):
    """Unoriented unit normal of primitive ``p`` at world point ``h``."""
    F = S.pf
    shape = S.pi[p, 0]
    if shape == S_DISK or shape == S_RECT:
        return F[p, 3], F[p, 4], F[p, 5]
    if shape == S_SPHERE or shape == S_CAP:
        r = F[p, 13]
        return (hx - F[p, 0]) / r, (hy - F[p, 1]) / r, (hz - F[p, 2]) / r
    T = S.tris
    e1x = T[slot, 3] - T[slot, 0]
    e1y = T[slot, 4] - T[slot, 1]
    e1z = T[slot, 5] - T[slot, 2]
    e2x = T[slot, 6] - T[slot, 0]
    e2y = T[slot, 7] - T[slot, 1]
    e2z = T[slot, 8] - T[slot, 2]
    nx = e1y * e2z - e1z * e2y
    ny = e1z * e2x - e1x * e2z
    nz = e1x * e2y - e1y * e2x
    s = 1.0 / math.sqrt(nx * nx + ny * ny + nz * nz)
    nx *= s
    ny *= s
    nz *= s
    X = S.xf
    return (X[p, 0] * nx + X[p, 1] * ny + X[p, 2] * nz,
            X[p, 3] * nx + X[p, 4] * ny + X[p, 5] * nz,
            X[p, 6] * nx + X[p, 7] * ny + X[p, 8] * nz)


# ---------------------------------------------------------------- transport

@njit(cache=True, nogil=True, _nrt=False, error_model="numpy", inline="always")
def thin_lens_k(dx, dy, dz, ax, ay, az, hx, hy, hz, f):
    """Ideal thin lens acting on ray slopes: tangential slope changes by -h/f.

    ``h`` is the hit point relative to the lens centre. Exact point-to-point
    imaging between conjugate planes, independent of aperture height.
    """
    da = dx * ax + dy * ay + dz * az
    k = abs(da) / f
    x = dx - k * hx
    y = dy - k * hy
    z = dz - k * hz
    s = 1.0 / math.sqrt(x * x + y * y + z * z)
    return x * s, y * s, z * s


@njit(cache=True, nogil=True, _nrt=False, error_model="numpy", inline="always")
def step(S, ox, oy, oz, dx, dy, dz, tmin, key, counter, stack):
    """Advance one interaction.

    Returns (outcome, hit x, y, z, new dx, dy, dz, counter, pixel i, pixel j).
    ``outcome`` is CONTINUE while the ray keeps propagating.
    """
    t, p, slot = nearest(S, ox, oy, oz, dx, dy, dz, tmin, INF, stack)
    if p < 0:
        return ESCAPED, ox, oy, oz, dx, dy, dz, counter, -1, -1
    hx = ox + t * dx
    hy = oy + t * dy
    hz = oz + t * dz
    nx, ny, nz = geometric_normal(S, p, slot, hx, hy, hz)
    cosd = dx * nx + dy * ny + dz * nz
    front = cosd < 0.0
    if not front:
        nx = -nx
        ny = -ny
        nz = -nz
    mat = S.pi[p, 1]
    F = S.pf
    if mat == M_ABSORBER:
        return ABSORBED, hx, hy, hz, dx, dy, dz, counter, -1, -1
    if mat == M_STOP:
        return LOST_APERTURE, hx, hy, hz, dx, dy, dz, counter, -1, -1
    if mat == M_MIRROR:
        dx, dy, dz = reflect_k(dx, dy, dz, nx, ny, nz)
    elif mat == M_DIELECTRIC:
        n1 = F[p, 14] if front else F[p, 15]
        n2 = F[p, 15] if front else F[p, 14]
        dx, dy, dz, _ = refract_k(dx, dy, dz, nx, ny, nz, n1, n2)
    elif mat == M_HG:
        dx, dy, dz, counter = hg_surface_k(dx, dy, dz, nx, ny, nz, F[p, 14], key, counter)
    elif mat == M_SPLITTER:
        u = uniform(key, counter)
        counter += 1
        if u >= F[p, 14]:
            dx, dy, dz = reflect_k(dx, dy, dz, nx, ny, nz)
    elif mat == M_THIN_LENS:
        dx, dy, dz = thin_lens_k(dx, dy, dz, F[p, 3], F[p, 4], F[p, 5],
                                 hx - F[p, 0], hy - F[p, 1], hz - F[p, 2], F[p, 14])
    elif mat == M_DETECTOR:
        if not front:
            return ABSORBED, hx, hy, hz, dx, dy, dz, counter, -1, -1
        wx = hx - F[p, 0]
        wy = hy - F[p, 1]
        wz = hz - F[p, 2]
        a = wx * F[p, 8] + wy * F[p, 9] + wz * F[p, 10]
        b = wx * F[p, 16] + wy * F[p, 17] + wz * F[p, 18]
        i, j = pixel_index(a, b, F[p, 11], F[p, 12], S.pi[p, 4], S.pi[p, 5])
        if i < 0:
            return SPILLED, hx, hy, hz, dx, dy, dz, counter, -1, -1
        return DETECTED, hx, hy, hz, dx, dy, dz, counter, i, j
    return CONTINUE, hx, hy, hz, dx, dy, dz, counter, -1, -1


@njit(cache=True, nogil=True, _nrt=False, error_model="numpy", inline="always")
def pixel_index(a, b, half_u, half_v, nu, nv):
    """Floor binning of local detector coordinates; the upper edge joins the last pixel."""
    if abs(a) > half_u or abs(b) > half_v:
        return -1, -1
    i = int(math.floor((a + half_u) / (2.0 * half_u) * nu))
    j = int(math.floor((b + half_v) / (2.0 * half_v) * nv))
    if i >= nu:
        i = nu - 1
    if j >= nv:
        j = nv - 1
    return i, j


@njit(cache=True, nogil=True, _nrt=False, error_model="numpy", inline="always")
def trace_k(S, ox, oy, oz, dx, dy, dz, tmin, depth, max_depth, key, counter, stack):
    """Follow one path until it is detected, terminated or leaves the scene.

    Returns (outcome, pixel i, pixel j, depth, counter).
    """
    while True:
        if depth >= max_depth:
            return TERMINATED_DEPTH, -1, -1, depth, counter
        out, ox, oy, oz, dx, dy, dz, counter, i, j = step(S, ox, oy, oz, dx, dy, dz, tmin,
                                                          key, counter, stack)
        if out == ESCAPED:
            return ESCAPED, -1, -1, depth, counter
        depth += 1
        if out != CONTINUE:
            return out, i, j, depth, counter
        tmin = SECONDARY_T_MIN


@njit(cache=True, nogil=True, _nrt=False, error_model="numpy", inline="always")
def emit_k(cx, cy, cz, ax, ay, az, radius, u1, u2, u3, u4):
    """Area-uniform point on the source disk and a cosine-weighted direction.

    Returns origin, direction and the in-plane coordinates of the origin.
    """
    r = radius * math.sqrt(u1)
    phi = 2.0 * math.pi * u2
    lx = r * math.cos(phi)
    ly = r * math.sin(phi)
    e1, e2 = onb(ax, ay, az)
    ox = cx + lx * e1[0] + ly * e2[0]
    oy = cy + lx * e1[1] + ly * e2[1]
    oz = cz + lx * e1[2] + ly * e2[2]
    dx, dy, dz = lambert_k(ax, ay, az, u3, u4)
    return ox, oy, oz, dx, dy, dz, lx, ly


@njit(cache=True, nogil=True, _nrt=False, error_model="numpy", inline="always")
def mask_blocks(lx, ly, cell):
    """Checkerboard emission mask: True where the cell is opaque."""
    if cell <= 0.0:
        return False
    k = int(math.floor(lx / cell)) + int(math.floor(ly / cell))
    return (k & 1) == 1


@njit(cache=True, nogil=True, _nrt=False, error_model="numpy")
def render_batch(S, src, seed, batch, n_rays, max_depth, counts, census, stack):
    """Trace ``n_rays`` source rays of one batch into private buffers.

    ``src`` = (centre xyz, axis xyz, radius, mask cell size). Ray ``i`` of
    batch ``b`` draws from stream (seed, b, i). ``census`` is indexed by
    path outcome. ``stack`` is BVH traversal scratch space (see new_stack).
    """
    for r in range(n_rays):
        key = stream_key(seed, batch, r)
        ox, oy, oz, dx, dy, dz, lx, ly = emit_k(src[0], src[1], src[2], src[3], src[4], src[5],
                                                src[6], uniform(key, 0), uniform(key, 1),
                                                uniform(key, 2), uniform(key, 3))
        if mask_blocks(lx, ly, src[7]):
            census[ABSORBED] += 1
            continue
        out, i, j, _, _ = trace_k(S, ox, oy, oz, dx, dy, dz, SECONDARY_T_MIN, 0, max_depth,
                                  key, 4, stack)
        census[out] += 1
        if out == DETECTED:
            counts[j, i] += 1


@njit(cache=True, nogil=True, _nrt=False, error_model="numpy")
def nearest_batch(S, origins, dirs, tmin, tmax, out_t, out_p, out_s, stack):
    for k in range(origins.shape[0]):
        o = origins[k]
        d = dirs[k]
        t, p, s = nearest(S, o[0], o[1], o[2], d[0], d[1], d[2], tmin, tmax, stack)
        out_t[k] = t
        out_p[k] = p
        out_s[k] = s


def new_stack() -> np.ndarray:
    return np.empty(STACK_DEPTH, np.int64)
