"""Parametric focus-variation microscope: source, lenses, beamsplitter, detector.

The default train is a coaxial epi-illumination microscope (z up, the
sample focal plane at z = 0)::

    source -> collector -> beamsplitter (reflect) -> objective -> sample
    sample -> objective -> beamsplitter (transmit) -> tube lens -> detector

The source sits in the collector's focal plane, so it is imaged onto the
sample (critical illumination) and an optional checkerboard emission mask
projects a sharp pattern only when the sample surface is in focus.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from . import tracer
from .geometry import INF, SECONDARY_T_MIN, Ray, as_vec3, normalize
from .rng import RngStream


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------- components

@dataclass
class LightSource:
    """Flat circular Lambertian emitter.

    ``mask_cell`` > 0 blocks emission on alternate squares of a
    checkerboard with that cell size (mm), laid out in the source plane.
    """

    center: np.ndarray
    axis: np.ndarray
    radius: float
    mask_cell: float = 0.0

    def __post_init__(self):
        self.center = as_vec3(self.center)
        self.axis = normalize(self.axis)
        if not self.radius > 0:
            raise ConfigurationError("source radius must be positive")
        if self.mask_cell < 0:
            raise ConfigurationError("mask_cell must be >= 0")

    def packed(self) -> np.ndarray:
        return np.array([*self.center, *self.axis, self.radius, self.mask_cell])

    def add_to(self, table: tracer.PrimTable) -> None:
        # returning light is absorbed by the emitter
        table.add_disk(self.center, self.axis, self.radius, tracer.M_ABSORBER, label="source")


@dataclass
class Detector:
    """Square pixel array facing along ``axis`` (the direction it looks).

    Pixel ``(i, j)`` counts hits with local coordinates ``u`` in bin i and
    ``v`` in bin j; ``accumulator`` has shape ``(pixels_y, pixels_x)``.
    """

    center: np.ndarray
    axis: np.ndarray
    side_length: float
    pixels_x: int
    pixels_y: int
    u_axis: np.ndarray = None
    v_axis: np.ndarray = None
    accumulator: np.ndarray = None
    spill: int = 0

    def __post_init__(self):
        self.center = as_vec3(self.center)
        self.axis = normalize(self.axis)
        if self.pixels_x < 1 or self.pixels_y < 1:
            raise ConfigurationError("detector needs at least one pixel per axis")
        if not self.side_length > 0:
            raise ConfigurationError("detector side_length must be positive")
        if self.u_axis is None:
            from .optics import onb
            t1, _ = onb(*self.axis)
            self.u_axis = np.array(t1)
        self.u_axis = normalize(self.u_axis)
        if abs(float(np.dot(self.u_axis, self.axis))) > 1e-9:
            raise ConfigurationError("detector u axis must lie in the detector plane")
        if self.v_axis is None:
            self.v_axis = np.cross(self.axis, self.u_axis)
        self.v_axis = normalize(self.v_axis)
        if abs(float(np.dot(self.v_axis, self.axis))) > 1e-9 or abs(float(np.dot(self.v_axis, self.u_axis))) > 1e-9:
            raise ConfigurationError("detector v axis must be orthogonal to axis and u")
        if self.accumulator is None:
            self.accumulator = np.zeros((self.pixels_y, self.pixels_x))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels_y, self.pixels_x

    @property
    def pixel_pitch(self) -> tuple[float, float]:
        return self.side_length / self.pixels_x, self.side_length / self.pixels_y

    def local(self, point) -> tuple[float, float]:
        w = as_vec3(point) - self.center
        return float(np.dot(w, self.u_axis)), float(np.dot(w, self.v_axis))

    def reset(self) -> None:
        self.accumulator[:] = 0.0
        self.spill = 0

    def add_to(self, table: tracer.PrimTable) -> None:
        h = self.side_length / 2.0
        # the plane around the sensor is a mount: hits there are spill
        k = table.add_disk(self.center, self.axis, 4.0 * self.side_length, tracer.M_DETECTOR,
                           label="detector")
        f = table._pf[k]
        f[8:11] = self.u_axis
        f[16:19] = self.v_axis
        f[11] = f[12] = h
        table._pi[k][4] = self.pixels_x
        table._pi[k][5] = self.pixels_y


@dataclass
class IdealLens:
    """Aberration-free thin lens with a circular aperture and a surrounding stop."""

    center: np.ndarray
    axis: np.ndarray
    focal_length: float
    aperture_radius: float
    mount_radius: float = None

    def __post_init__(self):
        self.center = as_vec3(self.center)
        self.axis = normalize(self.axis)
        if self.focal_length == 0 or not math.isfinite(self.focal_length):
            raise ConfigurationError("ideal lens focal length must be finite and non-zero")
        if not self.aperture_radius > 0:
            raise ConfigurationError("lens aperture radius must be positive")
        if self.mount_radius is None:
            self.mount_radius = 4.0 * self.aperture_radius

    def add_to(self, table: tracer.PrimTable) -> None:
        table.add_disk(self.center, self.axis, self.aperture_radius, tracer.M_THIN_LENS,
                       (self.focal_length, 0.0), label="thin lens")
        table.add_disk(self.center, self.axis, self.mount_radius, tracer.M_STOP,
                       r_in=self.aperture_radius, label="lens mount")


def _inv(r: float) -> float:
    return 0.0 if math.isinf(r) else 1.0 / r


def _sag(r: float, a: float) -> float:
    """Axial offset of a spherical surface at height ``a`` from its vertex (signed)."""
    if math.isinf(r):
        return 0.0
    return r - math.copysign(math.sqrt(r * r - a * a), r)


@dataclass
class LensElement:
    """Singlet with spherical or flat faces.

    ``vertex`` is the first surface's vertex, ``axis`` points from the first
    to the second surface. Radii follow the usual sign convention: positive
    when the centre of curvature lies further along ``axis`` than the
    vertex; ``math.inf`` means flat.
    """

    r1: float
    r2: float
    thickness: float
    aperture_radius: float
    n: float
    vertex: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    mount_radius: float = None

    def __post_init__(self):
        self.vertex = as_vec3(self.vertex)
        self.axis = normalize(self.axis)
        if not self.aperture_radius > 0:
            raise ConfigurationError("lens aperture radius must be positive")
        if not self.thickness > 0:
            raise ConfigurationError("lens thickness must be positive")
        if not self.n > 1:
            raise ConfigurationError("lens glass index must exceed 1")
        for r in (self.r1, self.r2):
            if r == 0 or (not math.isinf(r) and abs(r) < self.aperture_radius):
                raise ConfigurationError(f"surface radius {r} is smaller than the aperture radius")
        if self.edge_thickness() <= 0:
            raise ConfigurationError("lens surfaces intersect inside the aperture (edge thickness <= 0)")
        if self.mount_radius is None:
            self.mount_radius = 4.0 * self.aperture_radius

    def edge_thickness(self) -> float:
        a = self.aperture_radius
        return self.thickness - _sag(self.r1, a) + _sag(self.r2, a)

    def focal_length(self) -> float:
        """Effective focal length from the thick-lens lensmaker equation."""
        n, d = self.n, self.thickness
        power = (n - 1) * (_inv(self.r1) - _inv(self.r2) + (n - 1) * d * _inv(self.r1) * _inv(self.r2) / n)
        return INF if power == 0 else 1.0 / power

    def matrix(self) -> np.ndarray:
        """Paraxial ray-transfer matrix acting on (height, angle), vertex to vertex."""
        n = self.n
        s1 = np.array([[1.0, 0.0], [-(n - 1) * _inv(self.r1) / n, 1.0 / n]])
        t = np.array([[1.0, self.thickness], [0.0, 1.0]])
        s2 = np.array([[1.0, 0.0], [-(1 - n) * _inv(self.r2), n]])
        return s2 @ t @ s1

    def back_vertex(self) -> np.ndarray:
        return self.vertex + self.thickness * self.axis

    def add_to(self, table: tracer.PrimTable) -> None:
        a = self.aperture_radius
        glass = self.n
        for vertex, r, glass_after in ((self.vertex, self.r1, True), (self.back_vertex(), self.r2, False)):
            if math.isinf(r):
                # disk normal faces back along the axis on the entry face
                normal = -self.axis if glass_after else self.axis
                table.add_disk(vertex, normal, a, tracer.M_DIELECTRIC, (1.0, glass), label="lens face")
                continue
            center = vertex + r * self.axis
            outward_at_vertex = -math.copysign(1.0, r)
            # the outward side is air when it points away from the glass
            air_outside = (outward_at_vertex < 0) == glass_after
            params = (1.0, glass) if air_outside else (glass, 1.0)
            table.add_cap(center, abs(r), outward_at_vertex * self.axis, a,
                          tracer.M_DIELECTRIC, params, label="lens face")
        table.add_disk(self.vertex, self.axis, self.mount_radius, tracer.M_STOP, r_in=a,
                       label="lens mount")


@dataclass
class BeamSplitter:
    """Thin plate transmitting with probability ``rho`` and reflecting otherwise."""

    center: np.ndarray
    normal: np.ndarray
    aperture_radius: float
    rho: float = 0.5

    def __post_init__(self):
        self.center = as_vec3(self.center)
        self.normal = normalize(self.normal)
        if not 0.0 < self.rho < 1.0:
            raise ConfigurationError("beamsplitter ratio must lie in (0, 1)")
        if not self.aperture_radius > 0:
            raise ConfigurationError("beamsplitter aperture radius must be positive")

    def add_to(self, table: tracer.PrimTable) -> None:
        table.add_disk(self.center, self.normal, self.aperture_radius, tracer.M_SPLITTER,
                       (self.rho, 0.0), label="beamsplitter")


@dataclass
class Mirror:
    center: np.ndarray
    normal: np.ndarray
    aperture_radius: float

    def __post_init__(self):
        self.center = as_vec3(self.center)
        self.normal = normalize(self.normal)
        if not self.aperture_radius > 0:
            raise ConfigurationError("mirror aperture radius must be positive")

    def add_to(self, table: tracer.PrimTable) -> None:
        table.add_disk(self.center, self.normal, self.aperture_radius, tracer.M_MIRROR, label="mirror")


@dataclass
class Baffle:
    """Opaque annulus (``inner_radius`` 0 gives a full disk)."""

    center: np.ndarray
    normal: np.ndarray
    outer_radius: float
    inner_radius: float = 0.0

    def __post_init__(self):
        self.center = as_vec3(self.center)
        self.normal = normalize(self.normal)

    def add_to(self, table: tracer.PrimTable) -> None:
        table.add_disk(self.center, self.normal, self.outer_radius, tracer.M_ABSORBER,
                       r_in=self.inner_radius, label="baffle")


Element = IdealLens | LensElement | BeamSplitter | Mirror | Baffle


@dataclass
class InstrumentConfig:
    source: LightSource
    elements: list
    detector: Detector
    na: float
    magnification: float = 1.0
    sample_stage_z: float = 0.0
    focal_plane_z: float = 0.0
    description: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.na < 1.0:
            raise ConfigurationError(f"numerical aperture must lie in (0, 1), got {self.na}")

    @property
    def object_pixel_size(self) -> float:
        """Detector pixel pitch projected onto the sample (mm)."""
        return self.detector.pixel_pitch[0] / self.magnification

    def prim_table(self) -> tracer.PrimTable:
        table = tracer.PrimTable()
        self.source.add_to(table)
        for e in self.elements:
            e.add_to(table)
        self.detector.add_to(table)
        return table

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Sample-plane x and y (µm) imaged onto the pixel column / row centres."""
        py, px = self.detector.shape
        p = self.object_pixel_size * 1e3
        return (np.arange(px) + 0.5 - px / 2.0) * p, (np.arange(py) + 0.5 - py / 2.0) * p


# ---------------------------------------------------------------- default train

def _propagate(d: float) -> np.ndarray:
    return np.array([[1.0, d], [0.0, 1.0]])


def _thin(f: float) -> np.ndarray:
    return np.array([[1.0, 0.0], [-1.0 / f, 1.0]])


def build_default_instrument(na: float = 0.15, magnification: float = 5.0,
                             working_distance: float = 2.0, detector_pixels: int = 64,
                             detector_side: float = 0.32, rho: float = 0.5,
                             field_margin: float = 1.3, mask_cell_um: float = 0.0,
                             illumination_angle_deg: float = 60.0,
                             objective: str = "doublet") -> InstrumentConfig:
    """Solve the coaxial train paraxially for the requested NA and magnification.

    ``working_distance`` (mm) is the objective-to-focal-plane distance and
    ``detector_side`` the sensor edge length (mm). ``mask_cell_um`` is the
    checkerboard cell size as projected onto the sample (µm, 0 disables
    the mask). ``objective`` is ``"ideal"`` (thin lens) or ``"doublet"``
    (two plano-convex glass singlets).
    """
    if not 0.0 < na < 1.0:
        raise ConfigurationError(f"infeasible: numerical aperture must satisfy 0 < NA < 1 (got {na})")
    if not magnification > 0:
        raise ConfigurationError("infeasible: magnification must be positive")
    if not working_distance > 0:
        raise ConfigurationError("infeasible: working distance must be positive")
    if detector_pixels < 1 or not detector_side > 0:
        raise ConfigurationError("infeasible: detector needs pixels >= 1 and side > 0")
    if not 0.0 < illumination_angle_deg < 89.0:
        raise ConfigurationError("infeasible: illumination acceptance angle must lie in (0, 89) deg")
    f_o = float(working_distance)
    if objective == "ideal":
        a_o = f_o * math.tan(math.asin(na))
        obj_elems = [IdealLens((0, 0, f_o), (0, 0, 1), f_o, a_o)]
        efl, obj_bottom, obj_top = f_o, f_o, f_o
        obj_m = _thin(f_o) @ _propagate(f_o)
    elif objective == "doublet":
        obj_elems, efl, a_o = _doublet(f_o, na)
        obj_bottom = obj_elems[0].vertex[2]
        obj_top = obj_elems[1].back_vertex()[2]
        obj_m = _doublet_matrix(*obj_elems) @ _propagate(obj_bottom)
    else:
        raise ConfigurationError(f"unknown objective '{objective}'")

    field_half = detector_side / (2.0 * magnification) * math.sqrt(2.0)
    r_ill = field_margin * field_half
    tilt = r_ill / efl
    elements: list = list(obj_elems)

    r_split = 1.5 * math.sqrt(2.0) * (a_o + 3.0 * tilt * efl)
    half_h = r_split / math.sqrt(2.0)
    z_split = obj_top + half_h + 0.2 * a_o
    elements.append(BeamSplitter((0, 0, z_split), (1, 0, -1), r_split, rho))

    f_t = magnification * efl
    z_tube = z_split + half_h + 0.2 * a_o
    a_t = 1.2 * a_o + tilt * (z_tube - obj_bottom)
    elements.append(IdealLens((0, 0, z_tube), (0, 0, 1), f_t, a_t))
    z_det = z_tube + f_t

    f_c = a_o / math.tan(math.radians(illumination_angle_deg))
    x_coll = half_h + 0.2 * a_o
    a_c = 1.2 * a_o + tilt * (x_coll + z_split - obj_bottom)
    elements.append(IdealLens((x_coll, 0, z_split), (-1, 0, 0), f_c, a_c))
    r_src = r_ill * f_c / efl
    cell = mask_cell_um * 1e-3 * f_c / efl
    source = LightSource((x_coll + f_c, 0, z_split), (-1, 0, 0), r_src, cell)

    detector = Detector((0, 0, z_det), (0, 0, -1), detector_side, detector_pixels, detector_pixels,
                        u_axis=(-1, 0, 0), v_axis=(0, -1, 0))

    # sample plane -> detector must be an imaging map: B = 0 and A = -M
    imaging = _propagate(f_t) @ _thin(f_t) @ _propagate(z_tube - obj_top) @ obj_m
    a_, b_ = imaging[0]
    scale = f_t + z_tube
    if abs(b_) > 1e-9 * scale or abs(a_ + magnification) > 1e-6 * magnification:
        raise ConfigurationError(f"paraxial image-plane check failed: B={b_:.3e}, A={a_:.6f} "
                                 f"(expected B=0, A={-magnification})")
    # source plane -> sample: critical illumination needs B = 0 as well
    back = np.array([[obj_m[1, 1], obj_m[0, 1]], [obj_m[1, 0], obj_m[0, 0]]])  # reversed objective
    illum = back @ _propagate(x_coll + z_split - obj_top) @ _thin(f_c) @ _propagate(f_c)
    if abs(illum[0, 1]) > 1e-9 * scale:
        raise ConfigurationError("paraxial illumination check failed: source is not imaged onto the sample")

    desc = dict(na=na, magnification=magnification, working_distance=working_distance,
                objective=objective, objective_focal_length=efl, objective_aperture=a_o,
                tube_focal_length=f_t, collector_focal_length=f_c, source_radius=r_src,
                illuminated_radius=r_ill, mask_cell=cell, rho=rho,
                imaging_matrix=imaging.tolist())
    return InstrumentConfig(source, elements, detector, na, magnification, 0.0, 0.0, desc)


def _doublet(f_o: float, na: float, n_glass: float = 1.5):
    """Two plano-convex singlets (convex faces up) whose front focus lies on z = 0.

    Each singlet has focal length 2 ``f_o``; the pair is spaced by 0.1 ``f_o``.
    Returns (elements, effective focal length, entrance aperture radius).
    """
    r = -(n_glass - 1.0) * 2.0 * f_o
    ap = 1.3 * f_o * math.tan(math.asin(na))
    if ap >= 0.95 * abs(r):
        raise ConfigurationError(f"infeasible: NA {na} needs an aperture beyond the singlet surface radius")
    t = max(0.15 * f_o, 1.25 * abs(_sag(r, ap)))
    gap = 0.1 * f_o
    lo = LensElement(INF, r, t, ap, n_glass, (0, 0, 0), (0, 0, 1))
    hi = LensElement(INF, r, t, ap, n_glass, (0, 0, t + gap), (0, 0, 1))
    m = _doublet_matrix(lo, hi)
    # front focal distance d: the system matrix after a gap d maps heights to angle 0
    d = -m[1, 1] / m[1, 0]
    if not d > 0:
        raise ConfigurationError("infeasible: doublet has no real front focus")
    lo.vertex = np.array([0.0, 0.0, d])
    hi.vertex = np.array([0.0, 0.0, d + t + gap])
    efl = -1.0 / m[1, 0]
    a_in = efl * math.tan(math.asin(na))
    if a_in > ap:
        raise ConfigurationError(f"infeasible: NA {na} exceeds the doublet's clear aperture")
    return [lo, hi], efl, a_in


def _doublet_matrix(lo: LensElement, hi: LensElement) -> np.ndarray:
    gap = float(np.dot(hi.vertex - lo.back_vertex(), lo.axis))
    return hi.matrix() @ _propagate(gap) @ lo.matrix()


# ---------------------------------------------------------------- single-ray API

def emit_ray(source: LightSource, rng: RngStream) -> Ray:
    """Area-uniform origin on the disk, cosine-weighted direction about the axis."""
    u = [rng.uniform() for _ in range(4)]
    c, a = source.center, source.axis
    ox, oy, oz, dx, dy, dz, _, _ = tracer.emit_k(c[0], c[1], c[2], a[0], a[1], a[2],
                                                 source.radius, *u)
    return Ray((ox, oy, oz), (dx, dy, dz))


def emission_blocked(source: LightSource, ray: Ray) -> bool:
    """True if ``ray`` starts on an opaque cell of the source mask."""
    from .optics import onb
    e1, e2 = onb(*source.axis)
    w = ray.origin - source.center
    return bool(tracer.mask_blocks(float(np.dot(w, e1)), float(np.dot(w, e2)), source.mask_cell))


def interact_element(ray: Ray, element, rng: RngStream) -> Ray | None:
    """Propagate ``ray`` through one element; None if it is stopped or absorbed."""
    table = tracer.PrimTable()
    element.add_to(table)
    S = table.pack()
    stack = tracer.new_stack()
    o = ray.origin
    d = ray.direction
    tmin = ray.t_min
    depth = ray.depth
    counter = rng.counter
    hits = 0
    while True:
        out, hx, hy, hz, dx, dy, dz, counter, _, _ = tracer.step(
            S, o[0], o[1], o[2], d[0], d[1], d[2], tmin, rng.key, counter, stack)
        if out == tracer.ESCAPED:
            break
        hits += 1
        if out != tracer.CONTINUE:
            rng.counter = int(counter)
            return None
        o = np.array([hx, hy, hz])
        d = np.array([dx, dy, dz])
        tmin = SECONDARY_T_MIN
        if hits > 64:
            raise RuntimeError("ray is trapped inside the element")
    rng.counter = int(counter)
    if hits == 0:
        raise ValueError("ray does not reach the element")
    return Ray(o, d, SECONDARY_T_MIN, INF, depth + hits, 1.0)


def detector_record(detector: Detector, hit_point) -> tuple[int, int] | None:
    """Add one count at ``hit_point``; points off the sensor are tallied as spill."""
    a, b = detector.local(hit_point)
    h = detector.side_length / 2.0
    i, j = tracer.pixel_index(a, b, h, h, detector.pixels_x, detector.pixels_y)
    if i < 0:
        detector.spill += 1
        return None
    detector.accumulator[j, i] += 1.0
    return i, j
