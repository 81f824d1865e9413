"""Run configuration: a versioned YAML schema and builders for the run objects.

Relative file paths are resolved against the directory of the config file.
Units: lateral sample and heightfield quantities in µm, instrument and
scene placement in mm, angles in degrees.
"""

from __future__ import annotations

from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
import yaml
from pydantic import (BaseModel, ConfigDict, Field, ValidationInfo, field_validator,
                      model_validator)

from .geometry import RigidTransform
from .instrument import InstrumentConfig, build_default_instrument
from .optics import Absorber, Dielectric, HGSurface, Mirror
from .scanning import DEFAULT_PROMINENCE, DEFAULT_WINDOW, SEED_POLICIES, ScanConfig
from .scene.mesh import TriangleMesh
from .scene.objects import ImplicitPlane, ImplicitSphere, MeshGeometry, Scene, heightfield_object
from .scene.stl import load_stl
from .scene.surfaces import (SURFACE_KINDS, Heightfield, MicroRoughnessParams, add_micro_roughness,
                             generate_surface, read_heightfield)

SCHEMA_VERSION = 1


def _count(v):
    """Accept 1e6-style counts (YAML reads ``1e6`` as a string)."""
    if isinstance(v, str):
        v = float(v)
    if isinstance(v, float):
        if not v.is_integer():
            raise ValueError(f"expected a whole number, got {v}")
        v = int(v)
    return v


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _existing(path: str, info: ValidationInfo) -> str:
    base = (info.context or {}).get("base_dir")
    p = Path(path)
    if not p.is_absolute() and base is not None:
        p = Path(base) / p
    if not p.exists():
        raise ValueError(f"file not found: {p}")
    return str(p)


class InstrumentSpec(_Model):
    na: float = Field(0.15, gt=0, lt=1)
    magnification: float = Field(5.0, gt=0)
    working_distance: float = Field(2.0, gt=0, description="objective to focal plane, mm")
    detector_pixels: int = Field(64, ge=1)
    detector_side: float = Field(0.32, gt=0, description="sensor edge length, mm")
    split_ratio: float = Field(0.5, gt=0, lt=1)
    mask_cell_um: float = Field(0.0, ge=0, description="source checkerboard cell on the sample, µm")
    illumination_angle_deg: float = Field(60.0, gt=0, lt=89)
    objective: Literal["ideal", "doublet"] = "doublet"


class MaterialSpec(_Model):
    model: Literal["hg", "mirror", "dielectric", "absorber"] = "hg"
    g: float | None = Field(None, ge=0, le=1)
    n: float | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _params(self):
        if self.model == "hg" and self.g is None:
            raise ValueError("hg material needs g")
        if self.model == "dielectric" and self.n is None:
            raise ValueError("dielectric material needs n")
        return self


class RoughnessSpec(_Model):
    noise_mean: float = 0.0
    noise_sigma: float = Field(0.1, ge=0)
    kernel_sigma: float = Field(1.0, gt=0)
    seed: int = 0


class SurfaceObject(_Model):
    type: Literal["surface"]
    kind: str
    params: dict = Field(default_factory=dict)
    nx: int = Field(128, ge=2)
    ny: int | None = Field(None, ge=2)
    dx: float = Field(0.5, gt=0, description="µm")
    dy: float | None = Field(None, gt=0)
    roughness: RoughnessSpec | None = None
    offset_um: float = 0.0
    material: MaterialSpec = Field(default_factory=lambda: MaterialSpec(g=0.8))

    @field_validator("kind")
    @classmethod
    def _kind(cls, v):
        if v not in SURFACE_KINDS:
            raise ValueError(f"unknown surface kind '{v}'; expected one of {SURFACE_KINDS}")
        return v


class HeightfieldFileObject(_Model):
    type: Literal["heightfield_file"]
    path: str
    roughness: RoughnessSpec | None = None
    offset_um: float = 0.0
    material: MaterialSpec = Field(default_factory=lambda: MaterialSpec(g=0.8))

    @field_validator("path")
    @classmethod
    def _path(cls, v, info: ValidationInfo):
        return _existing(v, info)


class StlObject(_Model):
    type: Literal["stl"]
    path: str
    scale: float = Field(1e-3, gt=0, description="mm per file unit (default: file in µm)")
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    material: MaterialSpec = Field(default_factory=lambda: MaterialSpec(g=0.8))

    @field_validator("path")
    @classmethod
    def _path(cls, v, info: ValidationInfo):
        return _existing(v, info)


class PlaneObject(_Model):
    type: Literal["plane"]
    height_um: float = 0.0
    normal: tuple[float, float, float] = (0.0, 0.0, 1.0)
    material: MaterialSpec = Field(default_factory=lambda: MaterialSpec(g=0.8))


class SphereObject(_Model):
    type: Literal["sphere"]
    center: tuple[float, float, float]
    radius: float = Field(gt=0, description="mm")
    material: MaterialSpec = Field(default_factory=lambda: MaterialSpec(model="dielectric", n=1.5))


SceneItem = Annotated[Union[SurfaceObject, HeightfieldFileObject, StlObject, PlaneObject, SphereObject],
                      Field(discriminator="type")]


class SceneSpec(_Model):
    objects: list[SceneItem] = Field(min_length=1)


class RenderSpec(_Model):
    n_rays: int = Field(1_000_000, ge=1)
    seed: int = 0
    max_depth: int = Field(16, ge=1)
    batch_size: int = Field(100_000, ge=1)
    threads: int | None = Field(None, ge=1)

    _n = field_validator("n_rays", "batch_size", mode="before")(_count)


class ScanSpec(_Model):
    z_start: float
    z_end: float
    delta_z: float = Field(0.05, gt=0)
    rays_per_image: int = Field(1_000_000, ge=1)
    seed_policy: Literal[SEED_POLICIES] = "per-image"
    window: int = Field(DEFAULT_WINDOW, ge=3)
    prominence: float = Field(DEFAULT_PROMINENCE, ge=0)

    _n = field_validator("rays_per_image", mode="before")(_count)

    @model_validator(mode="after")
    def _range(self):
        if self.z_end <= self.z_start:
            raise ValueError("z_end must exceed z_start")
        if (self.z_end - self.z_start) / self.delta_z + 1 < 3 - 1e-9:
            raise ValueError("scan range must hold at least 3 images")
        if self.window % 2 == 0:
            raise ValueError("window must be odd")
        return self


class SweepSpec(_Model):
    n_rays: list[int] = Field(min_length=1)
    g: list[Annotated[float, Field(ge=0, le=1)]] = Field(min_length=1)
    seeds: int = Field(3, ge=2, description="repeated renders per cell for the noise estimate")

    @field_validator("n_rays", mode="before")
    @classmethod
    def _counts(cls, v):
        return [_count(x) for x in v] if isinstance(v, list) else v

    @field_validator("n_rays")
    @classmethod
    def _positive(cls, v):
        if any(x < 1 for x in v):
            raise ValueError("ray counts must be >= 1")
        return v


class PsfSpec(_Model):
    sigma: float | None = Field(None, gt=0, description="Gaussian sigma, pixels")
    kernel_file: str | None = None
    input: str | None = None

    @field_validator("kernel_file", "input")
    @classmethod
    def _path(cls, v, info: ValidationInfo):
        return None if v is None else _existing(v, info)

    @model_validator(mode="after")
    def _one(self):
        if (self.sigma is None) == (self.kernel_file is None):
            raise ValueError("give exactly one of sigma or kernel_file")
        return self


class RunConfig(_Model):
    schema_version: Literal[SCHEMA_VERSION] = SCHEMA_VERSION
    instrument: InstrumentSpec = Field(default_factory=InstrumentSpec)
    scene: SceneSpec
    render: RenderSpec = Field(default_factory=RenderSpec)
    scan: ScanSpec | None = None
    sweep: SweepSpec | None = None
    psf: PsfSpec | None = None
    output_dir: str = "out"


def load_config(path) -> RunConfig:
    """Parse and validate a YAML run configuration (raises pydantic ValidationError)."""
    path = Path(path)
    data = yaml.safe_load(path.read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    return RunConfig.model_validate(data, context={"base_dir": path.resolve().parent})


# ---------------------------------------------------------------- builders

def build_instrument(spec: InstrumentSpec) -> InstrumentConfig:
    return build_default_instrument(
        na=spec.na, magnification=spec.magnification, working_distance=spec.working_distance,
        detector_pixels=spec.detector_pixels, detector_side=spec.detector_side,
        rho=spec.split_ratio, mask_cell_um=spec.mask_cell_um,
        illumination_angle_deg=spec.illumination_angle_deg, objective=spec.objective)


def build_material(spec: MaterialSpec, g_override: float | None = None):
    if spec.model == "hg":
        return HGSurface(spec.g if g_override is None else g_override)
    if spec.model == "mirror":
        return Mirror()
    if spec.model == "dielectric":
        return Dielectric(spec.n)
    return Absorber()


def _roughen(h: Heightfield, spec: RoughnessSpec | None) -> Heightfield:
    if spec is None:
        return h
    return add_micro_roughness(h, MicroRoughnessParams(spec.noise_mean, spec.noise_sigma,
                                                       spec.kernel_sigma, spec.seed))


def object_heightfield(obj) -> Heightfield | None:
    """Sample heightfield of a surface-like object (before roughness), µm."""
    if isinstance(obj, SurfaceObject):
        grid = dict(nx=obj.nx, ny=obj.ny or obj.nx, dx=obj.dx, dy=obj.dy or obj.dx)
        return generate_surface(obj.kind, obj.params, **grid)
    if isinstance(obj, HeightfieldFileObject):
        return read_heightfield(obj.path)
    return None


def build_scene(spec: SceneSpec, g_override: float | None = None) -> tuple[Scene, Heightfield | None]:
    """Scene plus the reference heightfield of the first surface-like object.

    ``g_override`` replaces g of every HG material (used by sweeps).
    """
    scene = Scene()
    reference = None
    for obj in spec.objects:
        material = build_material(obj.material, g_override)
        h = object_heightfield(obj)
        if h is not None:
            offset = obj.offset_um
            if reference is None:
                reference = h.with_heights(h.heights + offset)
            heightfield_object(_roughen(h, obj.roughness), material, scene, (0.0, 0.0, offset * 1e-3))
        elif isinstance(obj, StlObject):
            mesh = load_stl(obj.path)
            mesh = TriangleMesh(mesh.vertices * obj.scale, mesh.triangles)
            scene.add(MeshGeometry(mesh), material, RigidTransform.from_translation(obj.offset))
        elif isinstance(obj, PlaneObject):
            n = np.asarray(obj.normal, dtype=np.float64)
            scene.add(ImplicitPlane((0.0, 0.0, obj.height_um * 1e-3), tuple(n / np.linalg.norm(n))),
                      material)
        elif isinstance(obj, SphereObject):
            scene.add(ImplicitSphere(tuple(obj.center), obj.radius), material)
    return scene, reference


def build_scan(spec: ScanSpec, render: RenderSpec) -> ScanConfig:
    return ScanConfig(spec.z_start, spec.z_end, spec.delta_z, spec.rays_per_image, spec.seed_policy,
                      render.seed, render.max_depth, render.batch_size)
