"""Scene objects: geometry, material reference and placement."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import INF, HitRecord, Ray, RigidTransform, as_vec3, normalize
from ..optics import Absorber, Dielectric, HGSurface, Mirror
from .. import tracer
from .bvh import BvhTree, build_bvh
from .mesh import TriangleMesh, mesh_heightfield


@dataclass(frozen=True)
class ImplicitSphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")


@dataclass(frozen=True)
class ImplicitPlane:
    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)


@dataclass
class MeshGeometry:
    mesh: TriangleMesh
    bvh: BvhTree = None

    def __post_init__(self):
        if self.bvh is None:
            self.bvh = build_bvh(self.mesh)


Geometry = ImplicitSphere | ImplicitPlane | MeshGeometry


class MaterialRegistry:
    """Integer ids for material models, shared by every object of a scene."""

    def __init__(self):
        self._items: list = []

    def register(self, material) -> int:
        for k, m in enumerate(self._items):
            if m == material:
                return k
        self._items.append(material)
        return len(self._items) - 1

    def __getitem__(self, material_id: int):
        if not 0 <= material_id < len(self._items):
            raise KeyError(f"material id {material_id} is not registered")
        return self._items[material_id]

    def __contains__(self, material_id: int) -> bool:
        return 0 <= material_id < len(self._items)

    def __len__(self) -> int:
        return len(self._items)


@dataclass
class SceneObject:
    geometry: Geometry
    material_id: int
    transform: RigidTransform = field(default_factory=RigidTransform)

    def translated(self, offset) -> "SceneObject":
        """Copy moved by ``offset`` (mm) in world space; the BVH is shared."""
        t = RigidTransform.from_translation(offset).compose(self.transform)
        return replace(self, transform=t)


@dataclass
class Scene:
    objects: list[SceneObject] = field(default_factory=list)
    materials: MaterialRegistry = field(default_factory=MaterialRegistry)

    def add(self, geometry, material, transform: RigidTransform | None = None) -> int:
        mid = self.materials.register(material)
        self.objects.append(SceneObject(geometry, mid, transform or RigidTransform()))
        return len(self.objects) - 1

    def validate(self) -> None:
        for k, o in enumerate(self.objects):
            if o.material_id not in self.materials:
                raise ValueError(f"object {k} refers to unregistered material {o.material_id}")

    def translated(self, offset) -> "Scene":
        return Scene([o.translated(offset) for o in self.objects], self.materials)


def material_code(material) -> tuple[int, tuple[float, float]]:
    """Kernel material code and parameters for a scene material model."""
    if isinstance(material, HGSurface):
        return tracer.M_HG, (material.g, 0.0)
    if isinstance(material, Mirror):
        return tracer.M_MIRROR, (0.0, 0.0)
    if isinstance(material, Dielectric):
        # the geometric normal side is treated as the surrounding air
        return tracer.M_DIELECTRIC, (1.0, material.n)
    if isinstance(material, Absorber):
        return tracer.M_ABSORBER, (0.0, 0.0)
    raise ValueError(f"material {material!r} cannot be placed in a scene")


def add_object(table: tracer.PrimTable, obj: SceneObject, material, object_id: int) -> None:
    code, params = material_code(material)
    tf = obj.transform
    g = obj.geometry
    if isinstance(g, ImplicitSphere):
        table.add_sphere(tf.point(g.center), g.radius, code, params, object_id)
    elif isinstance(g, ImplicitPlane):
        table.add_disk(tf.point(g.point), tf.vector(normalize(g.normal)), INF, code, params,
                       object_id=object_id)
    elif isinstance(g, MeshGeometry):
        table.add_mesh(g.bvh, code, params, tf.rotation, tf.translation, object_id)
    else:
        raise TypeError(f"unsupported geometry {type(g).__name__}")


def pack_scene(scene: Scene, table: tracer.PrimTable | None = None,
               first_object_id: int = 0) -> tracer.PrimTable:
    scene.validate()
    table = table or tracer.PrimTable()
    for k, obj in enumerate(scene.objects):
        add_object(table, obj, scene.materials[obj.material_id], first_object_id + k)
    return table


def _as_scene(objects) -> Scene:
    if isinstance(objects, Scene):
        return objects
    objects = list(objects)
    if objects:
        raise TypeError("intersect_scene needs a Scene (objects plus their materials)")
    return Scene()


def intersect_scene(ray: Ray, objects) -> tuple[HitRecord, int] | None:
    """Globally nearest hit; equal distances go to the lower object id, then triangle."""
    scene = _as_scene(objects)
    if not scene.objects:
        return None
    S = pack_scene(scene).pack()
    o, d = ray.origin, ray.direction
    t, p, slot = tracer.nearest(S, o[0], o[1], o[2], d[0], d[1], d[2], float(ray.t_min),
                                float(ray.t_max), tracer.new_stack())
    if p < 0:
        return None
    point = ray.at(t)
    n = np.array(tracer.geometric_normal(S, p, slot, *point))
    front = float(np.dot(n, d)) < 0.0
    oid = int(S.pi[p, 3])
    tri = -1
    if slot >= 0:
        tri = int(S.perm[slot])
    hit = HitRecord(float(t), point, n if front else -n, oid, front, tri)
    return hit, scene.objects[oid].material_id


def nearest_hits(scene: Scene, origins, directions, t_min: float = 0.0, t_max: float = INF):
    """Vectorised nearest hit: (t, object id, triangle index); -1 / inf on miss."""
    S = pack_scene(scene).pack()
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    d = d / np.linalg.norm(d, axis=1)[:, None]
    t = np.empty(len(o))
    p = np.empty(len(o), np.int64)
    s = np.empty(len(o), np.int64)
    tracer.nearest_batch(S, o, d, float(t_min), float(t_max), t, p, s, tracer.new_stack())
    oid = np.where(p >= 0, S.pi[np.maximum(p, 0), 3], -1)
    tri = np.where(s >= 0, S.perm[np.maximum(s, 0)], -1)
    return t, oid, tri


def heightfield_object(h, material, scene: Scene, offset_mm=(0.0, 0.0, 0.0)) -> int:
    """Add a meshed heightfield (µm) to ``scene`` as a sample."""
    return scene.add(MeshGeometry(mesh_heightfield(h)), material,
                     RigidTransform.from_translation(as_vec3(offset_mm)))
