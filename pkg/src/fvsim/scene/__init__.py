"""Sample geometry: meshes, BVH, STL files, heightfields and scene assembly."""

from .bvh import BvhTree, build_bvh
from .mesh import TriangleMesh, mesh_heightfield
from .objects import (ImplicitPlane, ImplicitSphere, MaterialRegistry, MeshGeometry, Scene,
                      SceneObject, heightfield_object, intersect_scene, pack_scene)
from .stl import StlError, load_stl, write_stl
from .surfaces import (Heightfield, MicroRoughnessParams, ParameterError, add_micro_roughness,
                       generate_surface, predicted_roughness_sigma, read_heightfield,
                       write_heightfield)

__all__ = [
    "BvhTree", "build_bvh", "TriangleMesh", "mesh_heightfield", "ImplicitPlane", "ImplicitSphere",
    "MaterialRegistry", "MeshGeometry", "Scene", "SceneObject", "heightfield_object",
    "intersect_scene", "pack_scene", "StlError", "load_stl", "write_stl", "Heightfield",
    "MicroRoughnessParams", "ParameterError", "add_micro_roughness", "generate_surface",
    "predicted_roughness_sigma", "read_heightfield", "write_heightfield",
]
