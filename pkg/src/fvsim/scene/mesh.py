"""Indexed triangle meshes and heightfield triangulation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import DEGENERATE_AREA

UM_TO_MM = 1e-3


def _face_normals(vertices: np.ndarray, triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    v0 = vertices[triangles[:, 0]]
    cr = np.cross(vertices[triangles[:, 1]] - v0, vertices[triangles[:, 2]] - v0)
    norm = np.linalg.norm(cr, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    return cr / safe[:, None], 0.5 * norm


@dataclass
class TriangleMesh:
    """Vertices in mm, triangles as vertex-index triples, normals from winding.

    ``diagnostics`` records load-time filtering (``facets``, ``dropped``).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.vertices) < 3:
            raise ValueError("mesh needs at least 3 vertices")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh vertices must be finite")
        self.normals, _ = _face_normals(self.vertices, self.triangles)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        return _face_normals(self.vertices, self.triangles)[1]

    def area(self) -> float:
        return float(self.areas().sum())

    def corners(self) -> np.ndarray:
        """(T, 3, 3) array of triangle corner coordinates."""
        return self.vertices[self.triangles]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.corners().reshape(-1, 3)
        return c.min(axis=0), c.max(axis=0)

    @classmethod
    def from_soup(cls, corners, tol: float = 0.0) -> "TriangleMesh":
        """Build an indexed mesh from a (T, 3, 3) triangle soup, merging identical vertices.

        Degenerate facets (area <= 1e-15 mm^2) are dropped and counted.
        """
        corners = np.asarray(corners, dtype=np.float64).reshape(-1, 3, 3)
        flat = corners.reshape(-1, 3)
        if tol > 0:
            key = np.round(flat / tol).astype(np.int64)
            _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
            verts = flat[first]
        else:
            verts, inverse = np.unique(flat, axis=0, return_inverse=True)
        tris = inverse.reshape(-1, 3)
        mesh = cls.__new__(cls)
        mesh.vertices = np.ascontiguousarray(verts)
        mesh.triangles = np.ascontiguousarray(tris, dtype=np.int64)
        mesh.diagnostics = {}
        return _filtered(mesh)

    def filter_degenerate(self) -> "TriangleMesh":
        return _filtered(self)

    def edge_use_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for a, b, c in self.triangles:
            for e in ((a, b), (b, c), (c, a)):
                k = (min(e), max(e))
                counts[k] = counts.get(k, 0) + 1
        return counts


def _filtered(mesh: TriangleMesh) -> TriangleMesh:
    tris = mesh.triangles.reshape(-1, 3)
    _, area = _face_normals(mesh.vertices, tris)
    repeated = (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
    keep = (area > DEGENERATE_AREA) & ~repeated
    dropped = int((~keep).sum())
    if not keep.any():
        raise ValueError(f"mesh is empty after dropping {dropped} degenerate facets")
    out = TriangleMesh(mesh.vertices, tris[keep])
    out.diagnostics = dict(mesh.diagnostics)
    out.diagnostics.update(facets=int(len(tris)), dropped=dropped)
    return out


def mesh_heightfield(h) -> TriangleMesh:
    """Triangulate a :class:`~fvsim.scene.surfaces.Heightfield` (µm) into a mesh in mm.

    Each grid cell is split along its (i, j)-(i+1, j+1) diagonal; triangles
    are wound counter-clockwise seen from +z, so normals face up. The grid is
    laid out on ``h.x_coords()`` / ``h.y_coords()``.
    """
    nx, ny = h.nx, h.ny
    xs = h.x_coords() * UM_TO_MM
    ys = h.y_coords() * UM_TO_MM
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel(), h.heights.ravel() * UM_TO_MM])
    j, i = np.meshgrid(np.arange(ny - 1), np.arange(nx - 1), indexing="ij")
    v00 = (j * nx + i).ravel()
    v10 = v00 + 1
    v01 = v00 + nx
    v11 = v01 + 1
    tris = np.empty((2 * v00.size, 3), dtype=np.int64)
    tris[0::2] = np.column_stack([v00, v10, v11])
    tris[1::2] = np.column_stack([v00, v11, v01])
    return TriangleMesh(verts, tris)
