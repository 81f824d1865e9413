"""STL reading and writing (binary and ASCII)."""

from __future__ import annotations

import os
import re
import struct

import numpy as np

from .mesh import TriangleMesh

_RECORD = np.dtype([
    ("normal", "<f4", (3,)),
    ("v", "<f4", (3, 3)),
    ("attr", "<u2"),
])
assert _RECORD.itemsize == 50


class StlError(ValueError):
    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")


def load_stl(path) -> TriangleMesh:
    """Load a binary or ASCII STL file.

    Stored facet normals are ignored; normals are recomputed from vertex
    winding. Degenerate facets are dropped and reported in
    ``mesh.diagnostics`` as ``facets`` / ``dropped``.
    """
    with open(path, "rb") as f:
        data = f.read()
    corners = _parse(data, path)
    try:
        mesh = TriangleMesh.from_soup(corners)
    except ValueError as exc:
        raise StlError(str(exc), path=path) from exc
    mesh.diagnostics["source"] = os.fspath(path)
    return mesh


def _parse(data: bytes, path=None) -> np.ndarray:
    if len(data) >= 84:
        (n,) = struct.unpack_from("<I", data, 80)
        if len(data) == 84 + 50 * n:
            return _parse_binary(data, n)
    head = data[:512].lstrip()
    if head[:5].lower() == b"solid":
        return _parse_ascii(data, path)
    if len(data) < 84:
        raise StlError("truncated binary header", offset=len(data), path=path)
    (n,) = struct.unpack_from("<I", data, 80)
    expected = 84 + 50 * n
    raise StlError(f"binary STL declares {n} facets ({expected} bytes) but file has {len(data)} bytes",
                   offset=min(len(data), expected), path=path)


def _parse_binary(data: bytes, n: int) -> np.ndarray:
    rec = np.frombuffer(data, dtype=_RECORD, count=n, offset=84)
    return rec["v"].astype(np.float64)


_FLOAT = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_VERTEX = re.compile(rb"vertex\s+(" + _FLOAT.encode() + rb")\s+(" + _FLOAT.encode()
                     + rb")\s+(" + _FLOAT.encode() + rb")")


def _parse_ascii(data: bytes, path=None) -> np.ndarray:
    verts = []
    for m in re.finditer(rb"facet\b(.*?)endfacet", data, flags=re.S):
        body = m.group(1)
        found = _VERTEX.findall(body)
        if len(found) != 3 or body.count(b"vertex") != 3:
            raise StlError("facet must contain exactly 3 well-formed vertices",
                           offset=m.start(), path=path)
        verts.append([[float(c) for c in v] for v in found])
    if not verts:
        raise StlError("no facets found in ASCII STL", offset=0, path=path)
    stray = data.count(b"facet") - 2 * len(verts)
    if stray != 0:
        pos = data.rfind(b"facet")
        raise StlError("unterminated facet record", offset=pos, path=path)
    return np.asarray(verts, dtype=np.float64)


def write_stl(mesh: TriangleMesh, path, binary: bool = True, name: str = "fvsim") -> None:
    c = mesh.corners()
    if binary:
        rec = np.zeros(len(c), dtype=_RECORD)
        rec["normal"] = mesh.normals.astype(np.float32)
        rec["v"] = c.astype(np.float32)
        header = name.encode()[:80].ljust(80, b" ")
        with open(path, "wb") as f:
            f.write(header)
            f.write(struct.pack("<I", len(c)))
            f.write(rec.tobytes())
        return
    lines = [f"solid {name}"]
    for n, tri in zip(mesh.normals, c):
        lines.append(f"  facet normal {n[0]:.9e} {n[1]:.9e} {n[2]:.9e}")
        lines.append("    outer loop")
        for v in tri:
            lines.append(f"      vertex {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
        lines.append("    endloop")
        lines.append("  endfacet")
    lines.append(f"endsolid {name}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
