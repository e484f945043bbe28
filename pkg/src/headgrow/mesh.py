"""Triangle mesh container, ASCII PLY/OBJ I/O and pixel-grid triangulation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class HeadMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    provenance: np.ndarray = None  # (V,) int cluster id per vertex
    fiducial_vertices: np.ndarray | None = None  # (7,) int
    vertex_albedo: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.provenance is None:
            self.provenance = np.zeros(len(self.vertices), dtype=np.int64)
        self.provenance = np.asarray(self.provenance, dtype=np.int64)
        if self.fiducial_vertices is not None:
            self.fiducial_vertices = np.asarray(self.fiducial_vertices, dtype=np.int64)

    @classmethod
    def empty(cls) -> "HeadMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def copy(self) -> "HeadMesh":
        return HeadMesh(
            self.vertices.copy(),
            self.faces.copy(),
            self.provenance.copy(),
            None if self.fiducial_vertices is None else self.fiducial_vertices.copy(),
            None if self.vertex_albedo is None else self.vertex_albedo.copy(),
        )

    def check(self) -> None:
        """Assert the structural invariants (index range, no repeated indices)."""
        f = self.faces
        if len(f):
            if f.min() < 0 or f.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face with repeated vertex")
        if self.provenance.shape != (len(self.vertices),):
            raise ValueError("provenance must have one entry per vertex")

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(0), self.vertices.max(0)


# --- I/O ---------------------------------------------------------------


def write_ply(mesh: HeadMesh, path) -> None:
    """ASCII PLY; provenance is written as an ``int`` vertex property."""
    path = Path(path)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {mesh.n_vertices}",
        "property float x",
        "property float y",
        "property float z",
        "property int provenance",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    body = [f"{x:.6f} {y:.6f} {z:.6f} {int(p)}" for (x, y, z), p in zip(mesh.vertices, mesh.provenance)]
    body += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    path.write_text("\n".join(lines + body) + "\n")


def write_obj(mesh: HeadMesh, path) -> None:
    path = Path(path)
    body = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    body += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    path.write_text("\n".join(body) + "\n")


def read_obj(path) -> HeadMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(t) for t in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(t.split("/")[0]) for t in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    return HeadMesh(np.array(verts, float), np.array(faces, np.int64))


def read_ply(path) -> HeadMesh:
    """Read an ASCII PLY with x/y/z (and optional provenance) vertex properties."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_vert = n_face = 0
    props: list[str] = []
    current = None
    i = 1
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if tok[0] == "element":
            current = tok[1]
            if current == "vertex":
                n_vert = int(tok[2])
            elif current == "face":
                n_face = int(tok[2])
        elif tok[0] == "property" and current == "vertex":
            props.append(tok[-1])
        elif tok[0] == "end_header":
            break
    data = np.array([[float(t) for t in lines[i + k].split()] for k in range(n_vert)]).reshape(n_vert, -1)
    col = {name: k for k, name in enumerate(props)}
    verts = data[:, [col["x"], col["y"], col["z"]]]
    prov = data[:, col["provenance"]].astype(np.int64) if "provenance" in col else None
    faces = []
    for k in range(n_face):
        tok = [int(t) for t in lines[i + n_vert + k].split()]
        idx = tok[1 : 1 + tok[0]]
        for j in range(1, len(idx) - 1):
            faces.append([idx[0], idx[j], idx[j + 1]])
    return HeadMesh(verts, np.array(faces, np.int64).reshape(-1, 3), prov)


def read_mesh(path) -> HeadMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise ValueError(f"unsupported mesh format: {suffix}")


# --- grid triangulation -------------------------------------------------


def grid_faces(index_map: np.ndarray, require: np.ndarray | None = None) -> np.ndarray:
    """Triangulate an image-grid vertex index map.

    ``index_map`` holds a vertex index per pixel (``-1`` for none).  Each 2x2
    cell yields up to two triangles wound counter-clockwise as seen from the
    camera (normals toward the viewer).  With ``require`` (boolean per pixel),
    only triangles touching at least one required pixel are kept.
    """
    idx = np.asarray(index_map)
    a = idx[:-1, :-1]  # (r, c)
    b = idx[:-1, 1:]  # (r, c+1)
    c = idx[1:, :-1]  # (r+1, c)
    d = idx[1:, 1:]  # (r+1, c+1)
    full = (a >= 0) & (b >= 0) & (c >= 0) & (d >= 0)
    tris = []
    # full cells: (a, c, b) and (b, c, d)
    # three-corner cells: the single triangle formed by the present corners
    cases = [
        ((a, c, b), full | ((a >= 0) & (b >= 0) & (c >= 0) & (d < 0))),
        ((b, c, d), full | ((b >= 0) & (c >= 0) & (d >= 0) & (a < 0))),
        ((a, c, d), (a >= 0) & (c >= 0) & (d >= 0) & (b < 0)),
        ((a, d, b), (a >= 0) & (b >= 0) & (d >= 0) & (c < 0)),
    ]
    if require is not None:
        req = np.asarray(require, bool)
        ra, rb, rc, rd = req[:-1, :-1], req[:-1, 1:], req[1:, :-1], req[1:, 1:]
        reqs = [ra | rc | rb, rb | rc | rd, ra | rc | rd, ra | rd | rb]
    for k, ((p, q, r), ok) in enumerate(cases):
        if require is not None:
            ok = ok & reqs[k]
        tris.append(np.stack([p[ok], q[ok], r[ok]], axis=1))
    faces = np.concatenate(tris, axis=0) if tris else np.zeros((0, 3), np.int64)
    distinct = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return faces[distinct].astype(np.int64)


def filter_long_edges(vertices: np.ndarray, faces: np.ndarray, factor: float) -> np.ndarray:
    """Drop triangles whose longest 3D edge exceeds ``factor`` x the median longest edge."""
    if len(faces) == 0 or not np.isfinite(factor):
        return faces
    tri = vertices[faces]
    e = np.stack(
        [
            np.linalg.norm(tri[:, 1] - tri[:, 0], axis=1),
            np.linalg.norm(tri[:, 2] - tri[:, 1], axis=1),
            np.linalg.norm(tri[:, 0] - tri[:, 2], axis=1),
        ],
        axis=1,
    ).max(1)
    med = np.median(e)
    return faces[e <= factor * med]
