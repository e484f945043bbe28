"""Vectorized orthographic triangle rasterizer with a z-buffer.

Pixel centres sit at integer ``(col, row)`` positions.  Candidate pixels of
every triangle's bounding box are expanded in bulk, tested with barycentric
coordinates, and resolved per pixel by keeping the largest depth (closest to
the camera).  Ties go to the lower face index, so output is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import project

_INSIDE_EPS = 1e-9
_CHUNK = 4_000_000


@dataclass
class GBuffer:
    depth: np.ndarray  # (H, W), NaN where uncovered
    face: np.ndarray  # (H, W) int, -1 where uncovered
    bary: np.ndarray  # (H, W, 3)

    @property
    def covered(self) -> np.ndarray:
        return self.face >= 0

    @property
    def shape(self):
        return self.depth.shape


def rasterize(points_cam: np.ndarray, faces: np.ndarray, shape) -> GBuffer:
    """Rasterize camera-frame vertices ``points_cam`` into an ``(H, W)`` buffer."""
    h, w = shape[:2]
    depth = np.full(h * w, -np.inf)
    face_buf = np.full(h * w, -1, dtype=np.int64)
    bary = np.zeros((h * w, 3))
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return GBuffer(np.full((h, w), np.nan), face_buf.reshape(h, w), bary.reshape(h, w, 3))

    uvz = project(points_cam, shape)
    tri = uvz[faces]  # (F, 3, 3)
    u, v, z = tri[..., 0], tri[..., 1], tri[..., 2]
    area = (u[:, 1] - u[:, 0]) * (v[:, 2] - v[:, 0]) - (u[:, 2] - u[:, 0]) * (v[:, 1] - v[:, 0])
    umin = np.clip(np.ceil(u.min(1) - _INSIDE_EPS), 0, w).astype(np.int64)
    umax = np.clip(np.floor(u.max(1) + _INSIDE_EPS), -1, w - 1).astype(np.int64)
    vmin = np.clip(np.ceil(v.min(1) - _INSIDE_EPS), 0, h).astype(np.int64)
    vmax = np.clip(np.floor(v.max(1) + _INSIDE_EPS), -1, h - 1).astype(np.int64)
    nx = np.maximum(umax - umin + 1, 0)
    ny = np.maximum(vmax - vmin + 1, 0)
    counts = nx * ny
    counts[np.abs(area) < 1e-12] = 0
    live = np.nonzero(counts)[0]

    # chunk faces so the candidate expansion stays bounded in memory
    csum = np.cumsum(counts[live])
    start = 0
    while start < len(live):
        base = csum[start - 1] if start else 0
        stop = int(np.searchsorted(csum, base + _CHUNK, side="right"))
        stop = max(stop, start + 1)
        _raster_chunk(live[start:stop], u, v, z, area, umin, vmin, nx, counts, w, depth, face_buf, bary)
        start = stop

    covered = face_buf >= 0
    depth[~covered] = np.nan
    return GBuffer(depth.reshape(h, w), face_buf.reshape(h, w), bary.reshape(h, w, 3))


def _raster_chunk(fids, u, v, z, area, umin, vmin, nx, counts, w, depth, face_buf, bary):
    cnt = counts[fids]
    total = int(cnt.sum())
    f = np.repeat(fids, cnt)
    offsets = np.repeat(np.cumsum(cnt) - cnt, cnt)
    k = np.arange(total) - offsets
    px = umin[f] + k % nx[f]
    py = vmin[f] + k // nx[f]

    uf, vf = u[f], v[f]
    a = area[f]
    w0 = ((uf[:, 1] - px) * (vf[:, 2] - py) - (uf[:, 2] - px) * (vf[:, 1] - py)) / a
    w1 = ((uf[:, 2] - px) * (vf[:, 0] - py) - (uf[:, 0] - px) * (vf[:, 2] - py)) / a
    w2 = 1.0 - w0 - w1
    inside = (w0 >= -_INSIDE_EPS) & (w1 >= -_INSIDE_EPS) & (w2 >= -_INSIDE_EPS)
    if not inside.any():
        return
    f, px, py = f[inside], px[inside], py[inside]
    wts = np.stack([w0[inside], w1[inside], w2[inside]], axis=1)
    zz = (wts * z[f]).sum(1)
    pid = py * w + px

    order = np.lexsort((-zz, pid))  # nearest first within each pixel, stable on face id
    pid_sorted = pid[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pid_sorted[1:] != pid_sorted[:-1]
    sel = order[first]
    pid_sel = pid[sel]
    better = zz[sel] > depth[pid_sel]
    sel, pid_sel = sel[better], pid_sel[better]
    depth[pid_sel] = zz[sel]
    face_buf[pid_sel] = f[sel]
    bary[pid_sel] = wts[sel]


def face_normals(points: np.ndarray, faces: np.ndarray, normalize: bool = True) -> np.ndarray:
    p = np.asarray(points, float)
    tri = p[np.asarray(faces, dtype=np.int64)]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    if normalize:
        n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    return n


def vertex_normals(points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals (follows the faces' winding)."""
    faces = np.asarray(faces, dtype=np.int64)
    fn = face_normals(points, faces, normalize=False)
    vn = np.zeros((len(points), 3))
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    return np.where(norm > 0, vn / np.maximum(norm, 1e-300), 0.0)


def shade_normals(gbuf: GBuffer, points_cam: np.ndarray, faces: np.ndarray, smooth: bool = True) -> np.ndarray:
    """Per-pixel unit normals in the camera frame, oriented toward the camera.

    With ``smooth`` the vertex normals are interpolated and then flipped with
    the sign that makes the covering face camera-facing; this makes the result
    independent of the mesh's winding convention.
    """
    h, w = gbuf.shape
    out = np.zeros((h, w, 3))
    cov = gbuf.covered
    if not cov.any():
        return out
    faces = np.asarray(faces, dtype=np.int64)
    fid = gbuf.face[cov]
    fn = face_normals(points_cam, faces[fid])
    sign = np.where(fn[:, 2] < 0, -1.0, 1.0)[:, None]
    if smooth:
        vn = vertex_normals(points_cam, faces)
        n = (gbuf.bary[cov][:, :, None] * vn[faces[fid]]).sum(1)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        bad = norm[:, 0] < 1e-12
        n = np.where(bad[:, None], fn, n / np.maximum(norm, 1e-300)) * sign
    else:
        n = fn * sign
    out[cov] = n
    return out
