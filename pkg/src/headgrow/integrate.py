"""Depth from normals by sparse linear least squares.

Each valid pixel with a valid right (bottom) neighbour contributes

    n_z (z[r, c+1] - z[r, c]) = -n_x          (x gradient)
    n_z (z[r+1, c] - z[r, c]) = +n_y          (y gradient; rows grow downward)

which is the orthographic relation dz/dx = -n_x/n_z, dz/dy = -n_y/n_z in a
y-up camera frame.  Where |n_z| is tiny the pair is replaced by the single
tangency row

    n_y (z[r, c+1] - z[r, c]) + n_x (z[r+1, c] - z[r, c]) = 0.

Optional Dirichlet data enter as ``||W z - W z0||^2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .errors import EmptyRegion, NoValidPixels, SolverDivergence
from .fields import DepthMap, NormalField
from .geometry import Pose

logger = logging.getLogger(__name__)

NZ_DEGENERATE = 0.05
SOLVER_TOL = 1e-8


@dataclass
class GradientSystem:
    M: sp.csr_matrix  # (rows, p)
    v: np.ndarray
    index: np.ndarray  # (H, W) column per pixel, -1 if not an unknown
    pixels: np.ndarray  # (p, 2) (row, col) per column
    degenerate_rows: int = 0

    @property
    def p(self) -> int:
        return self.M.shape[1]

    def residual(self, z: np.ndarray) -> float:
        return float(np.linalg.norm(self.M @ z - self.v))


@dataclass
class BoundaryConstraint:
    z0: np.ndarray  # (H, W), NaN where undefined
    weights: np.ndarray  # (H, W) in [0, 1]

    def __post_init__(self):
        self.z0 = np.asarray(self.z0, float)
        self.weights = np.asarray(self.weights, float)
        undefined = ~np.isfinite(self.z0)
        if np.any(self.weights[undefined] > 0):
            raise ValueError("blend weights must be zero where z0 is undefined")


def build_gradient_system(
    field: NormalField,
    nz_threshold: float = NZ_DEGENERATE,
    sign: float = -1.0,
    weight_by_albedo: bool = True,
) -> GradientSystem:
    """Assemble the gradient-constraint matrix over the field's valid pixels.

    ``sign`` multiplies ``n_x`` on the right-hand side (-1: standard
    orthographic convention; +1: the literal form without the minus sign).
    """
    valid = np.asarray(field.valid, bool)
    if not valid.any():
        raise NoValidPixels("normal field has no valid pixels")
    h, w = valid.shape
    index = np.full((h, w), -1, dtype=np.int64)
    rows_px, cols_px = np.nonzero(valid)
    index[rows_px, cols_px] = np.arange(len(rows_px))
    p = len(rows_px)

    n = field.normals
    nx, ny, nz = n[..., 0], n[..., 1], n[..., 2]
    wt = np.minimum(field.albedo, 1.0) if weight_by_albedo else np.ones((h, w))

    right = np.zeros((h, w), bool)
    right[:, :-1] = valid[:, :-1] & valid[:, 1:]
    down = np.zeros((h, w), bool)
    down[:-1, :] = valid[:-1, :] & valid[1:, :]
    degenerate = valid & (np.abs(nz) < nz_threshold)

    r_i, c_i, vals, rhs = [], [], [], []
    row = 0

    def emit(mask, cols_coeffs, b):
        nonlocal row
        rr, cc = np.nonzero(mask)
        k = len(rr)
        if k == 0:
            return
        ids = row + np.arange(k)
        for (dr, dc), coeff in cols_coeffs:
            r_i.append(ids)
            c_i.append(index[rr + dr, cc + dc])
            vals.append((coeff * wt)[rr, cc])
        rhs.append((b * wt)[rr, cc])
        row += k

    ok_x = right & ~degenerate
    ok_y = down & ~degenerate
    emit(ok_x, [((0, 0), -nz), ((0, 1), nz)], sign * nx)
    emit(ok_y, [((0, 0), -nz), ((1, 0), nz)], -sign * ny)
    tangent = degenerate & right & down
    emit(tangent, [((0, 0), -(nx + ny)), ((0, 1), ny), ((1, 0), nx)], np.zeros((h, w)))

    if row:
        M = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(r_i), np.concatenate(c_i))), shape=(row, p)
        )
        v = np.concatenate(rhs)
    else:
        M = sp.csr_matrix((0, p))
        v = np.zeros(0)
    return GradientSystem(M, v, index, np.stack([rows_px, cols_px], 1), int(tangent.sum()))


def make_blend_mask(region: np.ndarray, band_width: float = 10) -> np.ndarray:
    """Weights 1 deep inside ``region``, ramping linearly to 0 at its boundary.

    The ramp uses the Euclidean distance to the nearest outside pixel
    (1 for pixels touching the outside): ``W = min(1, d / band_width)``.
    """
    region = np.asarray(region, bool)
    if not region.any():
        raise EmptyRegion("blend region is empty")
    if band_width <= 0 or region.all():
        # the image frame is not treated as a region boundary
        return region.astype(float)
    dist = ndimage.distance_transform_edt(region)
    return np.where(region, np.minimum(1.0, dist / band_width), 0.0)


def _components(system: GradientSystem) -> tuple[int, np.ndarray]:
    adj = (abs(system.M).T @ abs(system.M)).tocsr()
    return connected_components(adj, directed=False)


def integrate_normals(
    field: NormalField,
    bc: BoundaryConstraint | None = None,
    nz_threshold: float = NZ_DEGENERATE,
    sign: float = -1.0,
    x0: np.ndarray | None = None,
    drop_unanchored: bool = False,
    tol: float = SOLVER_TOL,
    system: GradientSystem | None = None,
) -> DepthMap:
    """Least-squares depth ``argmin ||M z - v||^2 (+ ||W z - W z0||^2)``.

    Connected pieces without Dirichlet data are fixed to zero mean (or
    dropped, with ``drop_unanchored``).  ``x0`` is a warm start; the returned
    minimiser does not depend on it.
    """
    if system is None:
        system = build_gradient_system(field, nz_threshold, sign)
    p = system.p
    M, v = system.M, system.v
    A = (M.T @ M).tocsr()
    b = M.T @ v
    wz = np.zeros(p)
    if bc is not None:
        rr, cc = system.pixels[:, 0], system.pixels[:, 1]
        wts = bc.weights[rr, cc]
        z0 = np.where(wts > 0, bc.z0[rr, cc], 0.0)
        wz = wts**2
        A = A + sp.diags(wz)
        b = b + wz * z0

    n_comp, labels = _components(system)
    anchored = np.zeros(n_comp, bool)
    if bc is not None:
        anchored[np.unique(labels[wz > 0])] = True
    # pin one pixel in every unanchored component; the mean is fixed afterwards
    pins = np.array([np.argmax(labels == k) for k in range(n_comp) if not anchored[k]], dtype=np.int64)
    pin_diag = np.zeros(p)
    pin_diag[pins] = 1.0
    A_solve = (A + sp.diags(pin_diag)).tocsc()

    start = np.zeros(p) if x0 is None else np.asarray(x0, float)[system.pixels[:, 0], system.pixels[:, 1]]
    rhs = b - A_solve @ start
    bnorm = max(np.linalg.norm(b), np.linalg.norm(A_solve @ start), 1e-300)
    lu = splu(A_solve)
    z = start.copy()
    for _ in range(4):
        z = z + lu.solve(rhs)
        rhs = b - A_solve @ z
        if np.linalg.norm(rhs) <= tol * bnorm:
            break
    rel = np.linalg.norm(rhs) / bnorm
    if not np.isfinite(rel) or (rel > tol and np.linalg.norm(b) > 0):
        raise SolverDivergence(f"relative residual {rel:.3g} above tolerance {tol:g}")

    keep = np.ones(p, bool)
    for k in range(n_comp):
        if anchored[k]:
            continue
        members = labels == k
        if drop_unanchored and bc is not None:
            keep[members] = False
        else:
            z[members] -= z[members].mean()

    h, w = field.valid.shape
    depth = np.zeros((h, w))
    valid = np.zeros((h, w), bool)
    rr, cc = system.pixels[keep, 0], system.pixels[keep, 1]
    depth[rr, cc] = z[keep]
    valid[rr, cc] = True
    return DepthMap(depth, valid, Pose())


def objective(system: GradientSystem, z_img: np.ndarray, bc: BoundaryConstraint | None = None) -> float:
    """Value of ``||M z - v||^2 + ||W z - W z0||^2`` for a depth image."""
    z = z_img[system.pixels[:, 0], system.pixels[:, 1]]
    val = float(np.sum((system.M @ z - system.v) ** 2))
    if bc is not None:
        wts = bc.weights[system.pixels[:, 0], system.pixels[:, 1]]
        z0 = np.where(wts > 0, bc.z0[system.pixels[:, 0], system.pixels[:, 1]], 0.0)
        val += float(np.sum((wts * (z - z0)) ** 2))
    return val
