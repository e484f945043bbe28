"""Uncalibrated photometric stereo for one view cluster.

The intensity matrix ``Q`` (photos x pixels) of a Lambertian surface with an
ambient term factors as ``Q = L N`` where each row of ``L`` is a photo's
lighting 4-vector ``[ambient, x, y, z]`` and each column of ``N`` is
``albedo * [1, n]``.  The factorization is recovered up to a 4x4 linear
transform, which the ambiguity module resolves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateLighting, TooFewPhotos
from .fields import NormalField
from .ingest import PhotoCluster

MIN_PHOTOS = 4
DEGENERATE_RATIO = 1e-8


@dataclass
class IntensityMatrix:
    values: np.ndarray  # (n, p)
    covered: np.ndarray  # (n, p) bool
    pixel_index: np.ndarray  # (p, 2) as (row, col)
    photo_index: list
    shape: tuple
    region: str = "face"

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


@dataclass
class LightingBasis:
    coefficients: np.ndarray  # (n, 4)
    singular_values: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.coefficients)


def default_face_region(valid: np.ndarray, fraction: float = 0.25) -> np.ndarray:
    """Interior of the head mask: pixels at least ``fraction`` x the maximum
    distance away from the mask boundary."""
    dist = ndimage.distance_transform_edt(valid)
    if dist.max() == 0:
        return valid.copy()
    return dist >= fraction * dist.max()


def build_intensity_matrix(cluster: PhotoCluster, region_mask: np.ndarray, region: str = "face") -> IntensityMatrix:
    if len(cluster) < MIN_PHOTOS:
        raise TooFewPhotos(f"cluster {cluster.cluster_id}: {len(cluster)} photos, need at least {MIN_PHOTOS}")
    region_mask = np.asarray(region_mask, bool)
    masks = cluster.mask_stack()
    region_mask = region_mask & masks.any(0)
    rows, cols = np.nonzero(region_mask)
    values = cluster.pixel_stack()[:, rows, cols]
    covered = masks[:, rows, cols]
    return IntensityMatrix(
        values=values,
        covered=covered,
        pixel_index=np.stack([rows, cols], axis=1),
        photo_index=[p.id for p in cluster.photos],
        shape=cluster.shape,
        region=region,
    )


def impute_missing(Q: IntensityMatrix) -> np.ndarray:
    """Replace uncovered entries by the column mean of the covered ones."""
    vals = np.where(Q.covered, Q.values, 0.0)
    cnt = Q.covered.sum(0)
    mean = vals.sum(0) / np.maximum(cnt, 1)
    return np.where(Q.covered, Q.values, mean[None, :])


def factor_rank4(Q: IntensityMatrix) -> tuple[LightingBasis, np.ndarray]:
    """Best rank-4 factorization ``Q ~ L @ N`` via truncated SVD.

    ``L`` is the leading left singular vectors scaled by their singular
    values, ``N`` (4 x p) the matching right singular vectors.  Each factor
    pair is sign-fixed so that the lighting column correlates non-negatively
    with the photos' mean brightness.
    """
    if Q.n < MIN_PHOTOS:
        raise TooFewPhotos(f"{Q.n} photos, need at least {MIN_PHOTOS}")
    X = impute_missing(Q)
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    if len(s) < 4 or s[3] < DEGENERATE_RATIO * s[0]:
        raise DegenerateLighting(
            "fourth singular value %.3g below %.0e x first (%.3g): not enough lighting variation"
            % (s[3] if len(s) > 3 else 0.0, DEGENERATE_RATIO, s[0])
        )
    L = U[:, :4] * s[:4]
    N = Vt[:4].copy()
    brightness = X.mean(1) - X.mean()
    for k in range(4):
        c = float(L[:, k] @ brightness)
        if abs(c) <= 1e-12 * np.linalg.norm(L[:, k]) * (np.linalg.norm(brightness) + 1e-300):
            c = L[np.argmax(np.abs(L[:, k])), k]
        if c < 0:
            L[:, k] *= -1
            N[k] *= -1
    return LightingBasis(L, s), N


def _batched_solve(S: np.ndarray, L: np.ndarray, q: np.ndarray, cond_limit: float = 1e10):
    """Per-column least squares ``min ||S_j * (L m_j - q_j)||`` for selection weights S (n, p)."""
    G = np.einsum("np,ni,nj->pij", S, L, L, optimize=True)
    b = np.einsum("np,ni,np->pi", S, L, q, optimize=True)
    ev = np.linalg.eigvalsh(G)
    ok = (ev[:, 0] > 0) & (ev[:, 0] * cond_limit > ev[:, -1])
    m = np.zeros((len(G), 4))
    if ok.any():
        m[ok] = np.linalg.solve(G[ok], b[ok][..., None])[..., 0]
    return m, ok


def select_photos(L, q, covered, gate: float = 2.0, iterations: int = 1):
    """Residual-gated photo selection per pixel.

    A photo participates at a pixel when it is covered there and its residual
    against the current per-pixel solve is within ``gate`` x the median
    absolute residual (over covered photos).  Returns ``(m, selected, ok)``.
    """
    S = covered.astype(float)
    m, ok = _batched_solve(S, L, q)
    sel = covered.copy()
    for _ in range(iterations):
        r = np.abs(q - L @ m.T)
        med = np.nanmedian(np.where(covered, r, np.nan), axis=0)
        med = np.nan_to_num(med, nan=0.0)
        tol = 1e-9 * (1.0 + np.abs(q).max(initial=0.0))
        sel = covered & (r <= gate * med[None, :] + tol)
        m, ok = _batched_solve(sel.astype(float), L, q)
    return m, sel, ok


def estimate_pixel_normals(
    cluster: PhotoCluster,
    L: LightingBasis,
    head_mask: np.ndarray,
    segmentation: np.ndarray | None = None,
    gate: float = 2.0,
    gate_iterations: int = 1,
    min_fraction: float | None = 1.0 / 3.0,
) -> NormalField:
    """Per-pixel normals from the cluster photos given per-photo lighting.

    Each pixel uses its own photo subset: photos whose segmentation contains
    the pixel and whose residual passes the gate.  Pixels with fewer than
    ``min_fraction * n`` selected photos (or a rank-deficient subset) are
    invalid.  ``segmentation`` defaults to the photos' own masks.
    """
    n = len(cluster)
    if L.n != n:
        raise ValueError(f"lighting has {L.n} rows for {n} photos")
    shape = cluster.shape
    head_mask = np.asarray(head_mask, bool)
    seg = cluster.mask_stack() if segmentation is None else np.asarray(segmentation, bool)
    rows, cols = np.nonzero(head_mask)
    q = cluster.pixel_stack()[:, rows, cols]
    covered = seg[:, rows, cols]

    m, sel, ok = select_photos(L.coefficients, q, covered, gate, gate_iterations)
    count = sel.sum(0)
    valid = ok.copy()
    if min_fraction is not None:
        valid &= count >= min_fraction * n
    valid &= np.linalg.norm(m[:, 1:], axis=1) > 0

    raw4 = np.zeros(shape + (4,))
    vmask = np.zeros(shape, bool)
    raw4[rows, cols] = np.where(valid[:, None], m, 0.0)
    vmask[rows, cols] = valid
    field = NormalField.from_raw4(raw4, vmask)
    field.selected_count = np.zeros(shape, int)
    field.selected_count[rows, cols] = count
    return field


def photometric_stereo(
    cluster: PhotoCluster,
    region_mask: np.ndarray | None = None,
    head_mask: np.ndarray | None = None,
    gate: float = 2.0,
    gate_iterations: int = 1,
    min_fraction: float | None = 1.0 / 3.0,
    region_fraction: float = 0.25,
) -> tuple[LightingBasis, NormalField]:
    """Factor on the face region, then estimate normals over the whole head."""
    if len(cluster) < MIN_PHOTOS:
        raise TooFewPhotos(f"cluster {cluster.cluster_id}: {len(cluster)} photos, need at least {MIN_PHOTOS}")
    if head_mask is None:
        head_mask = cluster.average_valid
    if region_mask is None:
        region_mask = cluster.face_mask if cluster.face_mask is not None else default_face_region(head_mask, region_fraction)
    Q = build_intensity_matrix(cluster, region_mask)
    L, _ = factor_rank4(Q)
    field = estimate_pixel_normals(cluster, L, head_mask, gate=gate, gate_iterations=gate_iterations, min_fraction=min_fraction)
    return L, field
