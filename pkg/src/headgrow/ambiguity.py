"""Resolution of the 4x4 factorization ambiguity against reference normals.

``Q = L N = (L A^-1)(A N)`` for any invertible 4x4 ``A``.  We pick ``A`` by
ordinary least squares so that ``A @ raw4`` matches the reference field's
``raw4`` on the overlap; for geometry-only references that is
``[1, nx, ny, nz]`` (albedo 1, ambient component 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientOverlap, RankDeficientNormals, SingularTransform
from .fields import NormalField

MIN_OVERLAP = 100
MAX_CONDITION = 1e8


@dataclass(frozen=True)
class AmbiguityTransform:
    A: np.ndarray

    @property
    def condition(self) -> float:
        return float(np.linalg.cond(self.A))

    def inverse(self) -> "AmbiguityTransform":
        return AmbiguityTransform(np.linalg.inv(self.A))


def solve_linear_ambiguity(
    estimated: NormalField,
    reference: NormalField,
    overlap: np.ndarray | None = None,
    min_pixels: int = MIN_OVERLAP,
    dims: int = 4,
) -> AmbiguityTransform:
    """Closed-form ``argmin_A sum ||ref_raw4 - A est_raw4||^2`` over the overlap.

    With ``dims=3`` only the normal block is fitted (3x3 on the last three
    components against unit reference normals); the ambient row and column
    stay those of the identity.
    """
    if dims not in (3, 4):
        raise ValueError(f"dims must be 3 or 4, got {dims}")
    mask = estimated.valid & reference.valid
    if overlap is not None:
        mask &= np.asarray(overlap, bool)
    k = int(mask.sum())
    if k < min_pixels:
        raise InsufficientOverlap(f"{k} overlapping pixels, need at least {min_pixels}")
    X = estimated.raw4[mask]
    Y = reference.raw4[mask]
    if dims == 3:
        X, Y = X[:, 1:], reference.normals[mask]
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise RankDeficientNormals(f"estimated raw normals do not span rank {dims} on the overlap")
    At, *_ = np.linalg.lstsq(X, Y, rcond=None)
    A = np.eye(4)
    A[4 - dims :, 4 - dims :] = At.T
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond >= MAX_CONDITION:
        raise SingularTransform(f"ambiguity transform is ill-conditioned (cond={cond:.3g})")
    return AmbiguityTransform(A)


def apply_ambiguity(transform: AmbiguityTransform | np.ndarray, field: NormalField) -> NormalField:
    """``raw4 <- A raw4`` on valid pixels, then renormalise; validity is unchanged."""
    A = transform.A if isinstance(transform, AmbiguityTransform) else np.asarray(transform, float)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond >= MAX_CONDITION:
        raise SingularTransform(f"cannot apply ill-conditioned transform (cond={cond:.3g})")
    raw4 = np.where(field.valid[..., None], field.raw4 @ A.T, 0.0)
    out = NormalField.from_raw4(raw4, field.valid)
    out.selected_count = field.selected_count
    return out


def mean_angle(a: NormalField, b: NormalField, mask: np.ndarray | None = None) -> float:
    """Mean angle in degrees between the normals of two fields on mutual validity."""
    m = a.valid & b.valid
    if mask is not None:
        m &= mask
    dots = np.clip((a.normals[m] * b.normals[m]).sum(-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(dots)).mean())
