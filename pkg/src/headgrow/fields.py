"""Per-pixel field types shared by the photometric, integration and grow stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose


@dataclass
class NormalField:
    """Unit normals, albedo and validity over an image grid.

    ``raw4`` keeps the unnormalised 4-vector ``[ambient, x, y, z]`` from the
    factorization (scaled by albedo); ambiguity solving works on it.
    """

    normals: np.ndarray  # (H, W, 3)
    albedo: np.ndarray  # (H, W)
    valid: np.ndarray  # (H, W) bool
    raw4: np.ndarray  # (H, W, 4)
    selected_count: np.ndarray | None = None  # photos used per pixel, when estimated

    @property
    def shape(self):
        return self.valid.shape

    @classmethod
    def from_normals(cls, normals: np.ndarray, valid: np.ndarray | None = None) -> "NormalField":
        """Geometry-only field: albedo 1, ambient component 1."""
        n = np.asarray(normals, float).copy()
        if valid is None:
            valid = np.isfinite(n).all(-1) & (np.linalg.norm(np.nan_to_num(n), axis=-1) > 0)
        valid = np.asarray(valid, bool)
        n[~valid] = 0.0
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        n = np.where(valid[..., None], n / np.maximum(norm, 1e-300), 0.0)
        raw4 = np.zeros(valid.shape + (4,))
        raw4[..., 0] = valid
        raw4[..., 1:] = n
        return cls(n, valid.astype(float), valid, raw4)

    @classmethod
    def from_raw4(cls, raw4: np.ndarray, valid: np.ndarray) -> "NormalField":
        raw4 = np.where(valid[..., None], np.asarray(raw4, float), 0.0)
        albedo = np.linalg.norm(raw4[..., 1:], axis=-1)
        good = valid & (albedo > 0)
        normals = np.where(good[..., None], raw4[..., 1:] / np.maximum(albedo, 1e-300)[..., None], 0.0)
        return cls(normals, np.where(valid, albedo, 0.0), valid.copy(), raw4)

    def copy(self) -> "NormalField":
        return NormalField(self.normals.copy(), self.albedo.copy(), self.valid.copy(), self.raw4.copy())

    def to_image(self) -> np.ndarray:
        """Normals with NaN on invalid pixels (for the float image format)."""
        return np.where(self.valid[..., None], self.normals, np.nan)


@dataclass
class DepthMap:
    depth: np.ndarray  # (H, W)
    valid: np.ndarray  # (H, W) bool
    pose: Pose = field(default_factory=Pose)

    @property
    def shape(self):
        return self.valid.shape

    def to_image(self) -> np.ndarray:
        return np.where(self.valid, self.depth, np.nan)

    @classmethod
    def from_image(cls, img: np.ndarray, pose: Pose | None = None) -> "DepthMap":
        valid = np.isfinite(img)
        return cls(np.where(valid, img, 0.0), valid, pose or Pose())
