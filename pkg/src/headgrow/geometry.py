"""Rigid/similarity transforms and the orthographic image convention.

Camera frames are right-handed: x to the right, y up, z toward the viewer.
A camera-frame point ``(x, y, z)`` lands on pixel column ``cx + x`` and row
``cy - y`` where ``(cx, cy)`` is the image centre; ``z`` is the depth value
stored in depth maps (larger is closer to the camera).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFiducials


def image_center(shape) -> tuple[float, float]:
    """Return ``(cx, cy)`` for an image of ``shape == (height, width)``."""
    h, w = shape[:2]
    return (w - 1) / 2.0, (h - 1) / 2.0


def rotation_y(degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Similarity transform ``p_cam = scale * R @ p + t`` from world to camera."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0
    nominal_only: bool = False

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.scale * points @ self.rotation.T + self.translation

    def apply_normals(self, normals: np.ndarray) -> np.ndarray:
        return np.asarray(normals, dtype=float) @ self.rotation.T

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return ((points - self.translation) / self.scale) @ self.rotation

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self o other`` (apply ``other`` first)."""
        return Pose(
            rotation=self.rotation @ other.rotation,
            translation=self.scale * self.rotation @ other.translation + self.translation,
            scale=self.scale * other.scale,
            nominal_only=self.nominal_only or other.nominal_only,
        )

    @property
    def azimuth(self) -> float:
        """Yaw angle in degrees, read off the rotation about the vertical axis."""
        return float(np.rad2deg(np.arctan2(self.rotation[0, 2], self.rotation[2, 2])))

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "scale": float(self.scale),
            "nominal_only": bool(self.nominal_only),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(
            rotation=np.asarray(d["rotation"], dtype=float),
            translation=np.asarray(d["translation"], dtype=float),
            scale=float(d["scale"]),
            nominal_only=bool(d.get("nominal_only", False)),
        )


def project(points_cam: np.ndarray, shape) -> np.ndarray:
    """Camera-frame points to ``(col, row, depth)`` image coordinates."""
    cx, cy = image_center(shape)
    p = np.asarray(points_cam, dtype=float)
    return np.stack([cx + p[..., 0], cy - p[..., 1], p[..., 2]], axis=-1)


def unproject(cols, rows, depth, shape) -> np.ndarray:
    """Inverse of :func:`project`."""
    cx, cy = image_center(shape)
    return np.stack(
        [np.asarray(cols, float) - cx, cy - np.asarray(rows, float), np.asarray(depth, float)],
        axis=-1,
    )


@dataclass(frozen=True)
class Similarity2D:
    """``q = scale * R(angle) @ p + t`` acting on 2D points."""

    scale: float = 1.0
    angle: float = 0.0  # radians
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @property
    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, float) @ self.matrix.T + self.translation

    def inverse(self) -> "Similarity2D":
        inv_scale = 1.0 / self.scale
        c, s = np.cos(-self.angle), np.sin(-self.angle)
        rot = np.array([[c, -s], [s, c]])
        return Similarity2D(inv_scale, -self.angle, -inv_scale * rot @ self.translation)

    def as_affine(self) -> np.ndarray:
        """3x3 homogeneous matrix."""
        m = np.eye(3)
        m[:2, :2] = self.matrix
        m[:2, 2] = self.translation
        return m


def fit_similarity_2d(src: np.ndarray, dst: np.ndarray, rel_tol: float = 1e-9) -> Similarity2D:
    """Least-squares similarity mapping ``src`` onto ``dst`` (Umeyama).

    Raises :class:`DegenerateFiducials` when ``src`` is collinear or coincident,
    in which case rotation and scale are not determined.
    """
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2 or len(src) < 2:
        raise DegenerateFiducials(f"need matching (k, 2) point sets, got {src.shape} and {dst.shape}")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    sv = np.linalg.svd(a, compute_uv=False)
    extent = max(np.abs(src).max(), 1.0)
    if sv[-1] <= rel_tol * max(sv[0], extent):
        raise DegenerateFiducials("source points are collinear or coincident")
    cov = b.T @ a / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[-1] = -1.0
    rot = u @ np.diag(sign) @ vt
    var_s = (a**2).sum() / len(src)
    scale = float((d * sign).sum() / var_s)
    angle = float(np.arctan2(rot[1, 0], rot[0, 0]))
    t = mu_d - scale * rot @ mu_s
    return Similarity2D(scale, angle, t)


def is_degenerate_layout(points: np.ndarray, rel_tol: float = 1e-9) -> bool:
    p = np.asarray(points, float)
    sv = np.linalg.svd(p - p.mean(0), compute_uv=False)
    return bool(sv[-1] <= rel_tol * max(sv[0], np.abs(p).max(), 1.0))


def similarity_to_camera_pose(sim: Similarity2D, shape) -> Pose:
    """Camera-frame similarity whose projection equals ``sim`` in image space.

    Depth is scaled with the same factor so the result stays a 3D similarity.
    """
    cx, cy = image_center(shape)
    flip = np.diag([1.0, -1.0])
    rot = np.eye(3)
    rot[:2, :2] = flip @ sim.matrix @ flip / sim.scale
    shift = sim.apply(np.array([[cx, cy]]))[0] - np.array([cx, cy])
    return Pose(rot, np.array([shift[0], -shift[1], 0.0]), float(sim.scale))
