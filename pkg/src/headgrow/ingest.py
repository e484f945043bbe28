"""Photo collections: manifests, azimuth clustering and fiducial alignment."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateFiducials,
    EmptyCluster,
    ManifestParseError,
    MissingFrontalCluster,
    MissingImage,
)
from .fields import NormalField
from .geometry import Similarity2D, fit_similarity_2d, is_degenerate_layout
from .imageio import read_float_image, read_gray, read_mask
from .parallel import pmap

logger = logging.getLogger(__name__)

CLUSTER_IDS = (-90, -60, -30, 0, 30, 60, 90)
N_FIDUCIALS = 7
# eye corners (left eye outer/inner, right eye inner/outer), nose tip, mouth corners
FIDUCIAL_NAMES = (
    "left_eye_outer",
    "left_eye_inner",
    "right_eye_inner",
    "right_eye_outer",
    "nose_tip",
    "mouth_left",
    "mouth_right",
)
COVERAGE_THRESHOLD = 0.25


@dataclass
class Photo:
    pixels: np.ndarray  # (H, W) float, 0..255
    mask: np.ndarray  # (H, W) bool
    fiducials: np.ndarray  # (7, 2) as (col, row)
    azimuth: float
    id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.fiducials = np.asarray(self.fiducials, dtype=float)

    @property
    def shape(self):
        return self.pixels.shape

    def validate(self) -> None:
        if self.pixels.shape != self.mask.shape:
            raise ValueError(f"photo {self.id}: pixels {self.pixels.shape} vs mask {self.mask.shape}")
        if self.fiducials.shape != (N_FIDUCIALS, 2):
            raise ValueError(f"photo {self.id}: expected 7 fiducials, got {self.fiducials.shape}")
        h, w = self.pixels.shape
        f = self.fiducials
        if np.any(f[:, 0] < 0) or np.any(f[:, 0] > w - 1) or np.any(f[:, 1] < 0) or np.any(f[:, 1] > h - 1):
            raise ValueError(f"photo {self.id}: fiducial outside image bounds")
        if not -180.0 <= self.azimuth < 180.0:
            raise ValueError(f"photo {self.id}: azimuth {self.azimuth} outside [-180, 180)")


@dataclass
class PhotoCluster:
    cluster_id: int
    photos: list
    reference_fiducials: np.ndarray
    average_image: np.ndarray = None
    average_valid: np.ndarray = None
    face_mask: np.ndarray | None = None

    def __post_init__(self):
        self.reference_fiducials = np.asarray(self.reference_fiducials, float)
        if self.average_image is None and self.photos:
            self.average_image, self.average_valid = cluster_average(self)

    def __len__(self):
        return len(self.photos)

    @property
    def shape(self):
        return self.photos[0].shape

    def pixel_stack(self) -> np.ndarray:
        return np.stack([p.pixels for p in self.photos])

    def mask_stack(self) -> np.ndarray:
        return np.stack([p.mask for p in self.photos])

    def subset(self, indices) -> "PhotoCluster":
        photos = [self.photos[i] for i in indices]
        return PhotoCluster(self.cluster_id, photos, self.reference_fiducials, face_mask=self.face_mask)


@dataclass
class ClusterSet:
    clusters: dict
    template_normals: NormalField | None = None
    manifest_path: Path | None = None
    scene: dict | None = None

    @property
    def counts(self) -> dict:
        return {cid: len(c) for cid, c in sorted(self.clusters.items())}

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def photos(self) -> list:
        return [p for cid in sorted(self.clusters) for p in self.clusters[cid].photos]


def assign_cluster(azimuth: float) -> int:
    """Nearest bin among {0, +-30, +-60, +-90}; ties go to the smaller |bin|."""
    if not -180.0 <= azimuth < 180.0:
        raise ValueError(f"azimuth {azimuth} outside [-180, 180)")
    best = None
    for b in sorted(CLUSTER_IDS, key=abs):
        d = abs(azimuth - b)
        if best is None or d < best[0]:
            best = (d, b)
    return best[1]


def estimate_alignment(photo: Photo, reference_fiducials) -> Similarity2D:
    return fit_similarity_2d(photo.fiducials, reference_fiducials)


def rigid_align(photo: Photo, reference_fiducials, return_transform: bool = False):
    """Warp ``photo`` by the least-squares similarity taking its fiducials to the reference.

    Out-of-frame pixels come back masked out.
    """
    ref = np.asarray(reference_fiducials, float)
    if is_degenerate_layout(ref):
        raise DegenerateFiducials("reference fiducial layout is degenerate")
    tf = estimate_alignment(photo, ref)
    if np.allclose(tf.as_affine(), np.eye(3), rtol=0, atol=1e-12):
        out = replace(photo, pixels=photo.pixels.copy(), mask=photo.mask.copy(), fiducials=photo.fiducials.copy())
        return (out, tf) if return_transform else out

    inv = tf.inverse()
    # affine_transform maps output (row, col) to input (row, col)
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    matrix = swap @ inv.matrix @ swap
    offset = swap @ inv.translation
    # source position of every output pixel; a small tolerance keeps round-off
    # from pushing edge pixels out of frame
    h, w = photo.shape
    rr, cc = np.mgrid[:h, :w].astype(float)
    src = np.tensordot(matrix, np.stack([rr, cc]), axes=1) + offset[:, None, None]
    eps = 1e-6
    inside = (src[0] >= -eps) & (src[0] <= h - 1 + eps) & (src[1] >= -eps) & (src[1] <= w - 1 + eps)
    pixels = ndimage.affine_transform(photo.pixels, matrix, offset, order=1, mode="nearest")
    mask = ndimage.affine_transform(photo.mask.astype(float), matrix, offset, order=0, mode="nearest")
    pixels = np.where(inside, pixels, 0.0)
    out = replace(photo, pixels=pixels, mask=(mask > 0.5) & inside, fiducials=tf.apply(photo.fiducials))
    return (out, tf) if return_transform else out


def cluster_average(cluster: PhotoCluster) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel mean over photos where the pixel is unmasked.

    Returns ``(average, valid)``; pixels unmasked in fewer than 25% of the
    photos are invalid.
    """
    if not cluster.photos:
        raise EmptyCluster(f"cluster {cluster.cluster_id} has no photos")
    total = np.zeros(cluster.photos[0].shape)
    count = np.zeros(cluster.photos[0].shape)
    for p in cluster.photos:
        total += np.where(p.mask, p.pixels, 0.0)
        count += p.mask
    avg = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    valid = count >= COVERAGE_THRESHOLD * len(cluster.photos)
    return avg, valid & (count > 0)


# --- manifests ----------------------------------------------------------


def _parse_manifest(path: Path) -> dict:
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ManifestParseError(f"{path}: {err}") from err
    if not isinstance(doc, dict) or not isinstance(doc.get("photos", None), list):
        raise ManifestParseError(f"{path}: expected an object with a 'photos' list")
    for k, entry in enumerate(doc["photos"]):
        if not isinstance(entry, dict) or "file" not in entry or "azimuth" not in entry or "fiducials" not in entry:
            raise ManifestParseError(f"{path}: photo #{k} needs file, azimuth and fiducials")
        fid = np.asarray(entry["fiducials"], dtype=float)
        if fid.shape != (N_FIDUCIALS, 2):
            raise ManifestParseError(f"{path}: photo #{k} must list 7 [x, y] fiducials")
    return doc


def _load_photo(base: Path, entry: dict, k: int) -> Photo:
    img_path = base / entry["file"]
    if not img_path.exists():
        raise MissingImage(str(img_path))
    pixels = read_gray(img_path)
    if entry.get("mask"):
        mpath = base / entry["mask"]
        if not mpath.exists():
            raise MissingImage(str(mpath))
        mask = read_mask(mpath)
    else:
        mask = np.ones(pixels.shape, bool)
    photo = Photo(
        pixels=pixels,
        mask=mask,
        fiducials=entry["fiducials"],
        azimuth=float(entry["azimuth"]),
        id=str(entry.get("id", f"{k:05d}")),
        meta={key: v for key, v in entry.items() if key not in ("fiducials",)},
    )
    try:
        photo.validate()
    except ValueError as err:
        raise ManifestParseError(str(err)) from err
    return photo


def load_collection(manifest_path, workers: int | None = None, freeze_references: bool = True) -> ClusterSet:
    """Load, cluster, align and average a photo collection described by a JSON manifest.

    Reference fiducials missing from the manifest are computed as the
    per-cluster mean of the raw fiducials and, with ``freeze_references``,
    written back into the manifest so later loads reuse the same layout.
    """
    path = Path(manifest_path)
    doc = _parse_manifest(path)
    base = path.parent
    entries = doc["photos"]

    ids = [str(e.get("id", f"{k:05d}")) for k, e in enumerate(entries)]
    if len(set(ids)) != len(ids):
        raise ManifestParseError(f"{path}: duplicate photo ids")

    photos = pmap(lambda ke: _load_photo(base, ke[1], ke[0]), list(enumerate(entries)), workers)
    by_cluster: dict[int, list] = {}
    for p in photos:
        by_cluster.setdefault(assign_cluster(p.azimuth), []).append(p)
    if 0 not in by_cluster:
        raise MissingFrontalCluster(f"{path}: no photos in the frontal (0 degree) cluster")

    shapes = {p.shape for p in photos}
    if len(shapes) != 1:
        raise ManifestParseError(f"{path}: photos have differing sizes {sorted(shapes)}")

    cluster_meta = doc.get("clusters", {}) or {}
    changed = False
    clusters = {}
    for cid in sorted(by_cluster):
        members = by_cluster[cid]
        meta = cluster_meta.setdefault(str(cid), {})
        if "reference_fiducials" not in meta:
            meta["reference_fiducials"] = np.mean([p.fiducials for p in members], axis=0).tolist()
            changed = True
        ref = np.asarray(meta["reference_fiducials"], float)
        aligned = pmap(lambda p: rigid_align(p, ref), members, workers)
        face_mask = None
        if meta.get("face_mask"):
            fm = base / meta["face_mask"]
            if not fm.exists():
                raise MissingImage(str(fm))
            face_mask = read_mask(fm)
        clusters[cid] = PhotoCluster(cid, aligned, ref, face_mask=face_mask)

    if changed and freeze_references:
        doc["clusters"] = cluster_meta
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        logger.info("froze reference fiducials into %s", path)

    template = None
    if doc.get("template_normals_file"):
        tpath = base / doc["template_normals_file"]
        if not tpath.exists():
            raise MissingImage(str(tpath))
        template = NormalField.from_normals(read_float_image(tpath))

    scene = None
    if doc.get("scene"):
        spath = base / doc["scene"]
        if spath.exists():
            scene = json.loads(spath.read_text())

    logger.info("loaded %d photos: %s", len(photos), {c: len(v) for c, v in sorted(by_cluster.items())})
    return ClusterSet(clusters, template, path, scene)
