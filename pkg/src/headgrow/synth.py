"""Synthetic Lambertian scenes with exact ground truth.

A mesh is rotated about the vertical axis to each azimuth, projected
orthographically, z-buffered, and shaded as

    I = clamp(255 * albedo * (ambient + intensity * max(0, n . l)), 0, 255)

then quantized to 8 bits.  Geometry (depth, normals, coverage) is rendered
once per pose and reused for every light.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyProjection, IoError
from .fields import DepthMap, NormalField
from .geometry import Pose, fit_similarity_2d, project, rotation_y, similarity_to_camera_pose
from .imageio import write_float_image, write_gray, write_mask
from .ingest import CLUSTER_IDS, Photo
from .mesh import HeadMesh, read_mesh, write_ply
from .parallel import pmap
from .raster import rasterize, shade_normals

logger = logging.getLogger(__name__)

GROW_POSE_ORDER = (0, 30, -30, 60, -60, 90, -90)
DEFAULT_AMBIENT = 0.2
DEFAULT_INTENSITY = 0.8
MIN_LIGHT_Z = 0.2


@dataclass(frozen=True)
class Light:
    direction: tuple  # unit 3-vector, camera frame
    intensity: float = DEFAULT_INTENSITY
    ambient: float = DEFAULT_AMBIENT

    def vector4(self) -> np.ndarray:
        """``[ambient, intensity * l]`` on the 0..255 scale (the shading 4-vector)."""
        d = np.asarray(self.direction, float)
        return 255.0 * np.concatenate([[self.ambient], self.intensity * d])

    def to_dict(self) -> dict:
        return {"direction": [float(x) for x in self.direction], "intensity": self.intensity, "ambient": self.ambient}


@dataclass
class SyntheticScene:
    mesh: HeadMesh
    lights: list
    poses: tuple = GROW_POSE_ORDER
    image_size: tuple = (128, 128)  # (width, height)
    albedo: float | np.ndarray = 0.8
    fiducial_vertices: np.ndarray | None = None
    pixels_per_unit: float | None = None
    fill: float = 0.85
    noise_sigma: float = 0.0
    seed: int = 0
    lights_per_pose: dict | None = None  # pose -> number of lights used (default: all)
    template_mesh: HeadMesh | None = None

    def __post_init__(self):
        for light in self.lights:
            if abs(np.linalg.norm(light.direction) - 1.0) > 1e-9:
                raise ValueError(f"light direction {light.direction} is not unit length")
        bad = [p for p in self.poses if p not in CLUSTER_IDS]
        if bad:
            raise ValueError(f"poses {bad} are not canonical azimuths {CLUSTER_IDS}")
        if self.fiducial_vertices is None:
            self.fiducial_vertices = self.mesh.fiducial_vertices
        lo, hi = self.mesh.bounding_box()
        self.center = (lo + hi) / 2.0
        if self.pixels_per_unit is None:
            radius = np.linalg.norm(self.mesh.vertices - self.center, axis=1).max()
            self.pixels_per_unit = self.fill * min(self.image_size) / (2.0 * radius)

    @property
    def shape(self) -> tuple:
        w, h = self.image_size
        return (h, w)

    def pose(self, azimuth: float, mesh_center=None) -> Pose:
        rot = rotation_y(azimuth)
        c = self.center if mesh_center is None else mesh_center
        s = self.pixels_per_unit
        return Pose(rot, -s * rot @ c, s)

    def n_lights(self, pose: int) -> int:
        if self.lights_per_pose and pose in self.lights_per_pose:
            return min(int(self.lights_per_pose[pose]), len(self.lights))
        return len(self.lights)


# --- meshes -------------------------------------------------------------


def _uv_surface(radius_fn, n_lat: int, n_lon: int) -> tuple[np.ndarray, np.ndarray, callable]:
    """Star-shaped closed surface ``r(lon, lat) * d(lon, lat)`` with outward winding."""
    lat = np.linspace(-np.pi / 2, np.pi / 2, n_lat + 1)[1:-1]
    lon = np.linspace(-np.pi, np.pi, n_lon, endpoint=False)
    LAT, LON = np.meshgrid(lat, lon, indexing="ij")

    def direction(lo, la):
        return np.stack([np.cos(la) * np.sin(lo), np.sin(la), np.cos(la) * np.cos(lo)], axis=-1)

    ring = direction(LON, LAT) * radius_fn(LON, LAT)[..., None]
    south = direction(np.array(0.0), np.array(-np.pi / 2)) * radius_fn(np.array(0.0), np.array(-np.pi / 2))
    north = direction(np.array(0.0), np.array(np.pi / 2)) * radius_fn(np.array(0.0), np.array(np.pi / 2))
    verts = np.vstack([ring.reshape(-1, 3), south[None], north[None]])
    n_ring = n_lat - 1
    idx = np.arange(n_ring * n_lon).reshape(n_ring, n_lon)
    s_id, n_id = n_ring * n_lon, n_ring * n_lon + 1
    faces = []
    for i in range(n_ring - 1):
        a, b = idx[i], np.roll(idx[i], -1)
        c, d = idx[i + 1], np.roll(idx[i + 1], -1)
        faces.append(np.stack([a, b, c], 1))
        faces.append(np.stack([b, d, c], 1))
    faces.append(np.stack([np.full(n_lon, s_id), np.roll(idx[0], -1), idx[0]], 1))
    faces.append(np.stack([np.full(n_lon, n_id), idx[-1], np.roll(idx[-1], -1)], 1))
    faces = np.concatenate(faces)
    # outward orientation: positive signed volume
    tri = verts[faces]
    vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum()
    if vol < 0:
        faces = faces[:, ::-1]
    return verts, faces, direction


def uv_sphere(radius: float = 1.0, n_lat: int = 64, n_lon: int = 128) -> HeadMesh:
    verts, faces, _ = _uv_surface(lambda lo, la: np.full(np.shape(lo), radius), n_lat, n_lon)
    return HeadMesh(verts, faces)


@dataclass(frozen=True)
class HeadParams:
    """Shape parameters of the procedural head (radial bumps on an ellipsoid)."""

    width: float = 0.78
    height: float = 1.0
    depth: float = 0.92
    nose: float = 0.13
    ears: float = 0.13
    chin: float = 0.05
    brow: float = 0.03
    eyes: float = -0.035
    cheeks: float = 0.02


# (lon, lat) of the seven fiducials: eye corners, nose tip, mouth corners
_FIDUCIAL_ANGLES = (
    (-0.48, 0.12),
    (-0.16, 0.12),
    (0.16, 0.12),
    (0.48, 0.12),
    (0.0, -0.12),
    (-0.24, -0.42),
    (0.24, -0.42),
)


def procedural_head(params: HeadParams = HeadParams(), n_lat: int = 90, n_lon: int = 180) -> HeadMesh:
    """Closed, star-shaped head-like mesh with a nose, ears, chin and eye sockets."""

    def bump(lo, la, lo0, la0, s_lo, s_la):
        dlo = np.angle(np.exp(1j * (lo - lo0)))
        return np.exp(-0.5 * ((dlo / s_lo) ** 2 + ((la - la0) / s_la) ** 2))

    def radius(lo, la):
        d = np.stack([np.cos(la) * np.sin(lo), np.sin(la), np.cos(la) * np.cos(lo)], axis=-1)
        base = 1.0 / np.sqrt((d[..., 0] / params.width) ** 2 + (d[..., 1] / params.height) ** 2 + (d[..., 2] / params.depth) ** 2)
        rel = (
            params.nose * bump(lo, la, 0.0, -0.05, 0.09, 0.17)
            + params.ears * (bump(lo, la, np.pi / 2, 0.0, 0.09, 0.2) + bump(lo, la, -np.pi / 2, 0.0, 0.09, 0.2))
            + params.chin * bump(lo, la, 0.0, -0.6, 0.35, 0.12)
            + params.brow * bump(lo, la, 0.0, 0.24, 0.5, 0.07)
            + params.eyes * (bump(lo, la, 0.32, 0.12, 0.1, 0.07) + bump(lo, la, -0.32, 0.12, 0.1, 0.07))
            + params.cheeks * (bump(lo, la, 0.6, -0.2, 0.2, 0.15) + bump(lo, la, -0.6, -0.2, 0.2, 0.15))
        )
        return base * (1.0 + rel)

    verts, faces, direction = _uv_surface(radius, n_lat, n_lon)
    fid = []
    for lo, la in _FIDUCIAL_ANGLES:
        target = direction(np.array(lo), np.array(la)) * radius(np.array(lo), np.array(la))
        fid.append(int(np.argmin(np.linalg.norm(verts - target, axis=1))))
    return HeadMesh(verts, faces, fiducial_vertices=np.array(fid))


# --- rendering ----------------------------------------------------------


def sample_lights(
    n: int,
    seed: int = 0,
    ambient: float = DEFAULT_AMBIENT,
    intensity: float = DEFAULT_INTENSITY,
    min_z: float = MIN_LIGHT_Z,
) -> list:
    """Directions uniform on the sphere cap ``z > min_z`` of the camera frame."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(min_z, 1.0, n)
    phi = rng.uniform(0.0, 2 * np.pi, n)
    r = np.sqrt(1.0 - z**2)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return [Light(tuple(float(x) for x in d), intensity, ambient) for d in dirs]


def shade(normals: np.ndarray, albedo: np.ndarray, light4: np.ndarray, covered: np.ndarray, quantize: bool = True) -> np.ndarray:
    """Lambertian shading with an attached-shadow clamp.

    ``light4 = [a, lx, ly, lz]`` on the 0..255 scale; intensity is
    ``albedo * (a + max(0, l . n))``, clipped to [0, 255].
    """
    light4 = np.asarray(light4, float)
    val = albedo * (light4[0] + np.maximum(0.0, normals @ light4[1:]))
    val = np.where(covered, np.clip(val, 0.0, 255.0), 0.0)
    return np.rint(val) if quantize else val


@dataclass
class PoseGeometry:
    pose: Pose
    covered: np.ndarray
    depth: np.ndarray
    normals: np.ndarray
    albedo: np.ndarray
    fiducials: np.ndarray | None = None


def render_mesh_geometry(mesh: HeadMesh, pose: Pose, shape, albedo=1.0) -> PoseGeometry:
    pts = pose.apply(mesh.vertices)
    gbuf = rasterize(pts, mesh.faces, shape)
    cov = gbuf.covered
    if not cov.any():
        raise EmptyProjection("no triangle covers any pixel")
    normals = shade_normals(gbuf, pts, mesh.faces)
    if np.ndim(albedo) == 0:
        alb = np.where(cov, float(albedo), 0.0)
    else:
        va = np.asarray(albedo, float)
        alb = np.zeros(shape[:2])
        fid = gbuf.face[cov]
        alb[cov] = (gbuf.bary[cov] * va[mesh.faces[fid]]).sum(1)
    depth = np.where(cov, gbuf.depth, np.nan)
    fiducials = None
    if mesh.fiducial_vertices is not None:
        fiducials = project(pts[mesh.fiducial_vertices], shape)[:, :2]
    return PoseGeometry(pose, cov, depth, normals, alb, fiducials)


def render_geometry(scene: SyntheticScene, azimuth: float) -> PoseGeometry:
    mesh = scene.mesh
    if scene.fiducial_vertices is not None and mesh.fiducial_vertices is None:
        mesh = HeadMesh(mesh.vertices, mesh.faces, mesh.provenance, scene.fiducial_vertices)
    return render_mesh_geometry(mesh, scene.pose(azimuth), scene.shape, scene.albedo)


def _noise(scene: SyntheticScene, pose: int, light_index: int, shape) -> np.ndarray:
    if scene.noise_sigma <= 0:
        return 0.0
    rng = np.random.default_rng([scene.seed, pose + 180, light_index])
    return rng.normal(0.0, scene.noise_sigma, shape)


def photo_from_geometry(scene: SyntheticScene, geo: PoseGeometry, azimuth: int, light_index: int) -> Photo:
    light = scene.lights[light_index]
    val = shade(geo.normals, geo.albedo, light.vector4(), geo.covered, quantize=False)
    val = np.where(geo.covered, np.clip(np.rint(val + _noise(scene, azimuth, light_index, val.shape)), 0, 255), 0.0)
    return Photo(
        pixels=val,
        mask=geo.covered.copy(),
        fiducials=geo.fiducials if geo.fiducials is not None else np.zeros((7, 2)),
        azimuth=float(azimuth),
        id=f"p{azimuth:+04d}_l{light_index:03d}",
        meta={"light": light_index},
    )


def render_lambertian(scene: SyntheticScene, pose: int, light_index: int):
    """Render one photo plus its ground-truth normal field and depth map."""
    geo = render_geometry(scene, pose)
    photo = photo_from_geometry(scene, geo, pose, light_index)
    gt_normals = NormalField.from_normals(geo.normals, geo.covered)
    gt_depth = DepthMap(np.where(geo.covered, geo.depth, 0.0), geo.covered.copy(), geo.pose)
    return photo, gt_normals, gt_depth


def render_template_normals(scene: SyntheticScene) -> NormalField:
    """Frontal normals of ``scene.template_mesh``, aligned to the subject by fiducials."""
    tmpl = scene.template_mesh
    subject = render_geometry(scene, 0)
    # same image fill as the subject, then refined by fiducials when both meshes have them
    center = (tmpl.vertices.min(0) + tmpl.vertices.max(0)) / 2
    radius = np.linalg.norm(tmpl.vertices - center, axis=1).max()
    s = scene.fill * min(scene.image_size) / (2.0 * radius)
    base = Pose(np.eye(3), -s * center, s)
    geo = render_mesh_geometry(tmpl, base, scene.shape)
    if geo.fiducials is not None and subject.fiducials is not None:
        sim = fit_similarity_2d(geo.fiducials, subject.fiducials)
        geo = render_mesh_geometry(tmpl, similarity_to_camera_pose(sim, scene.shape).compose(base), scene.shape)
    return NormalField.from_normals(geo.normals, geo.covered)


def make_scene(
    mesh: HeadMesh | None = None,
    n_lights: int = 100,
    poses=GROW_POSE_ORDER,
    image_size=(128, 128),
    seed: int = 0,
    ambient: float = DEFAULT_AMBIENT,
    intensity: float = DEFAULT_INTENSITY,
    albedo: float = 0.8,
    noise_sigma: float = 0.0,
    lights_per_pose: dict | None = None,
    template_mesh: HeadMesh | None = None,
) -> SyntheticScene:
    """Convenience constructor; the default mesh is the procedural head."""
    if mesh is None:
        mesh = procedural_head()
        if template_mesh is None:
            template_mesh = procedural_head(TEMPLATE_PARAMS)
    if lights_per_pose:
        n_lights = max(n_lights, max(lights_per_pose.values()))
    return SyntheticScene(
        mesh=mesh,
        lights=sample_lights(n_lights, seed, ambient, intensity),
        poses=tuple(poses),
        image_size=tuple(image_size),
        albedo=albedo,
        noise_sigma=noise_sigma,
        seed=seed,
        lights_per_pose=lights_per_pose,
        template_mesh=template_mesh,
    )


# a different individual: narrower head, smaller nose, larger ears
TEMPLATE_PARAMS = HeadParams(width=0.75, height=1.02, depth=0.9, nose=0.11, ears=0.15, chin=0.06, brow=0.035)


def make_dataset(scene: SyntheticScene, out_dir, workers: int | None = None) -> Path:
    """Write one photo per (pose, light) pair, ground truth, and an ingest manifest."""
    try:
        return _write_dataset(scene, Path(out_dir), workers)
    except OSError as err:
        raise IoError(f"cannot write dataset to {out_dir}: {err}") from err


def _write_dataset(scene: SyntheticScene, out: Path, workers: int | None) -> Path:
    for sub in ("images", "masks", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    entries = []
    clusters = {}
    for az in scene.poses:
        geo = render_geometry(scene, az)
        tag = f"p{az:+04d}"
        write_mask(out / "masks" / f"{tag}.png", geo.covered)
        write_float_image(out / "gt" / f"normals_{tag}.hgf", np.where(geo.covered[..., None], geo.normals, np.nan))
        write_float_image(out / "gt" / f"depth_{tag}.hgf", geo.depth)
        n = scene.n_lights(az)

        def write_one(k, geo=geo, az=az, tag=tag):
            photo = photo_from_geometry(scene, geo, az, k)
            write_gray(out / "images" / f"{tag}_l{k:03d}.png", photo.pixels)
            return photo

        pmap(write_one, range(n), workers)
        fid = np.round(geo.fiducials, 6).tolist()
        clusters[str(az)] = {"reference_fiducials": fid}
        for k in range(n):
            entries.append(
                {
                    "id": f"{tag}_l{k:03d}",
                    "file": f"images/{tag}_l{k:03d}.png",
                    "mask": f"masks/{tag}.png",
                    "azimuth": float(az),
                    "fiducials": fid,
                    "light": k,
                    "gt_normals": f"gt/normals_{tag}.hgf",
                    "gt_depth": f"gt/depth_{tag}.hgf",
                }
            )

    mesh = scene.mesh
    if scene.fiducial_vertices is not None:
        mesh = HeadMesh(mesh.vertices, mesh.faces, mesh.provenance, scene.fiducial_vertices)
    write_ply(mesh, out / "mesh_gt.ply")
    scene_doc = {
        "image_size": list(scene.image_size),
        "pixels_per_unit": float(scene.pixels_per_unit),
        "center": [float(x) for x in scene.center],
        "albedo": float(scene.albedo) if np.ndim(scene.albedo) == 0 else "vertex",
        "lights": [light.to_dict() for light in scene.lights],
        "poses": list(scene.poses),
        "fiducial_vertices": None if scene.fiducial_vertices is None else [int(i) for i in scene.fiducial_vertices],
        "mesh": "mesh_gt.ply",
        "noise_sigma": scene.noise_sigma,
        "seed": scene.seed,
    }
    if np.ndim(scene.albedo) != 0:
        np.savetxt(out / "albedo.txt", np.asarray(scene.albedo, float))
    (out / "scene.json").write_text(json.dumps(scene_doc, indent=1, sort_keys=True) + "\n")

    manifest = {"version": 1, "photos": entries, "clusters": clusters, "scene": "scene.json"}
    if scene.template_mesh is not None:
        write_float_image(out / "template_normals.hgf", render_template_normals(scene).to_image())
        manifest["template_normals_file"] = "template_normals.hgf"
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    logger.info("wrote %d photos to %s", len(entries), out)
    return path


def load_scene(dataset_dir) -> tuple[SyntheticScene, dict]:
    """Rebuild the scene (mesh, lights, camera) recorded by :func:`make_dataset`."""
    base = Path(dataset_dir)
    doc = json.loads((base / "scene.json").read_text())
    mesh = read_mesh(base / doc["mesh"])
    if doc.get("fiducial_vertices") is not None:
        mesh.fiducial_vertices = np.asarray(doc["fiducial_vertices"], np.int64)
    albedo = doc["albedo"]
    if albedo == "vertex":
        albedo = np.loadtxt(base / "albedo.txt")
    lights = [Light(tuple(d["direction"]), d["intensity"], d["ambient"]) for d in doc["lights"]]
    scene = SyntheticScene(
        mesh=mesh,
        lights=lights,
        poses=tuple(doc["poses"]),
        image_size=tuple(doc["image_size"]),
        albedo=albedo,
        pixels_per_unit=doc["pixels_per_unit"],
        noise_sigma=doc.get("noise_sigma", 0.0),
        seed=doc.get("seed", 0),
    )
    scene.center = np.asarray(doc["center"], float)
    return scene, doc
