"""Scoring: angular error, depth RMSE up to scale/offset, reprojection error,
per-view coverage, seam continuity and the photo-count ablation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DegenerateFit, HeadgrowError, NoValidOverlap
from .fields import DepthMap, NormalField
from .geometry import Pose, project
from .grow import sample_depth
from .ingest import ClusterSet, Photo, PhotoCluster, assign_cluster
from .mesh import HeadMesh
from .parallel import pmap
from .raster import GBuffer, rasterize, shade_normals

logger = logging.getLogger(__name__)

ABLATION_FRACTIONS = (1.0, 0.5, 0.25, 0.125, 0.0625)


def normal_angular_error(est: NormalField, gt: NormalField, mask: np.ndarray | None = None) -> tuple[float, float]:
    """Median and mean angle (degrees) between two normal fields on mutual validity."""
    m = est.valid & gt.valid
    if mask is not None:
        m &= mask
    if not m.any():
        raise NoValidOverlap("no mutually valid pixels")
    dots = np.clip((est.normals[m] * gt.normals[m]).sum(-1), -1.0, 1.0)
    ang = np.degrees(np.arccos(dots))
    return float(np.median(ang)), float(ang.mean())


def fit_scale_offset(est: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Closed-form ``argmin_{s,c} sum (s est + c - gt)^2``."""
    est = np.asarray(est, float)
    gt = np.asarray(gt, float)
    if len(est) < 2:
        raise NoValidOverlap(f"{len(est)} mutually valid pixels, need at least 2")
    de = est - est.mean()
    var = float(de @ de)
    if var <= 1e-24 * max(1.0, float(est @ est)):
        raise DegenerateFit("estimated depth is constant")
    s = float(de @ (gt - gt.mean())) / var
    return s, float(gt.mean() - s * est.mean())


def depth_rmse(est: DepthMap, gt: DepthMap, mask: np.ndarray | None = None) -> float:
    """RMSE of ``s * est + c - gt`` after the best scale and offset."""
    m = est.valid & gt.valid
    if mask is not None:
        m &= mask
    e, g = est.depth[m], gt.depth[m]
    s, c = fit_scale_offset(e, g)
    return float(np.sqrt(np.mean((s * e + c - g) ** 2)))


# --- rendering helpers ---------------------------------------------------


@dataclass
class ViewRender:
    gbuf: GBuffer
    normals: np.ndarray  # (H, W, 3)

    @property
    def covered(self) -> np.ndarray:
        return self.gbuf.covered


def render_view(mesh: HeadMesh, pose: Pose, shape) -> ViewRender:
    pts = pose.apply(mesh.vertices)
    gbuf = rasterize(pts, mesh.faces, shape)
    return ViewRender(gbuf, shade_normals(gbuf, pts, mesh.faces))


def lambertian(normals, albedo, light4, quantize: bool = True) -> np.ndarray:
    """``albedo * (l0 + max(0, l . n))`` on the 0-255 scale."""
    light4 = np.asarray(light4, float)
    val = albedo * (light4[0] + np.maximum(0.0, normals @ light4[1:]))
    if quantize:
        val = np.clip(np.rint(val), 0, 255)
    return val


def fit_lighting(intensity: np.ndarray, normals: np.ndarray, albedo: np.ndarray, iterations: int = 5) -> np.ndarray:
    """Least-squares lighting 4-vector for ``I = albedo * (l0 + max(0, l . n))``.

    Starts from the unclipped linear model, then alternates between the
    attached-shadow partition and a linear refit.  Saturated pixels are skipped.
    """
    use = intensity < 255
    if use.sum() < 4:
        use = np.ones(len(intensity), bool)
    I, n, a = intensity[use], normals[use], albedo[use]
    design = a[:, None] * np.column_stack([np.ones(len(n)), n])
    light, *_ = np.linalg.lstsq(design, I, rcond=None)
    for _ in range(iterations):
        lit = n @ light[1:] > 0
        design = a[:, None] * np.column_stack([np.ones(len(n)), n * lit[:, None]])
        new, *_ = np.linalg.lstsq(design, I, rcond=None)
        if np.allclose(new, light, rtol=0, atol=1e-9):
            light = new
            break
        light = new
    return light


def _albedo_map(albedo, cluster_id: int, shape) -> np.ndarray:
    if isinstance(albedo, dict):
        a = np.asarray(albedo[cluster_id], float)
    else:
        a = np.asarray(albedo, float)
    return np.broadcast_to(a, shape)


def reprojection_error(
    mesh: HeadMesh,
    albedo,
    photos: list,
    poses: dict,
    lighting: dict | None = None,
    workers: int | None = None,
    return_per_photo: bool = False,
):
    """Mean and standard deviation over photos of the per-photo RMS intensity error.

    ``albedo`` is a scalar, an ``(H, W)`` map, or a dict from cluster id to a
    map in that cluster's image frame (NaN or <= 0 marks unknown albedo).
    ``poses`` maps cluster id to the world-to-camera pose.  ``lighting`` maps
    photo id to a known lighting 4-vector; other photos get a least-squares fit.
    """
    if not photos:
        raise NoValidOverlap("no photos to score")
    shape = photos[0].shape
    cids = sorted({assign_cluster(p.azimuth) for p in photos})
    renders = {cid: render_view(mesh, poses[cid], shape) for cid in cids if cid in poses}

    def score(photo: Photo):
        cid = assign_cluster(photo.azimuth)
        if cid not in renders:
            return None
        rv = renders[cid]
        a = _albedo_map(albedo, cid, shape)
        m = rv.covered & photo.mask & np.isfinite(a) & (a > 0)
        if m.sum() < 4:
            return None
        n, aa, I = rv.normals[m], a[m], photo.pixels[m]
        light = lighting.get(photo.id) if lighting else None
        if light is None:
            light = fit_lighting(I, n, aa)
        pred = lambertian(n, aa, light)
        return photo.id, cid, float(np.sqrt(np.mean((pred - I) ** 2))), int(m.sum())

    rows = [r for r in pmap(score, photos, workers) if r is not None]
    if not rows:
        raise NoValidOverlap("no photo overlaps the rendered mesh")
    errs = np.array([r[2] for r in rows])
    mean, std = float(errs.mean()), float(errs.std())
    if return_per_photo:
        return mean, std, rows
    return mean, std


def coverage_per_view(mesh: HeadMesh, poses: dict, gt_masks: dict) -> tuple[dict, float]:
    """Fraction of each view's ground-truth silhouette covered by the rendered mesh.

    Returns per-view fractions and the pixel-weighted aggregate.
    """
    per, inter, total = {}, 0, 0
    for cid in sorted(gt_masks):
        gt = np.asarray(gt_masks[cid], bool)
        if cid in poses:
            cov = render_view(mesh, poses[cid], gt.shape).covered
        else:
            cov = np.zeros_like(gt)
        k = int((cov & gt).sum())
        per[cid] = k / max(int(gt.sum()), 1)
        inter += k
        total += int(gt.sum())
    if total == 0:
        raise NoValidOverlap("ground-truth masks are empty")
    return per, inter / total


def seam_discontinuity(mesh: HeadMesh, poses: dict, depths: dict, order=None) -> dict:
    """Mean depth gap across seam edges of the merged mesh, per newer cluster.

    For every mesh edge that joins vertices of different provenance, the
    vertex from the earlier cluster (in ``order``, default the order of
    ``depths``) is projected into the later cluster's view and compared with
    that cluster's depth map, sampled bilinearly at the projected position.
    """
    order = list(depths) if order is None else list(order)
    rank = np.full(int(np.abs(mesh.provenance).max(initial=0)) * 2 + 1, -1)
    offset = len(rank) // 2
    for i, cid in enumerate(order):
        rank[cid + offset] = i
    faces = mesh.faces
    prov = mesh.provenance
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    ra, rb = rank[prov[edges[:, 0]] + offset], rank[prov[edges[:, 1]] + offset]
    cross = (ra != rb) & (ra >= 0) & (rb >= 0)
    edges, ra, rb = edges[cross], ra[cross], rb[cross]
    newer = np.where(ra > rb, edges[:, 0], edges[:, 1])
    older = np.where(ra > rb, edges[:, 1], edges[:, 0])
    out = {}
    for cid in order:
        if cid == 0 or cid not in depths:
            continue
        sel = prov[newer] == cid
        if not sel.any():
            continue
        dm = depths[cid]
        uvz = project(poses[cid].apply(mesh.vertices[older[sel]]), dm.shape)
        h, w = dm.shape
        inb = (uvz[:, 0] >= 0) & (uvz[:, 0] <= w - 1) & (uvz[:, 1] >= 0) & (uvz[:, 1] <= h - 1)
        if not inb.any():
            continue
        zs, ok = sample_depth(dm, uvz[inb, 0], uvz[inb, 1])
        if not ok.any():
            continue
        out[cid] = float(np.abs(uvz[inb, 2][ok] - zs[ok]).mean())
    return out


def boundary_agreement(depth: DepthMap, reference: DepthMap, blend: np.ndarray, threshold: float = 0.9) -> float:
    """Mean ``|D - D_ref|`` over pixels with blend weight above ``threshold``."""
    m = depth.valid & reference.valid & (blend > threshold)
    if not m.any():
        raise NoValidOverlap("no pixels above the blend threshold")
    return float(np.abs(depth.depth[m] - reference.depth[m]).mean())


# --- reports and ablation ------------------------------------------------


@dataclass
class EvalReport:
    reprojection_mean: float
    reprojection_std: float
    photo_count: int
    pixel_count: int
    per_cluster: dict = field(default_factory=dict)
    angular_median: float | None = None
    angular_mean: float | None = None
    depth_rmse: float | None = None
    depth_range: float | None = None
    coverage: float | None = None
    coverage_per_view: dict = field(default_factory=dict)
    seam: dict = field(default_factory=dict)
    photo_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("per_cluster", "coverage_per_view", "seam", "photo_counts"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return d


def per_cluster_stats(rows) -> dict:
    out = {}
    for cid in sorted({r[1] for r in rows}):
        e = np.array([r[2] for r in rows if r[1] == cid])
        out[cid] = {"mean": float(e.mean()), "std": float(e.std()), "photos": int(len(e))}
    return out


def albedo_maps(state) -> dict:
    """Per-cluster albedo maps from the corrected normal fields (NaN where unknown)."""
    return {cid: np.where(r.normals.valid, r.normals.albedo, np.nan) for cid, r in state.results.items()}


def subsample(clusters: ClusterSet, fraction: float, seed: int = 0) -> ClusterSet:
    """Keep ``floor(n * fraction)`` photos of every cluster, chosen uniformly at random."""
    rng = np.random.default_rng([int(seed), int(round(1.0 / fraction))])
    out = {}
    for cid in sorted(clusters.clusters):
        c: PhotoCluster = clusters.clusters[cid]
        k = int(np.floor(len(c) * fraction + 1e-9))
        idx = np.sort(rng.choice(len(c), size=k, replace=False)) if k else np.array([], int)
        out[cid] = c if k == len(c) else c.subset(idx) if k else PhotoCluster(cid, [], c.reference_fiducials)
    return ClusterSet(out, clusters.template_normals, clusters.manifest_path, clusters.scene)


def ablate_photo_count(
    clusters: ClusterSet,
    fractions=ABLATION_FRACTIONS,
    config=None,
    seed: int = 0,
    eval_photos: list | None = None,
    workers: int | None = None,
) -> list[dict]:
    """Rerun the pipeline on random photo subsets and record the reprojection error.

    Each row has the fraction, per-cluster photo counts, and either the
    error statistics or the name of the exception that stopped the run.
    Scoring uses ``eval_photos`` (default: every photo in ``clusters``).
    """
    from .grow import GrowConfig, reconstruct

    config = GrowConfig() if config is None else config
    eval_photos = clusters.photos() if eval_photos is None else eval_photos
    rows = []
    for f in fractions:
        row = {"fraction": float(f), "status": "ok", "reprojection_mean": None, "reprojection_std": None, "error": ""}
        try:
            sub = subsample(clusters, f, seed)
            row["photos"] = sub.total
            row["min_cluster"] = min(sub.counts.values())
            state = reconstruct(sub, config)
            poses = {cid: r.pose for cid, r in state.results.items()}
            mean, std = reprojection_error(state.mesh, albedo_maps(state), eval_photos, poses, workers=workers)
            row["reprojection_mean"], row["reprojection_std"] = mean, std
            row["clusters"] = len(state.completed)
        except HeadgrowError as exc:
            row["status"] = "failed"
            row["error"] = type(exc).__name__
            logger.info("fraction %g failed: %s", f, exc)
        rows.append(row)
    return rows


def check_ablation_trend(rows: list[dict], tolerance: float = 0.05) -> bool:
    """Successful rows must be non-decreasing in error within ``tolerance`` (relative)."""
    ok = [r for r in rows if r["status"] == "ok"]
    for a, b in zip(ok, ok[1:]):
        if b["reprojection_mean"] < a["reprojection_mean"] * (1.0 - tolerance):
            return False
    return True


# --- synthetic ground truth ----------------------------------------------


def head_depth_range(mesh: HeadMesh, pose: Pose | None = None) -> float:
    """Extent of the mesh along the viewing axis of ``pose`` (default: world z)."""
    pts = mesh.vertices if pose is None else pose.apply(mesh.vertices)
    return float(np.ptp(pts[:, 2]))


def load_ground_truth(dataset_dir) -> dict:
    """Scene, per-view masks, normals and depths written by the synthetic generator."""
    from .imageio import read_float_image, read_mask
    from .synth import load_scene

    base = Path(dataset_dir)
    scene, doc = load_scene(base)
    gt = {"scene": scene, "masks": {}, "normals": {}, "depths": {}}
    for az in scene.poses:
        tag = f"p{az:+04d}"
        gt["masks"][az] = read_mask(base / "masks" / f"{tag}.png")
        gt["normals"][az] = NormalField.from_normals(read_float_image(base / "gt" / f"normals_{tag}.hgf"))
        gt["depths"][az] = DepthMap.from_image(read_float_image(base / "gt" / f"depth_{tag}.hgf"), scene.pose(az))
    return gt


def ground_truth_metrics(state, gt: dict) -> dict:
    """Frontal accuracy, coverage and seam statistics of a reconstruction against ground truth.

    Depth errors are reported as fractions of the ground-truth head depth
    (bounding-box extent along the frontal viewing axis); seam gaps as
    fractions of the reconstructed head's own depth extent.
    """
    scene = gt["scene"]
    r0 = state.results[0]
    med, mean = normal_angular_error(r0.normals, gt["normals"][0])
    gt_range = head_depth_range(scene.mesh, scene.pose(0))
    rmse = depth_rmse(r0.depth, gt["depths"][0])
    poses = {cid: r.pose for cid, r in state.results.items()}
    per_view, total = coverage_per_view(state.mesh, poses, gt["masks"])
    rec_range = head_depth_range(state.mesh)
    seam = seam_discontinuity(state.mesh, poses, {c: state.results[c].depth for c in state.completed}, state.completed)
    boundary = {}
    for cid in state.completed:
        r = state.results[cid]
        if r.blend is not None and r.reference is not None:
            try:
                boundary[cid] = boundary_agreement(r.depth, r.reference, r.blend) / rec_range
            except NoValidOverlap:
                pass
    per_cluster_angle = {}
    for cid in state.completed:
        if cid in gt["normals"]:
            per_cluster_angle[cid] = normal_angular_error(state.results[cid].normals, gt["normals"][cid])[0]
    return {
        "angular_median": med,
        "angular_mean": mean,
        "depth_rmse": rmse,
        "depth_range": gt_range,
        "depth_rmse_fraction": rmse / gt_range,
        "coverage": total,
        "coverage_per_view": per_view,
        "seam_fraction": {c: v / rec_range for c, v in seam.items()},
        "boundary_fraction": boundary,
        "angular_median_per_cluster": per_cluster_angle,
    }
