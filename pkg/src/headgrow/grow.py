"""Boundary-value growing: frontal reconstruction, then side clusters one by one.

The world frame of a reconstruction is the frontal camera frame in pixel
units.  Each side cluster is anchored to the mesh grown so far: the mesh is
rendered into the cluster's view, its normals fix the factorization
ambiguity, and its depth enters the integration as blended Dirichlet data.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.optimize import minimize_scalar

from .ambiguity import apply_ambiguity, solve_linear_ambiguity
from .errors import (
    EmptyProjection,
    HeadgrowError,
    InsufficientOverlap,
    MissingFrontalCluster,
    NeighborNotCompleted,
    TooFewPhotos,
)
from .fields import DepthMap, NormalField
from .geometry import (
    Pose,
    fit_similarity_2d,
    is_degenerate_layout,
    project,
    rotation_y,
    similarity_to_camera_pose,
    unproject,
)
from .imageio import read_float_image, write_float_image
from .ingest import ClusterSet, PhotoCluster
from .integrate import BoundaryConstraint, integrate_normals, make_blend_mask
from .mesh import HeadMesh, filter_long_edges, grid_faces
from .photometric import MIN_PHOTOS, photometric_stereo
from .raster import rasterize, shade_normals

logger = logging.getLogger(__name__)

GROW_ORDER = (30, 60, 90, -30, -60, -90)
CANONICAL_VIEWS = (0,) + GROW_ORDER


def canonical_poses() -> list:
    """Nominal world-to-camera poses of the seven canonical views."""
    return [Pose(rotation_y(a)) for a in CANONICAL_VIEWS]


@dataclass(frozen=True)
class GrowConfig:
    nz_threshold: float = 0.05
    blend_band: float = 10.0
    residual_gate: float = 2.0
    gate_iterations: int = 1
    n_over_3: bool = True
    edge_factor: float = 5.0
    sign: float = -1.0
    region_fraction: float = 0.25
    refine_azimuth: bool = False
    azimuth_window: float = 15.0
    min_overlap: int = 100
    merge_tol: float = 5.0
    ambiguity_min_weight: float = 0.5
    same_side_reference: bool = True
    ambiguity_dims: int = 4


@dataclass
class ClusterResult:
    cluster_id: int
    pose: Pose
    lighting: np.ndarray  # (n, 4), in the corrected basis
    ambiguity: np.ndarray  # (4, 4)
    normals: NormalField
    depth: DepthMap
    blend: np.ndarray | None = None
    reference: DepthMap | None = None
    photo_count: int = 0


@dataclass
class GrowState:
    mesh: HeadMesh
    results: dict
    completed: list
    shape: tuple
    config: GrowConfig = field(default_factory=GrowConfig)

    def pose(self, cluster_id: int) -> Pose:
        return self.results[cluster_id].pose


def neighbor_toward_front(cluster_id: int) -> int:
    return int(cluster_id - 30 * np.sign(cluster_id))


def _photometric(cluster: PhotoCluster, config: GrowConfig):
    return photometric_stereo(
        cluster,
        gate=config.residual_gate,
        gate_iterations=config.gate_iterations,
        min_fraction=1.0 / 3.0 if config.n_over_3 else None,
        region_fraction=config.region_fraction,
    )


def _largest_component(valid: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(valid)
    if n <= 1:
        return valid.copy()
    sizes = ndimage.sum(valid, labels, index=np.arange(1, n + 1))
    return labels == (1 + int(np.argmax(sizes)))


# --- mesh fusion --------------------------------------------------------


def sample_depth(depth: DepthMap, cols: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear depth lookup, falling back to the nearest pixel when a corner is invalid."""
    h, w = depth.shape
    c0 = np.clip(np.floor(cols).astype(int), 0, w - 2)
    r0 = np.clip(np.floor(rows).astype(int), 0, h - 2)
    fc, fr = np.clip(cols - c0, 0, 1), np.clip(rows - r0, 0, 1)
    corners = [(r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)]
    weights = [(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc]
    all_valid = np.all([depth.valid[r, c] for r, c in corners], axis=0)
    bil = sum(wt * depth.depth[r, c] for (r, c), wt in zip(corners, weights))
    rn = np.clip(np.rint(rows).astype(int), 0, h - 1)
    cn = np.clip(np.rint(cols).astype(int), 0, w - 1)
    near_ok = depth.valid[rn, cn]
    return np.where(all_valid, bil, depth.depth[rn, cn]), all_valid | near_ok


def fuse_view(
    mesh: HeadMesh,
    depth: DepthMap,
    cluster_id: int,
    weights: np.ndarray | None = None,
    edge_factor: float = 5.0,
    merge_tol: float = 5.0,
    guard_poses: list | None = None,
) -> HeadMesh:
    """Add one view's depth map to ``mesh``.

    Pixels not covered by the existing mesh become new vertices (provenance
    ``cluster_id``).  Existing visible vertices inside the blend band are
    moved toward the new depth by ``W * old + (1 - W) * new`` when the two
    agree within ``merge_tol`` pixels.  New grid triangles are stitched to
    the existing vertices on the seam ring.

    Views listed in ``guard_poses`` never lose coverage: a moved vertex is
    put back when a face using it stops covering a pixel of such a view.
    """
    pose = depth.pose
    shape = depth.shape
    h, w = shape
    verts = mesh.vertices.copy()
    index = np.full(shape, -1, dtype=np.int64)
    new = depth.valid.copy()

    if mesh.n_vertices and len(mesh.faces):
        pts = pose.apply(verts)
        gbuf = rasterize(pts, mesh.faces, shape)
        covered = gbuf.covered
        new &= ~covered
        uvz = project(pts, shape)
        # a vertex is visible when one of its faces wins the z-buffer somewhere
        vis = np.zeros(len(verts), bool)
        vis[mesh.faces[np.unique(gbuf.face[covered])].ravel()] = True

        if weights is not None:
            cand = np.nonzero(vis)[0]
            col = np.clip(np.rint(uvz[cand, 0]).astype(int), 0, w - 1)
            row = np.clip(np.rint(uvz[cand, 1]).astype(int), 0, h - 1)
            wv = weights[row, col]
            zs, ok = sample_depth(depth, uvz[cand, 0], uvz[cand, 1])
            upd = ok & (wv < 1.0) & (np.abs(zs - uvz[cand, 2]) <= merge_tol)
            ids = cand[upd]
            if len(ids):
                pc = pts[ids].copy()
                pc[:, 2] = wv[upd] * pc[:, 2] + (1.0 - wv[upd]) * zs[upd]
                verts[ids] = pose.inverse_apply(pc)
                uvz[ids, 2] = pc[:, 2]
                if guard_poses:
                    _keep_coverage(mesh, verts, guard_poses, shape)

        # seam ring: covered pixels next to the new region reuse the nearest
        # vertex of the face that covers them
        ring = covered & ndimage.binary_dilation(new, structure=np.ones((3, 3), bool))
        rr, cc = np.nonzero(ring)
        if len(rr):
            tri = mesh.faces[gbuf.face[rr, cc]]
            d2 = (uvz[tri, 0] - cc[:, None]) ** 2 + (uvz[tri, 1] - rr[:, None]) ** 2
            index[rr, cc] = tri[np.arange(len(rr)), np.argmin(d2, axis=1)]

    rr, cc = np.nonzero(new)
    new_world = pose.inverse_apply(unproject(cc, rr, depth.depth[rr, cc], shape))
    base = len(verts)
    index[rr, cc] = base + np.arange(len(rr))
    all_verts = np.vstack([verts, new_world]) if len(rr) else verts
    faces = grid_faces(index, require=new)
    faces = filter_long_edges(all_verts, faces, edge_factor)

    # drop new vertices that ended up in no triangle
    used = np.zeros(len(all_verts), bool)
    used[faces.ravel()] = True
    keep_new = used[base:]
    remap = np.arange(len(all_verts))
    remap[base:] = -1
    remap[base + np.nonzero(keep_new)[0]] = base + np.arange(keep_new.sum())
    faces = remap[faces]
    all_verts = np.vstack([verts, new_world[keep_new]])
    prov = np.concatenate([mesh.provenance, np.full(int(keep_new.sum()), cluster_id, dtype=np.int64)])
    return HeadMesh(
        all_verts,
        np.vstack([mesh.faces, faces]),
        prov,
        mesh.fiducial_vertices,
    )


def _keep_coverage(mesh: HeadMesh, verts: np.ndarray, poses: list, shape, max_rounds: int = 20) -> None:
    """Revert moved vertices (in place) until no view in ``poses`` covers fewer pixels than before."""
    before = [rasterize(p.apply(mesh.vertices), mesh.faces, shape) for p in poses]
    for _ in range(max_rounds):
        reverted = False
        for p, old in zip(poses, before):
            now = rasterize(p.apply(verts), mesh.faces, shape).covered
            lost = old.covered & ~now
            if lost.any():
                ids = np.unique(mesh.faces[old.face[lost]])
                verts[ids] = mesh.vertices[ids]
                reverted = True
        if not reverted:
            return
    # fall back to the untouched surface if reverting did not settle
    verts[:] = mesh.vertices


def _fiducial_vertices(mesh: HeadMesh, depth: DepthMap, reference_fiducials: np.ndarray) -> np.ndarray:
    """Mesh vertices nearest to the reference fiducials seen from the depth map's view."""
    pts = project(depth.pose.apply(mesh.vertices), depth.shape)
    out = []
    for x, y in np.asarray(reference_fiducials, float):
        out.append(int(np.argmin((pts[:, 0] - x) ** 2 + (pts[:, 1] - y) ** 2)))
    return np.array(out, np.int64)


# --- pipeline stages ----------------------------------------------------


def reconstruct_frontal(clusters: ClusterSet, config: GrowConfig = GrowConfig()) -> GrowState:
    """Photometric stereo, template-based ambiguity fix and integration on V_0."""
    if 0 not in clusters.clusters:
        raise MissingFrontalCluster("cluster 0 is required")
    if clusters.template_normals is None:
        raise MissingFrontalCluster("template normals are required for the frontal cluster")
    cluster = clusters.clusters[0]
    if len(cluster) < MIN_PHOTOS:
        raise TooFewPhotos(f"frontal cluster has {len(cluster)} photos, need at least {MIN_PHOTOS}")
    lighting, field0 = _photometric(cluster, config)
    amb = solve_linear_ambiguity(
        field0, clusters.template_normals, min_pixels=config.min_overlap, dims=config.ambiguity_dims
    )
    corrected = apply_ambiguity(amb, field0)
    corrected.valid = _largest_component(corrected.valid)
    depth = integrate_normals(corrected, nz_threshold=config.nz_threshold, sign=config.sign)
    depth = replace(depth, pose=Pose())

    mesh = fuse_view(HeadMesh.empty(), depth, 0, edge_factor=config.edge_factor)
    mesh.fiducial_vertices = _fiducial_vertices(mesh, depth, cluster.reference_fiducials)
    result = ClusterResult(
        cluster_id=0,
        pose=Pose(),
        lighting=lighting.coefficients @ np.linalg.inv(amb.A),
        ambiguity=amb.A,
        normals=corrected,
        depth=depth,
        photo_count=len(cluster),
    )
    return GrowState(mesh, {0: result}, [0], cluster.shape, config)


def _fiducial_fit(state: GrowState, reference_fiducials: np.ndarray, azimuth: float):
    pts = state.mesh.vertices[state.mesh.fiducial_vertices]
    proj = project(pts @ rotation_y(azimuth).T, state.shape)[:, :2]
    sim = fit_similarity_2d(proj, reference_fiducials)
    resid = float(np.sum((sim.apply(proj) - reference_fiducials) ** 2))
    return sim, resid


def estimate_pose_to_cluster(state: GrowState, cluster: PhotoCluster | int, refine_azimuth: bool | None = None) -> Pose:
    """World-to-camera pose of a target cluster.

    Nominal rotation by the cluster azimuth, refined by the 2D similarity that
    best maps the mesh's projected fiducials onto the cluster's reference
    fiducials (optionally also searching the azimuth within a window).  Depth
    translation along the target view is a free gauge and is left at zero.
    """
    target = cluster if isinstance(cluster, (int, np.integer)) else cluster.cluster_id
    if target == 0:
        return Pose()
    neighbor = neighbor_toward_front(target)
    if neighbor not in state.completed:
        raise NeighborNotCompleted(f"cluster {target} needs {neighbor} completed first")
    refine = state.config.refine_azimuth if refine_azimuth is None else refine_azimuth
    nominal = Pose(rotation_y(target), np.zeros(3), 1.0, nominal_only=True)

    ref = None if isinstance(cluster, (int, np.integer)) else cluster.reference_fiducials
    fid = state.mesh.fiducial_vertices
    if ref is None or fid is None or is_degenerate_layout(ref):
        logger.warning("cluster %d: no usable fiducials, using the nominal azimuth only", target)
        return nominal
    azimuth = float(target)
    try:
        if refine:
            win = state.config.azimuth_window
            res = minimize_scalar(
                lambda a: _fiducial_fit(state, ref, a)[1],
                bounds=(target - win, target + win),
                method="bounded",
                options={"xatol": 1e-3},
            )
            azimuth = float(res.x)
        sim, _ = _fiducial_fit(state, ref, azimuth)
    except HeadgrowError:
        logger.warning("cluster %d: degenerate projected fiducials, using the nominal azimuth only", target)
        return nominal
    return similarity_to_camera_pose(sim, state.shape).compose(Pose(rotation_y(azimuth)))


def reference_source(state: GrowState, pose: Pose, shape=None) -> np.ndarray:
    """Per-pixel provenance of the mesh surface seen under ``pose`` (-999 where uncovered)."""
    shape = state.shape if shape is None else shape
    mesh = state.mesh
    gbuf = rasterize(pose.apply(mesh.vertices), mesh.faces, shape)
    out = np.full(shape, -999, dtype=np.int64)
    cov = gbuf.covered
    out[cov] = mesh.provenance[mesh.faces[gbuf.face[cov], 0]]
    return out


def render_reference(state: GrowState, pose: Pose, shape=None) -> tuple[DepthMap, NormalField]:
    """Z-buffered depth and normals of the current mesh seen under ``pose``."""
    shape = state.shape if shape is None else shape
    mesh = state.mesh
    if mesh.n_vertices == 0 or len(mesh.faces) == 0:
        raise EmptyProjection("mesh is empty")
    pts = pose.apply(mesh.vertices)
    gbuf = rasterize(pts, mesh.faces, shape)
    cov = gbuf.covered
    if not cov.any():
        raise EmptyProjection("mesh does not project into the view")
    normals = shade_normals(gbuf, pts, mesh.faces)
    depth = DepthMap(np.where(cov, gbuf.depth, 0.0), cov, pose)
    return depth, NormalField.from_normals(normals, cov)


def same_side_chain(target: int) -> list[int]:
    """Clusters between the frontal one and ``target`` (exclusive) on its side."""
    step = 30 if target > 0 else -30
    return list(range(0, target, step))


def grow_cluster(state: GrowState, cluster: PhotoCluster) -> GrowState:
    """Reconstruct one side cluster anchored to its already-built neighbour."""
    target = cluster.cluster_id
    config = state.config
    if target == 0 or target in state.completed:
        raise NeighborNotCompleted(f"cluster {target} cannot be grown (already completed or frontal)")
    neighbor = neighbor_toward_front(target)
    if neighbor not in state.completed:
        raise NeighborNotCompleted(f"cluster {target} needs {neighbor} completed first")
    if len(cluster) < MIN_PHOTOS:
        raise TooFewPhotos(f"cluster {target} has {len(cluster)} photos, need at least {MIN_PHOTOS}")

    pose = estimate_pose_to_cluster(state, cluster)
    d_ref, n_ref = render_reference(state, pose, cluster.shape)
    lighting, field0 = _photometric(cluster, config)

    region = d_ref.valid & field0.valid
    if region.sum() < config.min_overlap:
        raise InsufficientOverlap(f"cluster {target}: rendered reference covers {int(region.sum())} target pixels")
    blend = make_blend_mask(region, config.blend_band)
    overlap = region
    if config.same_side_reference:
        # reference normals come from the chain toward the front, not from the opposite side
        chain = np.isin(reference_source(state, pose, cluster.shape), same_side_chain(target))
        if (chain & region).sum() >= config.min_overlap:
            overlap = chain & region
    core = overlap & (blend >= config.ambiguity_min_weight)
    if core.sum() >= config.min_overlap:
        overlap = core
    amb = solve_linear_ambiguity(field0, n_ref, overlap, min_pixels=config.min_overlap, dims=config.ambiguity_dims)
    corrected = apply_ambiguity(amb, field0)

    bc = BoundaryConstraint(np.where(region, d_ref.depth, np.nan), blend)
    depth = integrate_normals(corrected, bc, nz_threshold=config.nz_threshold, sign=config.sign, drop_unanchored=True)
    depth = replace(depth, pose=pose)

    mesh = fuse_view(state.mesh, depth, target, blend, config.edge_factor, config.merge_tol, canonical_poses())
    results = dict(state.results)
    results[target] = ClusterResult(
        cluster_id=target,
        pose=pose,
        lighting=lighting.coefficients @ np.linalg.inv(amb.A),
        ambiguity=amb.A,
        normals=corrected,
        depth=depth,
        blend=blend,
        reference=d_ref,
        photo_count=len(cluster),
    )
    logger.info(
        "grew cluster %d: %d new vertices, overlap %d px",
        target,
        mesh.n_vertices - state.mesh.n_vertices,
        int(region.sum()),
    )
    return GrowState(mesh, results, state.completed + [target], state.shape, config)


def merge_to_mesh(state: GrowState) -> HeadMesh:
    """Rebuild the head mesh from the per-cluster depth maps in growing order."""
    if 0 not in state.completed:
        raise MissingFrontalCluster("frontal cluster not reconstructed")
    config = state.config
    mesh = HeadMesh.empty()
    for cid in state.completed:
        res = state.results[cid]
        mesh = fuse_view(mesh, res.depth, cid, res.blend, config.edge_factor, config.merge_tol, canonical_poses())
    mesh.fiducial_vertices = state.mesh.fiducial_vertices
    return mesh


def reconstruct(clusters: ClusterSet, config: GrowConfig = GrowConfig(), cluster_ids=None) -> GrowState:
    """Full pipeline: V_0, then V_30, V_60, V_90, V_-30, V_-60, V_-90 as available."""
    wanted = set(clusters.clusters) if cluster_ids is None else set(cluster_ids) | {0}
    state = reconstruct_frontal(clusters, config)
    for cid in GROW_ORDER:
        if cid not in wanted:
            continue
        if cid not in clusters.clusters:
            logger.warning("cluster %d has no photos; skipping", cid)
            continue
        if neighbor_toward_front(cid) not in state.completed:
            logger.warning("cluster %d skipped: neighbour %d not reconstructed", cid, neighbor_toward_front(cid))
            continue
        state = grow_cluster(state, clusters.clusters[cid])
    return state


# --- persistence --------------------------------------------------------


def _tag(cid: int) -> str:
    return f"p{cid:+04d}"


def save_state(state: GrowState, out_dir) -> Path:
    """Write per-cluster depth, normal, albedo and blend images plus ``state.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"completed": [int(c) for c in state.completed], "shape": list(state.shape), "clusters": {}}
    if state.mesh.fiducial_vertices is not None:
        doc["fiducial_vertices"] = [int(i) for i in state.mesh.fiducial_vertices]
    for cid in state.completed:
        r = state.results[cid]
        tag = _tag(cid)
        write_float_image(out / f"depth_{tag}.hgf", r.depth.to_image())
        write_float_image(out / f"normals_{tag}.hgf", r.normals.to_image())
        write_float_image(out / f"raw4_{tag}.hgf", np.where(r.normals.valid[..., None], r.normals.raw4, np.nan))
        if r.blend is not None:
            write_float_image(out / f"blend_{tag}.hgf", r.blend)
        if r.reference is not None:
            write_float_image(out / f"reference_{tag}.hgf", r.reference.to_image())
        np.savetxt(out / f"lighting_{tag}.csv", r.lighting, delimiter=",", fmt="%.9g")
        doc["clusters"][str(cid)] = {
            "pose": r.pose.to_dict(),
            "ambiguity": r.ambiguity.tolist(),
            "photo_count": int(r.photo_count),
        }
    (out / "state.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return out


def load_state(state_dir, mesh: HeadMesh, config: GrowConfig = GrowConfig()) -> GrowState:
    """Inverse of :func:`save_state` (images are stored as float32)."""
    base = Path(state_dir)
    doc = json.loads((base / "state.json").read_text())
    results = {}
    for key, meta in doc["clusters"].items():
        cid = int(key)
        tag = _tag(cid)
        pose = Pose.from_dict(meta["pose"])
        depth = DepthMap.from_image(read_float_image(base / f"depth_{tag}.hgf"), pose)
        raw4 = read_float_image(base / f"raw4_{tag}.hgf")
        valid = np.isfinite(raw4).all(-1)
        blend = read_float_image(base / f"blend_{tag}.hgf") if (base / f"blend_{tag}.hgf").exists() else None
        ref = None
        if (base / f"reference_{tag}.hgf").exists():
            ref = DepthMap.from_image(read_float_image(base / f"reference_{tag}.hgf"), pose)
        results[cid] = ClusterResult(
            cluster_id=cid,
            pose=pose,
            lighting=np.atleast_2d(np.loadtxt(base / f"lighting_{tag}.csv", delimiter=",")),
            ambiguity=np.asarray(meta["ambiguity"], float),
            normals=NormalField.from_raw4(np.nan_to_num(raw4), valid),
            depth=depth,
            blend=blend,
            reference=ref,
            photo_count=int(meta["photo_count"]),
        )
    if "fiducial_vertices" in doc:
        mesh.fiducial_vertices = np.asarray(doc["fiducial_vertices"], np.int64)
    return GrowState(mesh, results, [int(c) for c in doc["completed"]], tuple(doc["shape"]), config)
