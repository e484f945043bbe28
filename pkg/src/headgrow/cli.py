"""Command-line entry point: ``headgrow synth | reconstruct | eval``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .config import RunConfig
from .errors import HeadgrowError
from .grow import load_state, reconstruct, save_state
from .ingest import CLUSTER_IDS, load_collection
from .mesh import read_mesh, write_obj, write_ply
from .parallel import worker_count
from .plotting import plot_ablation, plot_fields, plot_reprojection
from .synth import GROW_POSE_ORDER, TEMPLATE_PARAMS, make_dataset, make_scene, procedural_head

logger = logging.getLogger("headgrow")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    out = []
    for t in text.split(","):
        t = t.strip()
        if "/" in t:
            a, b = t.split("/")
            out.append(float(a) / float(b))
        elif t:
            out.append(float(t))
    return out


def _poses(text: str) -> tuple:
    """``7`` means the first 7 poses of the growing order; ``0,30,-30`` lists them."""
    if "," not in text:
        k = int(text)
        if not 1 <= k <= len(GROW_POSE_ORDER):
            raise argparse.ArgumentTypeError(f"pose count must be in 1..{len(GROW_POSE_ORDER)}")
        return GROW_POSE_ORDER[:k]
    return tuple(_int_list(text))


def _size(text: str) -> tuple:
    if "x" in text:
        w, h = text.split("x")
        return int(w), int(h)
    return int(text), int(text)


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in columns})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return round(float(obj), 9)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# --- subcommands --------------------------------------------------------


def cmd_synth(args) -> int:
    mesh = read_mesh(args.mesh) if args.mesh else None
    if mesh is not None and args.fiducials:
        mesh.fiducial_vertices = np.asarray(_int_list(args.fiducials), np.int64)
    template = read_mesh(args.template) if args.template else None
    if mesh is not None and template is None:
        template = procedural_head(TEMPLATE_PARAMS)
    counts = None
    if args.counts:
        values = _int_list(args.counts)
        if len(values) != len(CLUSTER_IDS):
            raise SystemExit(f"--counts needs {len(CLUSTER_IDS)} values (for {CLUSTER_IDS})")
        counts = dict(zip(CLUSTER_IDS, values))
    scene = make_scene(
        mesh=mesh,
        n_lights=args.lights,
        poses=args.poses,
        image_size=args.size,
        seed=args.seed,
        ambient=args.ambient,
        intensity=args.intensity,
        albedo=args.albedo,
        noise_sigma=args.noise,
        lights_per_pose=counts,
        template_mesh=template,
    )
    path = make_dataset(scene, args.out, worker_count(args.workers))
    print(path)
    return 0


def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        "dataset": getattr(args, "dataset", None),
        "out": getattr(args, "out", None),
        "seed": getattr(args, "seed", None),
        "workers": getattr(args, "workers", None),
        "clusters": _int_list(args.clusters) if getattr(args, "clusters", None) else None,
        "fractions": _float_list(args.fractions) if getattr(args, "fractions", None) else None,
        "nz_threshold": getattr(args, "nz_threshold", None),
        "blend_band": getattr(args, "blend_band", None),
        "residual_gate": getattr(args, "residual_gate", None),
        "edge_factor": getattr(args, "edge_factor", None),
        "merge_tol": getattr(args, "merge_tol", None),
        "sign": getattr(args, "sign", None),
        "ambiguity_dims": getattr(args, "ambiguity_dims", None),
    }
    if getattr(args, "no_n_over_3", False):
        overrides["n_over_3"] = False
    if getattr(args, "refine_azimuth", False):
        overrides["refine_azimuth"] = True
    return cfg.updated(**overrides)


def cmd_reconstruct(args) -> int:
    cfg = _run_config(args)
    if not cfg.dataset or not cfg.out:
        raise SystemExit("reconstruct needs --dataset and --out")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    clusters = load_collection(_manifest(cfg.dataset), cfg.workers)
    timings["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    state = reconstruct(clusters, cfg.grow_config(), cfg.clusters)
    timings["reconstruct"] = time.perf_counter() - t0

    write_ply(state.mesh, out / "mesh.ply")
    write_obj(state.mesh, out / "mesh.obj")
    save_state(state, out / "state")
    ids, counts = np.unique(state.mesh.provenance, return_counts=True)
    run_log = {
        "config": cfg.to_dict(),
        "photo_counts": {str(k): v for k, v in clusters.counts.items()},
        "completed": state.completed,
        "vertices": state.mesh.n_vertices,
        "faces": int(len(state.mesh.faces)),
        "provenance": {str(int(i)): int(c) for i, c in zip(ids, counts)},
        "poses": {str(c): state.results[c].pose.to_dict() for c in state.completed},
    }
    _dump_json(out / "run_log.json", _jsonable(run_log))
    plot_fields(
        {c: r.depth for c, r in state.results.items()},
        {c: r.normals for c, r in state.results.items()},
        out / "fields.png",
    )
    timings["total"] = sum(timings.values())
    _dump_json(out / "timings.json", _jsonable(timings))
    print(f"{state.mesh.n_vertices} vertices, {len(state.mesh.faces)} faces, clusters {state.completed}")
    return 0


def _manifest(dataset) -> Path:
    p = Path(dataset)
    return p / "manifest.json" if p.is_dir() else p


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    if not cfg.dataset or not cfg.out:
        raise SystemExit("eval needs --dataset and --out")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    clusters = load_collection(_manifest(cfg.dataset), cfg.workers)
    photos = clusters.photos()
    dataset_dir = _manifest(cfg.dataset).parent
    summary: dict = {"config": cfg.to_dict(), "photo_counts": {str(k): v for k, v in clusters.counts.items()}}
    state = None

    if args.gt:
        gt = ev.load_ground_truth(dataset_dir)
        scene = gt["scene"]
        poses = {az: scene.pose(az) for az in scene.poses}
        lighting = None
        if args.gt_lighting:
            lighting = {p.id: scene.lights[int(p.meta["light"])].vector4() for p in photos}
        mesh, albedo = scene.mesh, scene.albedo
        summary["source"] = "ground_truth"
    else:
        if not args.recon:
            raise SystemExit("eval needs --recon (a reconstruct output directory) or --gt")
        recon = Path(args.recon)
        mesh = read_mesh(recon / "mesh.ply")
        state = load_state(recon / "state", mesh, cfg.grow_config())
        poses = {c: r.pose for c, r in state.results.items()}
        albedo = ev.albedo_maps(state)
        lighting = None
        summary["source"] = str(recon)

    mean, std, rows = ev.reprojection_error(mesh, albedo, photos, poses, lighting, cfg.workers, return_per_photo=True)
    per_cluster = ev.per_cluster_stats(rows)
    report = ev.EvalReport(
        reprojection_mean=mean,
        reprojection_std=std,
        photo_count=len(rows),
        pixel_count=int(sum(r[3] for r in rows)),
        per_cluster=per_cluster,
        photo_counts=clusters.counts,
    )
    _write_csv(
        out / "reprojection.csv",
        [{"photo": r[0], "cluster": r[1], "rms": r[2], "pixels": r[3]} for r in rows],
        ["photo", "cluster", "rms", "pixels"],
    )
    plot_reprojection(per_cluster, out / "reprojection.png")

    if state is not None and (dataset_dir / "scene.json").exists() and (dataset_dir / "gt").exists():
        m = ev.ground_truth_metrics(state, ev.load_ground_truth(dataset_dir))
        report.angular_median, report.angular_mean = m["angular_median"], m["angular_mean"]
        report.depth_rmse, report.depth_range = m["depth_rmse"], m["depth_range"]
        report.coverage, report.coverage_per_view = m["coverage"], m["coverage_per_view"]
        report.seam = m["seam_fraction"]
        summary["ground_truth"] = m

    if args.ablate:
        ab_rows = ev.ablate_photo_count(clusters, cfg.fractions, cfg.grow_config(), cfg.seed, photos, cfg.workers)
        _write_csv(
            out / "ablation.csv",
            ab_rows,
            ["fraction", "photos", "min_cluster", "status", "error", "reprojection_mean", "reprojection_std"],
        )
        plot_ablation(ab_rows, out / "ablation.png")
        summary["ablation"] = ab_rows
        summary["ablation_trend_ok"] = ev.check_ablation_trend(ab_rows)

    summary["report"] = report.to_dict()
    _dump_json(out / "summary.json", _jsonable(summary))
    print(f"reprojection error {mean:.3f} +- {std:.3f} over {len(rows)} photos")
    return 0


# --- parser -------------------------------------------------------------


def _add_thresholds(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("thresholds")
    g.add_argument("--nz-threshold", dest="nz_threshold", type=float, help="|n_z| below which the tangency row is used")
    g.add_argument("--blend-band", dest="blend_band", type=float, help="blend ramp width in pixels")
    g.add_argument("--residual-gate", dest="residual_gate", type=float, help="multiple of the median residual")
    g.add_argument("--no-n-over-3", dest="no_n_over_3", action="store_true", help="disable the n/3 validity rule")
    g.add_argument("--edge-factor", dest="edge_factor", type=float, help="long-edge filter factor")
    g.add_argument("--merge-tol", dest="merge_tol", type=float, help="max depth gap (px) for merging overlap vertices")
    g.add_argument("--sign", type=float, choices=(-1.0, 1.0), help="sign of n_x on the gradient right-hand side")
    g.add_argument("--ambiguity-dims", dest="ambiguity_dims", type=int, choices=(3, 4))
    g.add_argument("--refine-azimuth", dest="refine_azimuth", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="headgrow", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic photo collection with ground truth")
    p.add_argument("--mesh", help="OBJ or PLY head mesh (default: procedural head)")
    p.add_argument("--fiducials", help="7 comma-separated vertex indices of --mesh")
    p.add_argument("--template", help="mesh of a different individual for the frontal reference")
    p.add_argument("--lights", type=int, default=100)
    p.add_argument("--poses", type=_poses, default=GROW_POSE_ORDER)
    p.add_argument("--counts", help="photos per cluster for -90,-60,-30,0,30,60,90")
    p.add_argument("--size", type=_size, default=(128, 128), help="N or WxH")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sigma (intensity levels)")
    p.add_argument("--ambient", type=float, default=0.2)
    p.add_argument("--intensity", type=float, default=0.8)
    p.add_argument("--albedo", type=float, default=0.8)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("reconstruct", help="run the growing pipeline on a manifest")
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--dataset", help="dataset directory or manifest file")
    p.add_argument("--out")
    p.add_argument("--clusters", help="comma-separated cluster ids to grow (0 is always included)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    _add_thresholds(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="score a reconstruction and optionally run the photo-count ablation")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--recon", help="output directory of the reconstruct command")
    p.add_argument("--gt", action="store_true", help="score the ground-truth mesh of a synthetic dataset")
    p.add_argument("--gt-lighting", dest="gt_lighting", action="store_true", help="with --gt, use the true lights")
    p.add_argument("--out")
    p.add_argument("--ablate", action="store_true")
    p.add_argument("--fractions", help="e.g. 1,1/2,1/4,1/8,1/16")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    _add_thresholds(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HeadgrowError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"error: ValueError: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
