import csv
import json

import numpy as np
import pytest

from headgrow.cli import main
from headgrow.mesh import read_mesh

SMALL = ["--size", "64", "--lights", "40", "--seed", "3"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", *SMALL, "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def recon(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "recon"
    assert main(["reconstruct", "--dataset", str(dataset), "--out", str(out), "--workers", "1"]) == 0
    return out


def test_synth_single_photo(tmp_path):
    assert main(["synth", "--size", "32", "--lights", "1", "--poses", "1", "--out", str(tmp_path / "d")]) == 0
    doc = json.loads((tmp_path / "d" / "manifest.json").read_text())
    entries = doc["photos"] if isinstance(doc, dict) else doc
    assert len(entries) == 1


def test_synth_same_seed_same_manifest(dataset, tmp_path):
    assert main(["synth", *SMALL, "--out", str(tmp_path / "again"), "--workers", "1"]) == 0
    assert (tmp_path / "again" / "manifest.json").read_bytes() == (dataset / "manifest.json").read_bytes()
    assert (tmp_path / "again" / "scene.json").read_bytes() == (dataset / "scene.json").read_bytes()


def test_reconstruct_outputs(recon):
    mesh = read_mesh(recon / "mesh.ply")
    mesh.check()
    assert set(np.unique(mesh.provenance)) == {-90, -60, -30, 0, 30, 60, 90}
    assert (recon / "mesh.obj").exists() and (recon / "fields.png").stat().st_size > 0
    log = json.loads((recon / "run_log.json").read_text())
    assert log["completed"] == [0, 30, 60, 90, -30, -60, -90]
    timings = json.loads((recon / "timings.json").read_text())
    assert timings["total"] > 0


def test_run_log_holds_effective_config(recon):
    log = json.loads((recon / "run_log.json").read_text())
    cfg = log["config"]
    assert cfg["seed"] == 0 and cfg["merge_tol"] == 5.0 and cfg["nz_threshold"] == 0.05
    assert {"blend_band", "residual_gate", "n_over_3", "edge_factor", "sign", "ambiguity_dims"} <= set(cfg)


def test_reconstruct_byte_identical_across_workers(dataset, recon, tmp_path, monkeypatch):
    monkeypatch.setenv("HEADGROW_THREADS", "3")
    out = tmp_path / "r2"
    assert main(["reconstruct", "--dataset", str(dataset), "--out", str(out), "--workers", "2"]) == 0
    for name in ("mesh.ply", "mesh.obj"):
        assert (out / name).read_bytes() == (recon / name).read_bytes()
    a = json.loads((out / "run_log.json").read_text())
    b = json.loads((recon / "run_log.json").read_text())
    a["config"].pop("workers"), b["config"].pop("workers")
    a["config"].pop("out"), b["config"].pop("out")
    assert a == b


def test_reconstruct_frontal_only(dataset, tmp_path):
    out = tmp_path / "front"
    assert main(["reconstruct", "--dataset", str(dataset), "--out", str(out), "--clusters", "0"]) == 0
    assert set(np.unique(read_mesh(out / "mesh.ply").provenance)) == {0}


def test_missing_frontal_cluster_exit_code(dataset, tmp_path, capsys):
    doc = json.loads((dataset / "manifest.json").read_text())
    photos = doc["photos"] if isinstance(doc, dict) else doc

    def azimuth(e):
        return e.get("azimuth", e.get("pose"))

    kept = [e for e in photos if abs(azimuth(e)) > 15]
    if isinstance(doc, dict):
        doc["photos"] = kept
    else:
        doc = kept
    manifest = dataset / "no_front.json"
    manifest.write_text(json.dumps(doc))
    code = main(["reconstruct", "--dataset", str(manifest), "--out", str(tmp_path / "x")])
    assert code != 0
    assert "MissingFrontalCluster" in capsys.readouterr().err


def test_eval_writes_reports(dataset, recon, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--dataset", str(dataset), "--recon", str(recon), "--out", str(out)]) == 0
    with open(out / "reprojection.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 7 * 40
    assert all(float(r["rms"]) >= 0 for r in rows)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["report"]["reprojection_mean"] > 0
    assert 0 < summary["report"]["coverage"] <= 1
    assert (out / "reprojection.png").stat().st_size > 0


def test_eval_ablation_rows(dataset, recon, tmp_path):
    out = tmp_path / "ab"
    assert main(["eval", "--dataset", str(dataset), "--recon", str(recon), "--out", str(out), "--ablate"]) == 0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["fraction"]) for r in rows] == [1.0, 0.5, 0.25, 0.125, 0.0625]
    assert rows[0]["status"] == "ok"
    assert rows[-1]["status"] == "failed"  # 2 photos per cluster
    assert (out / "ablation.png").stat().st_size > 0


def test_eval_ground_truth_mesh(dataset, tmp_path):
    out = tmp_path / "gt"
    assert main(["eval", "--dataset", str(dataset), "--gt", "--gt-lighting", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["report"]["reprojection_mean"] < 1.5


def test_eval_byte_identical(dataset, recon, tmp_path):
    outs = []
    for k, workers in enumerate(("1", "2")):
        out = tmp_path / f"e{k}"
        assert main(["eval", "--dataset", str(dataset), "--recon", str(recon), "--out", str(out), "--workers", workers]) == 0
        outs.append(out)
    assert (outs[0] / "reprojection.csv").read_bytes() == (outs[1] / "reprojection.csv").read_bytes()


# --- configuration ---------------------------------------------------------


@pytest.mark.parametrize("flag,value", [("--blend-band", "0"), ("--residual-gate", "-1"), ("--edge-factor", "0")])
def test_bad_thresholds_rejected(dataset, tmp_path, capsys, flag, value):
    code = main(["reconstruct", "--dataset", str(dataset), "--out", str(tmp_path / "x"), flag, value])
    assert code != 0
    assert "must be positive" in capsys.readouterr().err


def test_unknown_config_key(dataset, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"blend_bnd": 4}))
    assert main(["reconstruct", "--config", str(cfg), "--dataset", str(dataset), "--out", str(tmp_path / "x")]) != 0
    assert "unknown config keys" in capsys.readouterr().err


def test_config_file_and_flag_override(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dataset": str(dataset), "blend_band": 6, "clusters": [0, 30]}))
    out = tmp_path / "o"
    assert main(["reconstruct", "--config", str(cfg), "--out", str(out), "--merge-tol", "4"]) == 0
    log = json.loads((out / "run_log.json").read_text())
    assert log["config"]["blend_band"] == 6 and log["config"]["merge_tol"] == 4.0
    assert log["completed"] == [0, 30]


def test_missing_required_paths(tmp_path):
    with pytest.raises(SystemExit):
        main(["reconstruct", "--out", str(tmp_path)])
