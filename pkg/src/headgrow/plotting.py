"""Report figures (PNG) for reconstruction and evaluation runs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_reprojection(per_cluster: dict, path) -> Path:
    """Bar chart of mean +- std reprojection error per view cluster."""
    cids = sorted(per_cluster)
    means = [per_cluster[c]["mean"] for c in cids]
    stds = [per_cluster[c]["std"] for c in cids]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        x = np.arange(len(cids))
        ax.bar(x, means, yerr=stds, color="0.6", edgecolor="k", capsize=3)
        ax.set_xticks(x, [str(c) for c in cids])
        ax.set_xlabel("view cluster (deg)")
        ax.set_ylabel("RMS intensity error")
        return _save(fig, path)


def plot_ablation(rows: list[dict], path) -> Path:
    """Reprojection error against the fraction of photos kept; failed runs marked on the axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        ok = [r for r in rows if r["status"] == "ok"]
        bad = [r for r in rows if r["status"] != "ok"]
        if ok:
            x = [r["fraction"] for r in ok]
            ax.errorbar(x, [r["reprojection_mean"] for r in ok], yerr=[r["reprojection_std"] for r in ok], marker="o", color="k", capsize=3)
        ymin = min([r["reprojection_mean"] for r in ok], default=0.0)
        for r in bad:
            ax.plot(r["fraction"], ymin, marker="x", color="r", linestyle="none")
            ax.annotate(r["error"], (r["fraction"], ymin), textcoords="offset points", xytext=(4, 4), fontsize=7)
        ax.set_xscale("log", base=2)
        ax.invert_xaxis()
        ax.set_xlabel("fraction of photos per cluster")
        ax.set_ylabel("RMS intensity error")
        return _save(fig, path)


def plot_fields(depths: dict, normals: dict, path) -> Path:
    """Depth maps (top row) and normal maps (bottom row), one column per cluster."""
    cids = sorted(depths)
    n = max(len(cids), 1)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, n, figsize=(1.8 * n, 3.8), squeeze=False)
        for k, cid in enumerate(cids):
            d = depths[cid]
            img = np.where(d.valid, d.depth, np.nan)
            axes[0, k].imshow(img, cmap="viridis")
            axes[0, k].set_title(f"{cid}")
            nf = normals[cid]
            rgb = np.where(nf.valid[..., None], 0.5 * (nf.normals + 1.0), 1.0)
            axes[1, k].imshow(np.clip(rgb, 0, 1))
            for ax in axes[:, k]:
                ax.set_xticks([])
                ax.set_yticks([])
        return _save(fig, path)
