"""Figure rendering for training and evaluation reports.

Every command that writes delimited output (metrics CSV/JSON, training
log) also drops PNG figures next to it: loss curves, metric summaries,
ablation bars, and a small gallery comparing ground-truth and predicted
rank maps.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricsReport, render_rank_map


def loss_curves(log: list[dict], path) -> None:
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    its = [r["iteration"] for r in log]
    for key in ("total_loss", "det_loss", "sor_loss"):
        ax1.plot(its, [r[key] for r in log], label=key, linewidth=0.8)
    ax1.set_ylabel("loss")
    ax1.legend(frameon=False)
    ax2.plot(its, [r["lr"] for r in log], color="tab:gray")
    ax2.set_ylabel("learning rate")
    ax2.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def metrics_summary(report: MetricsReport, path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    labels = ["SOR", "MAE"]
    values = [report.sor if report.sor is not None else 0.0, report.mae]
    bars = ax1.bar(labels, values, color=["tab:blue", "tab:orange"])
    ax1.bar_label(bars, fmt="%.3f")
    ax1.set_ylim(0, 1)
    ax1.set_title(f"images used: {report.images_used}/{report.n_images}")
    per = [r["sor"] for r in report.per_image if r["sor"] is not None]
    if per:
        ax2.hist(per, bins=20, range=(0, 1), color="tab:blue")
    ax2.set_xlabel("per-image SOR")
    ax2.set_ylabel("images")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def rank_map_gallery(scenes, predictions, path, n: int = 4) -> None:
    """Image / ground-truth map / predicted map for the first n scenes."""
    n = min(n, len(scenes))
    fig, axes = plt.subplots(n, 3, figsize=(7.5, 2.2 * n), squeeze=False)
    for row in range(n):
        scene = scenes[row]
        h, w = scene.image.shape[1:]
        by_id = {m.id: m for m in scene.instances}
        gt_entries = [{"bbox": by_id[i].bbox, "rank": r}
                      for i, r in scene.gt_rank.items()]
        axes[row][0].imshow(np.transpose(scene.image, (1, 2, 0)))
        axes[row][1].imshow(render_rank_map(gt_entries, w, h), cmap="magma",
                            vmin=0, vmax=1)
        axes[row][2].imshow(render_rank_map(predictions[row], w, h),
                            cmap="magma", vmin=0, vmax=1)
        for ax in axes[row]:
            ax.set_xticks([])
            ax.set_yticks([])
    axes[0][0].set_title("scene")
    axes[0][1].set_title("gt ranks")
    axes[0][2].set_title("predicted ranks")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def ablation_chart(rows: list[dict], path) -> None:
    """Horizontal SOR bars, one per ablation cell, grouped by table."""
    ok = [r for r in rows if r.get("sor") not in (None, "")]
    fig, ax = plt.subplots(figsize=(7, 0.45 * max(len(ok), 4) + 1.2))
    labels = [f"{r['group']}: {r['cell']}" for r in ok]
    values = [float(r["sor"]) for r in ok]
    bars = ax.barh(range(len(ok)), values, color="tab:blue")
    ax.bar_label(bars, fmt="%.3f", padding=2)
    ax.set_yticks(range(len(ok)), labels)
    ax.invert_yaxis()
    ax.set_xlim(0, 1)
    ax.set_xlabel("SOR")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
