"""Figure rendering for the report paths.

Every CLI command that emits delimited output (metric tables, the ablation
ladder, heatmap grids, training logs) also renders a matplotlib figure next
to it, so a run directory is inspectable without further tooling.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save_atomic(fig, path) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp.png"
    fig.savefig(tmp, dpi=130)
    os.replace(tmp, path)
    plt.close(fig)


def save_metrics_figure(rows: list[dict], path: str | os.PathLike) -> None:
    """Grouped bars of recall/mrr/ndcg/hitrate per K for one or more splits."""
    splits = sorted({r["split"] for r in rows})
    metrics = ("recall", "mrr", "ndcg", "hitrate")
    fig, axes = plt.subplots(1, len(splits), figsize=(4.2 * len(splits), 3.2), squeeze=False)
    for ax, split in zip(axes[0], splits):
        split_rows = sorted((r for r in rows if r["split"] == split), key=lambda r: r["K"])
        ks = [r["K"] for r in split_rows]
        x = np.arange(len(ks))
        width = 0.2
        for i, metric in enumerate(metrics):
            ax.bar(x + (i - 1.5) * width, [r[metric] for r in split_rows], width, label=metric)
        ax.set_xticks(x, [f"@{k}" for k in ks])
        ax.set_ylim(0, 1.05)
        ax.set_title(split)
        ax.grid(axis="y", alpha=0.3)
    axes[0][0].set_ylabel("metric value")
    axes[0][-1].legend(fontsize=8)
    fig.tight_layout()
    _save_atomic(fig, path)


def save_ladder_figure(rows: list[dict], path: str | os.PathLike, k: int = 1) -> None:
    """Recall@k per ladder rung, one line per split, seeds averaged."""
    rungs = sorted({(r["rung"], r["rung_name"]) for r in rows})
    splits = sorted({r["split"] for r in rows})
    fig, ax = plt.subplots(figsize=(6.4, 3.4))
    for split in splits:
        ys = []
        for rung, _ in rungs:
            vals = [r["recall"] for r in rows
                    if r["rung"] == rung and r["split"] == split and r["K"] == k]
            ys.append(float(np.mean(vals)) if vals else np.nan)
        ax.plot(range(len(rungs)), ys, marker="o", label=split)
    ax.set_xticks(range(len(rungs)), [name for _, name in rungs], rotation=30, ha="right")
    ax.set_ylabel(f"recall@{k}")
    ax.set_xlabel("cumulative configuration")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save_atomic(fig, path)


def save_heatmap_figure(grid: np.ndarray, path: str | os.PathLike,
                        title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = ax.imshow(grid, cmap="viridis")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    _save_atomic(fig, path)


def save_loss_figure(log_lines: list[str], path: str | os.PathLike) -> None:
    """Loss components over steps parsed back from the plain-text log lines."""
    steps, series = [], {}
    for line in log_lines:
        fields = dict(part.split("=", 1) for part in line.split())
        steps.append(int(fields["step"]))
        for key, val in fields.items():
            if key in ("step", "lr"):
                continue
            series.setdefault(key, []).append(float(val))
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    for name, vals in series.items():
        ax.plot(steps, vals, label=name, linewidth=1.2 if name == "total" else 0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8, ncol=3)
    fig.tight_layout()
    _save_atomic(fig, path)
