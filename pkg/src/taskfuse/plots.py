"""Static figure rendering from the emitted CSV files.

Renders accuracy-versus-task-count curves (one panel per regime, one line
per defense mode, shaded one-standard-deviation bands across combinations)
and per-regime cosine-similarity heatmaps. Files go next to the CSVs.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_MODE_STYLE = {
    "none": dict(color="tab:red", marker="o"),
    "freeze_only": dict(color="tab:orange", marker="s"),
    "realign_only": dict(color="tab:purple", marker="^"),
    "full": dict(color="tab:green", marker="D"),
}


def _read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader)


def render_accuracy_curves(outdir) -> list[str]:
    path = os.path.join(outdir, "summary.csv")
    if not os.path.exists(path):
        return []
    rows = _read_csv(path)
    regimes = sorted({r["regime"] for r in rows})
    written = []
    for regime in regimes:
        fig, ax = plt.subplots(figsize=(5.5, 3.8))
        sub = [r for r in rows if r["regime"] == regime]
        for mode in ("none", "freeze_only", "realign_only", "full"):
            pts = sorted((int(r["n_tasks"]), float(r["mean_norm_acc"]),
                          float(r["var_pooled"]))
                         for r in sub if r["defense_mode"] == mode)
            if not pts:
                continue
            n = np.array([p[0] for p in pts])
            mean = np.array([p[1] for p in pts])
            sd = np.sqrt(np.array([p[2] for p in pts]))
            style = _MODE_STYLE[mode]
            ax.plot(n, mean, label=mode, lw=1.5, ms=4, **style)
            ax.fill_between(n, mean - sd, mean + sd, alpha=0.18,
                            color=style["color"])
        ax.set_xlabel("number of fused tasks")
        ax.set_ylabel("mean normalized accuracy")
        ax.set_title(f"fusion performance, {regime}")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        out = os.path.join(outdir, f"accuracy_vs_n_{regime}.png")
        fig.savefig(out, dpi=150)
        plt.close(fig)
        written.append(out)
    return written


def render_cosine_heatmaps(outdir) -> list[str]:
    written = []
    for name in sorted(os.listdir(outdir)):
        if not (name.startswith("cosine_") and name.endswith(".csv")):
            continue
        rows = _read_csv(os.path.join(outdir, name))
        if not rows:
            continue
        ids = [k for k in rows[0].keys() if k != "task_id"]
        M = np.array([[float(r[c]) for c in ids] for r in rows])
        fig, ax = plt.subplots(figsize=(4.8, 4.2))
        im = ax.imshow(M, vmin=-1.0, vmax=1.0, cmap="coolwarm")
        ax.set_xticks(range(len(ids)), ids, rotation=60, fontsize=7, ha="right")
        ax.set_yticks(range(len(ids)), ids, fontsize=7)
        for i in range(len(ids)):
            for j in range(len(ids)):
                ax.text(j, i, f"{M[i, j]:.2f}", ha="center", va="center",
                        fontsize=6)
        regime = name[len("cosine_"):-len(".csv")]
        ax.set_title(f"task-vector cosine similarity, {regime}", fontsize=9)
        fig.colorbar(im, shrink=0.8)
        fig.tight_layout()
        out = os.path.join(outdir, f"cosine_{regime}.png")
        fig.savefig(out, dpi=150)
        plt.close(fig)
        written.append(out)
    return written


def render_ablation(outdir) -> list[str]:
    path = os.path.join(outdir, "ablation.csv")
    if not os.path.exists(path):
        return []
    rows = _read_csv(path)
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for mode in ("none", "freeze_only", "realign_only", "full"):
        agg = {}
        for r in rows:
            if r["defense_mode"] != mode:
                continue
            agg.setdefault(int(r["fewshot_per_class"]), []).append(
                float(r["mean_norm_acc"]))
        if not agg:
            continue
        xs = sorted(agg)
        ys = [float(np.mean(agg[x])) for x in xs]
        ax.plot(xs, ys, label=mode, lw=1.5, ms=4, **_MODE_STYLE[mode])
    ax.set_xlabel("few-shot samples per class")
    ax.set_ylabel("mean normalized accuracy")
    ax.set_title("defense ablation")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out = os.path.join(outdir, "ablation.png")
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return [out]


def render_all(outdir) -> list[str]:
    return (render_accuracy_curves(outdir) + render_cosine_heatmaps(outdir)
            + render_ablation(outdir))
