"""Matplotlib figures written next to the CSV outputs of the command-line tools."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# Fixed metadata keeps the PNG bytes independent of the matplotlib version string.
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_training(rows: list[dict], path, title: str = "") -> Path:
    """Loss and held-out R@1 against optimizer step, with phase boundaries marked."""
    steps = [r["step"] for r in rows]
    fig, (ax_loss, ax_r1) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(steps, [r["loss"] for r in rows], marker=".")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("InfoNCE loss")
    ax_r1.plot(steps, [r["r1_i2t"] for r in rows], marker=".", label="R@1 image->text")
    ax_r1.plot(steps, [r["r1_t2i"] for r in rows], marker=".", label="R@1 text->image")
    ax_r1.plot(steps, [r["zs_acc"] for r in rows], marker=".", label="zero-shot acc")
    ax_r1.set_xlabel("step")
    ax_r1.set_ylabel("%")
    ax_r1.legend(fontsize=8)
    for prev, cur in zip(rows, rows[1:]):
        if prev["phase"] != cur["phase"]:
            for ax in (ax_loss, ax_r1):
                ax.axvline(cur["step"], color="gray", linestyle=":", linewidth=1)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_cost(rows: list[dict], path, label_key: str = "model", value_key: str = "gflops",
              reference_key: str | None = "reported", ylabel: str = "GFLOPs / example") -> Path:
    """Bar chart of computed cost, optionally beside a reference value per row."""
    labels = [str(r[label_key]) for r in rows]
    xs = range(len(rows))
    fig, ax = plt.subplots(figsize=(max(5, 1.3 * len(rows)), 4))
    width = 0.4 if reference_key else 0.8
    ax.bar([x - width / 2 if reference_key else x for x in xs], [r[value_key] for r in rows],
           width=width, label="model")
    if reference_key:
        ax.bar([x + width / 2 for x in xs], [r[reference_key] for r in rows], width=width,
               label="reference")
        ax.legend()
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    return _save(fig, path)


def plot_compare(rows: list[dict], path, metric: str = "zs_acc") -> Path:
    """Per-seed points and medians of ``metric`` for resize vs mask at each size."""
    sizes = sorted({r["size"] for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for offset, mode in ((-0.1, "resize"), (0.1, "mask")):
        seeds = [r for r in rows if r["mode"] == mode and r["seed"] != "median"]
        med = {r["size"]: r[metric] for r in rows if r["mode"] == mode and r["seed"] == "median"}
        pos = {s: i for i, s in enumerate(sizes)}
        ax.scatter([pos[r["size"]] + offset for r in seeds], [r[metric] for r in seeds], alpha=0.5)
        ax.plot([pos[s] + offset for s in sizes if s in med], [med[s] for s in sizes if s in med],
                marker="_", markersize=20, linestyle="none", label=f"{mode} (median)")
    ax.set_xticks(range(len(sizes)))
    ax.set_xticklabels([f"{s}px" for s in sizes])
    ax.set_xlabel("compute-matched training size")
    ax.set_ylabel(metric)
    ax.legend()
    return _save(fig, path)
