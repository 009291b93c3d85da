"""Report figures rendered next to the CSV / JSON outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}
SEEN_COLOR = "#1f77b4"
NOVEL_COLOR = "#d62728"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _column(rows, key):
    return np.array([float(r[key]) for r in rows])


def plot_training_curves(history, path) -> Path:
    """Loss components and test accuracies per epoch."""
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(9, 3.4))
        if history:
            ep = _column(history, "epoch")
            for key in ("L_ce_l", "L_ce_u", "L_diff", "L_adv_G", "L_adv_D"):
                vals = _column(history, key)
                if np.any(vals != 0):
                    ax_l.plot(ep, vals, label=key)
            for key, color in (("seen_acc", SEEN_COLOR), ("unseen_acc", NOVEL_COLOR), ("all_acc", "k")):
                ax_a.plot(ep, 100 * _column(history, key), label=key.replace("_acc", ""), color=color)
        ax_l.set(xlabel="epoch", ylabel="loss", title="training losses")
        ax_a.set(xlabel="epoch", ylabel="accuracy (%)", title="test accuracy", ylim=(0, 100))
        for ax in (ax_l, ax_a):
            if ax.lines:
                ax.legend()
        return _save(fig, path)


def _by_class(pseudo_rows, key):
    classes = sorted({int(r["class_id"]) for r in pseudo_rows})
    epochs = sorted({int(r["epoch"]) for r in pseudo_rows})
    grid = np.full((len(classes), len(epochs)), np.nan)
    for r in pseudo_rows:
        grid[classes.index(int(r["class_id"])), epochs.index(int(r["epoch"]))] = float(r[key])
    return classes, np.array(epochs), grid


def plot_pseudo_telemetry(pseudo_rows, seen, path) -> Path:
    """Per-class mean pseudo-label confidence and pseudo-label accuracy."""
    seen = {int(s) for s in seen}
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.4), sharex=True)
        for ax, key, title in (
            (axes[0], "mean_confidence", "mean pseudo-label confidence"),
            (axes[1], "pseudo_label_accuracy", "pseudo-label accuracy"),
        ):
            if pseudo_rows:
                classes, epochs, grid = _by_class(pseudo_rows, key)
                for c, row in zip(classes, grid):
                    is_seen = c in seen
                    ax.plot(epochs, row, color=SEEN_COLOR if is_seen else NOVEL_COLOR,
                            linestyle="-" if is_seen else "--", alpha=0.8,
                            label=f"class {c} ({'seen' if is_seen else 'novel'})")
                ax.legend(fontsize=7, ncol=2)
            ax.set(xlabel="epoch", title=title, ylim=(0, 1.02))
        return _save(fig, path)


def plot_ablation(rows, path, metrics=("seen_acc", "unseen_acc", "all_acc")) -> Path:
    """Grouped bars of mean accuracy per variant with seed spread as error bars.

    ``rows`` holds dicts with ``variant`` plus ``<metric>_mean`` / ``<metric>_std``.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(rows) + 2), 3.6))
        x = np.arange(len(rows))
        width = 0.8 / len(metrics)
        colors = (SEEN_COLOR, NOVEL_COLOR, "0.3")
        for i, m in enumerate(metrics):
            means = [100 * float(r[f"{m}_mean"]) for r in rows]
            stds = [100 * float(r[f"{m}_std"]) for r in rows]
            ax.bar(x + (i - (len(metrics) - 1) / 2) * width, means, width, yerr=stds, capsize=2,
                   label=m.replace("_acc", ""), color=colors[i % len(colors)])
        ax.set_xticks(x, [r["variant"] for r in rows], rotation=20, ha="right")
        ax.set(ylabel="accuracy (%)", ylim=(0, 100), title="ablation")
        ax.legend()
        return _save(fig, path)


def plot_confusion(confusion, path, seen=()) -> Path:
    conf = np.asarray(confusion, dtype=float)
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(3.8, 3.4))
        im = ax.imshow(conf, cmap="Blues")
        k = conf.shape[0]
        for i in range(k):
            for j in range(k):
                ax.text(j, i, f"{int(conf[i, j])}", ha="center", va="center", fontsize=7,
                        color="white" if conf[i, j] > conf.max() / 2 else "black")
        ax.set(xlabel="aligned prediction", ylabel="true class", title="confusion",
               xticks=range(k), yticks=range(k))
        if len(seen):
            ax.axhline(len(seen) - 0.5, color="k", lw=0.8)
            ax.axvline(len(seen) - 0.5, color="k", lw=0.8)
        fig.colorbar(im, ax=ax, fraction=0.046)
        return _save(fig, path)
