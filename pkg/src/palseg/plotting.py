"""Report figures written next to the JSON outputs of the command-line tool."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import IouReport  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_confusion(counts: np.ndarray, names, path, normalize: bool = True) -> Path:
    counts = np.asarray(counts, dtype=np.float64)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(names), 1.0 + 0.8 * len(names)))
        shown = counts / np.maximum(counts.sum(1, keepdims=True), 1) if normalize else counts
        im = ax.imshow(shown, cmap="Blues", vmin=0, vmax=1 if normalize else None)
        ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
        ax.set_yticks(range(len(names)), names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("ground truth")
        for (r, c), v in np.ndenumerate(shown):
            ax.text(c, r, f"{v:.2f}" if normalize else f"{int(v)}", ha="center", va="center",
                    color="white" if v > 0.6 * shown.max() else "black", fontsize=8)
        fig.colorbar(im, ax=ax, fraction=0.046)
        ax.set_title("confusion (row-normalized)" if normalize else "confusion")
        return _save(fig, path)


def plot_iou(report: IouReport, path, colors=None) -> Path:
    vals = [np.nan if v is None else 100 * v for v in report.per_class]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.5 + 0.8 * len(vals), 3))
        bar_colors = None
        if colors is not None:
            bar_colors = [np.array(c) / 255 * 0.8 + 0.1 for c in colors]
        ax.bar(report.names, vals, color=bar_colors, edgecolor="black", linewidth=0.6)
        ax.axhline(100 * report.mean_iou, color="k", ls="--", lw=0.8, label=f"mean {100 * report.mean_iou:.2f}%")
        ax.set_ylim(0, 100)
        ax.set_ylabel("IoU (%)")
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)


def plot_training(records: list[dict], path) -> Path:
    epochs = [r for r in records if r.get("type") == "epoch"]
    steps = [r for r in records if r.get("type") == "step"]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(10, 2.8))
        axes[0].plot([r["step"] for r in steps], [r["loss"] for r in steps], lw=0.8)
        axes[0].set_xlabel("step")
        axes[0].set_ylabel("loss")
        axes[0].set_yscale("log")
        e = [r["epoch"] for r in epochs]
        axes[1].plot(e, [r["lr_head"] for r in epochs], label="head")
        axes[1].plot(e, [r["lr_encoder"] for r in epochs], label="encoder")
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("learning rate")
        axes[1].legend(frameon=False)
        if any("test_miou" in r for r in epochs):
            axes[2].plot([r["epoch"] for r in epochs if "test_miou" in r],
                         [100 * r["test_miou"] for r in epochs if "test_miou" in r], marker=".")
            axes[2].set_ylabel("test mIoU (%)")
        else:
            axes[2].text(0.5, 0.5, "no test split", ha="center", va="center", transform=axes[2].transAxes)
        axes[2].set_xlabel("epoch")
        fig.tight_layout()
        return _save(fig, path)


def plot_latency(result: dict, path) -> Path:
    ms = np.asarray(result["samples_ms"])
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 2.8))
        ax.plot(np.arange(1, len(ms) + 1), ms, marker="o", lw=0.8)
        ax.axhline(result["latency_ms"]["mean"], color="k", ls="--", lw=0.8)
        ax.set_xlabel("run")
        ax.set_ylabel("latency (ms)")
        shape = "x".join(str(v) for v in result["input_shape"])
        ax.set_title(f"{shape}: {result['fps']:.2f} FPS")
        return _save(fig, path)


def plot_unfold(raw: np.ndarray, unfolded: np.ndarray, valid: np.ndarray, path) -> Path:
    """Raw annulus, unfolded panorama and its validity mask stacked vertically."""
    with plt.rc_context(RC):
        fig = plt.figure(figsize=(8, 7))
        gs = fig.add_gridspec(3, 1, height_ratios=[3, 1, 1])
        panels = [(raw, "raw annular image"), (unfolded, "unfolded panorama"), (valid, "valid samples")]
        for k, (img, title) in enumerate(panels):
            ax = fig.add_subplot(gs[k])
            ax.imshow(img, cmap="gray" if np.ndim(img) == 2 else None, aspect="equal")
            ax.set_title(title)
            ax.set_axis_off()
        return _save(fig, path)
