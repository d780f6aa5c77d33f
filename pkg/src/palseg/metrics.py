"""Confusion-matrix IoU metrics and a forward-pass throughput benchmark."""

from __future__ import annotations

import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    num_classes: int
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, pred, gt, ignore_id: int | None = 255) -> "ConfusionMatrix":
        pred = _as_numpy(pred).astype(np.int64, copy=False)
        gt = _as_numpy(gt).astype(np.int64, copy=False)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        keep = gt != ignore_id if ignore_id is not None else np.ones(gt.shape, bool)
        g, p = gt[keep], pred[keep]
        k = self.num_classes
        for name, arr in (("ground truth", g), ("prediction", p)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                bad = arr[(arr < 0) | (arr >= k)][0]
                raise ValueError(f"{name} class {bad} outside [0, {k})")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def pixel_accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")


def _as_numpy(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


@dataclass
class IouReport:
    names: list[str]
    per_class: list[float | None]
    mean_iou: float
    pixel_accuracy: float
    num_pixels: int
    undefined: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class": dict(zip(self.names, self.per_class)),
            "mean_iou": self.mean_iou,
            "pixel_accuracy": self.pixel_accuracy,
            "num_pixels": self.num_pixels,
            "undefined": self.undefined,
        }

    def format_row(self, label: str = "model") -> str:
        """One table row of percentages, e.g. ``model | 67.67% | 99.06% | 92.16% | 86.30%``."""
        cells = ["n/a" if v is None else f"{100 * v:.2f}%" for v in self.per_class]
        return " | ".join([label, *cells, f"{100 * self.mean_iou:.2f}%"])


def iou(cm: ConfusionMatrix, names=None) -> IouReport:
    """Per-class ``TP / (TP + FP + FN)``; classes with empty union are left undefined."""
    k = cm.num_classes
    names = list(names) if names is not None else [str(c) for c in range(k)]
    tp = np.diag(cm.counts)
    union = cm.counts.sum(0) + cm.counts.sum(1) - tp
    per_class: list[float | None] = []
    for c in range(k):
        per_class.append(float(tp[c] / union[c]) if union[c] > 0 else None)
    defined = [v for v in per_class if v is not None]
    return IouReport(
        names=names,
        per_class=per_class,
        mean_iou=float(sum(defined) / len(defined)) if defined else float("nan"),
        pixel_accuracy=cm.pixel_accuracy(),
        num_pixels=cm.total,
        undefined=[n for n, v in zip(names, per_class) if v is None],
    )


@torch.no_grad()
def predict_labels(model, images: torch.Tensor) -> torch.Tensor:
    model.eval()
    return model(images).argmax(1)


def _sync(device: torch.device) -> None:
    if device.type == "cuda":
        torch.cuda.synchronize(device)


def device_description(device: torch.device) -> str:
    if device.type == "cuda":
        return f"cuda:{torch.cuda.get_device_name(device)}"
    return f"cpu:{platform.processor() or platform.machine()} threads={torch.get_num_threads()}"


@torch.no_grad()
def benchmark(model, input_shape, warmup: int = 2, runs: int = 10, device=None) -> dict:
    """Time forward passes on random input; returns latency stats and FPS = 1 / mean latency."""
    if runs < 1:
        raise ValueError("runs must be at least 1")
    device = torch.device(device) if device is not None else next(model.parameters()).device
    model.eval()
    x = torch.randn(*input_shape, device=device)
    try:
        for _ in range(warmup):
            model(x)
        _sync(device)
        times = []
        for _ in range(runs):
            t0 = time.perf_counter()
            model(x)
            _sync(device)
            times.append(time.perf_counter() - t0)
    except Exception as exc:
        raise RuntimeError(f"forward failed for input shape {tuple(input_shape)}: {exc}") from exc
    ms = np.array(times) * 1e3
    mean = float(ms.mean())
    return {
        "latency_ms": {
            "mean": mean,
            "p50": float(np.percentile(ms, 50)),
            "p95": float(np.percentile(ms, 95)),
            "min": float(ms.min()),
            "stdev": float(statistics.pstdev(ms.tolist())),
        },
        "fps": 1e3 / mean,
        "runs": runs,
        "warmup": warmup,
        "device": device_description(device),
        "input_shape": list(input_shape),
        "samples_ms": ms.tolist(),
    }
