"""Training loop: Adam with cosine-annealed learning rate and a slower encoder group."""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import data as D
from .checkpoint import load_into, read_tensors, save_checkpoint
from .metrics import ConfusionMatrix, IouReport, iou
from .model import OUTPUT_STRIDE, ModelConfig, SegNet, build_model, param_groups

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


class AllIgnoredWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    lr_head: float = 5e-4
    lr_min: float = 5e-6
    weight_decay: float = 1e-4
    encoder_lr_divisor: float = 4.0
    epochs: int = 100
    batch_size: int = 6
    seed: int = 0
    crop: tuple[int, int] = (512, 512)
    scale_range: tuple[float, float] = (0.5, 2.0)
    flip_prob: float = 0.5
    augment: bool = True
    decoupled_weight_decay: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    ignore_id: int = D.IGNORE_ID
    eval_batch_size: int = 2

    def __post_init__(self):
        self.crop = tuple(self.crop)
        self.scale_range = tuple(self.scale_range)
        self.betas = tuple(self.betas)
        if not 0 < self.lr_min <= self.lr_head:
            raise ValueError(f"need 0 < lr_min <= lr_head, got lr_min={self.lr_min}, lr_head={self.lr_head}")
        if self.encoder_lr_divisor <= 0:
            raise ValueError("encoder_lr_divisor must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        self.augment_config()  # validates crop and scale range

    def augment_config(self) -> D.AugmentConfig:
        return D.AugmentConfig(self.crop, self.scale_range, self.flip_prob, self.ignore_id)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {', '.join(sorted(unknown))}")
        return cls(**d)


def load_run_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Read ``{"model": {...}, "train": {...}}``; a ``"preset"`` key in model picks tiny/resnet18 defaults."""
    raw = json.loads(Path(path).read_text())
    m = dict(raw.get("model", {}))
    preset = m.pop("preset", None)
    if preset == "tiny-test":
        mcfg = ModelConfig.tiny(**m)
    elif preset in (None, "resnet18"):
        mcfg = ModelConfig.from_dict(m) if m else ModelConfig.resnet18()
    else:
        raise ValueError(f"unknown model preset {preset!r}")
    return mcfg, TrainConfig.from_dict(raw.get("train", {}))


def cosine_lr(epoch: int, cfg: TrainConfig) -> tuple[float, float]:
    """Head and encoder learning rates for ``epoch``; pinned to lr_head at 0 and lr_min at the end."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        lr = cfg.lr_head
    else:
        lr = cfg.lr_min + 0.5 * (cfg.lr_head - cfg.lr_min) * (1 + math.cos(math.pi * epoch / (cfg.epochs - 1)))
    return lr, lr / cfg.encoder_lr_divisor


def make_optimizer(model: SegNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    enc, head = param_groups(model)
    lr_h, lr_e = cosine_lr(0, cfg)
    groups = [
        {"params": enc, "lr": lr_e, "weight_decay": cfg.weight_decay / cfg.encoder_lr_divisor, "name": "encoder"},
        {"params": head, "lr": lr_h, "weight_decay": cfg.weight_decay, "name": "head"},
    ]
    opt_cls = torch.optim.AdamW if cfg.decoupled_weight_decay else torch.optim.Adam
    return opt_cls(groups, betas=cfg.betas, eps=cfg.eps)


def set_epoch_lr(optimizer: torch.optim.Optimizer, epoch: int, cfg: TrainConfig) -> tuple[float, float]:
    lr_h, lr_e = cosine_lr(epoch, cfg)
    for g in optimizer.param_groups:
        g["lr"] = lr_e if g.get("name") == "encoder" else lr_h
    return lr_h, lr_e


def seg_loss(logits: torch.Tensor, labels: torch.Tensor, ignore_id: int = D.IGNORE_ID) -> torch.Tensor:
    """Mean pixel cross-entropy over non-ignored pixels; zero (with a warning) if all are ignored."""
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    if not (labels != ignore_id).any():
        warnings.warn("every pixel in the batch is ignored; loss defined as 0", AllIgnoredWarning, stacklevel=2)
        return logits.sum() * 0.0
    return F.cross_entropy(logits, labels, ignore_index=ignore_id)


def train_step(model: SegNet, batch, optimizer: torch.optim.Optimizer, ignore_id: int = D.IGNORE_ID, batch_ids=()):
    images, labels = batch
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = seg_loss(model(images), labels, ignore_id)
    if not torch.isfinite(loss):
        lrs = {g.get("name", i): g["lr"] for i, g in enumerate(optimizer.param_groups)}
        raise NonFiniteLossError(f"non-finite loss {loss.item()} (lr={lrs}, batch={list(batch_ids)})")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def pad_to_stride(images: torch.Tensor, labels: torch.Tensor | None, ignore_id: int, stride: int = OUTPUT_STRIDE):
    h, w = images.shape[-2:]
    ph, pw = -h % stride, -w % stride
    if ph or pw:
        images = F.pad(images, (0, pw, 0, ph))
        if labels is not None:
            labels = F.pad(labels, (0, pw, 0, ph), value=ignore_id)
    return images, labels


@torch.no_grad()
def evaluate(model: SegNet, samples: list[D.SegSample], catalog: D.ClassCatalog, batch_size: int = 2) -> tuple[IouReport, ConfusionMatrix]:
    model.eval()
    ignore = catalog.ignore_id if catalog.ignore_id is not None else -1
    cm = ConfusionMatrix(catalog.num_classes)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        shapes = {s.label.shape for s in chunk}
        groups = [chunk] if len(shapes) == 1 else [[s] for s in chunk]
        for group in groups:
            images, labels = D.collate(group, ignore)
            images, labels = pad_to_stride(images, labels, ignore)
            pred = model(images).argmax(1)
            cm.update(pred, labels, ignore)
    return iou(cm, catalog.names), cm


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0]).permutation(n)


def _aug_seed(seed: int, epoch: int, index: int):
    return np.random.default_rng([seed, epoch, 1, index])


@dataclass
class FitResult:
    out_dir: Path
    best_metric: float
    last_epoch: int
    history: list[dict] = field(default_factory=list)

    @property
    def best_checkpoint(self) -> Path:
        return self.out_dir / "best.ckpt"

    @property
    def last_checkpoint(self) -> Path:
        return self.out_dir / "last.ckpt"


STATE_FILE = "train_state.pt"
LOG_FILE = "train_log.jsonl"


def fit(
    model: SegNet,
    train_samples: list[D.SegSample],
    cfg: TrainConfig,
    out_dir,
    test_samples: list[D.SegSample] | None = None,
    catalog: D.ClassCatalog = D.AERIAL_PASS,
    resume: bool = False,
    max_epochs: int | None = None,
) -> FitResult:
    """Run the epoch loop, writing checkpoints and a JSON-lines log under ``out_dir``.

    Each epoch's sample order and augmentation draws depend only on
    ``(cfg.seed, epoch)``, so a resumed run replays the same schedule.
    ``max_epochs`` stops early (the schedule still spans ``cfg.epochs``).
    """
    if not train_samples:
        raise ValueError("training set is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = make_optimizer(model, cfg)
    start_epoch, best, step = 0, -math.inf, 0
    history: list[dict] = []
    log_path = out_dir / LOG_FILE
    if resume:
        state_path = out_dir / STATE_FILE
        if not (state_path.is_file() and (out_dir / "last.ckpt").is_file()):
            raise FileNotFoundError(f"nothing to resume in {out_dir}")
        tensors, _ = read_tensors(out_dir / "last.ckpt")
        load_into(model, tensors)
        state = torch.load(state_path, map_location="cpu", weights_only=False)
        optimizer.load_state_dict(state["optimizer"])
        start_epoch, best, step = state["epoch"] + 1, state["best_metric"], state["global_step"]
    elif log_path.exists():
        log_path.unlink()

    test_samples = test_samples or []
    ignore = cfg.ignore_id
    aug_cfg = cfg.augment_config()
    n = len(train_samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    end_epoch = cfg.epochs if max_epochs is None else min(cfg.epochs, start_epoch + max_epochs)
    epoch = start_epoch - 1
    with open(log_path, "a") as logf:
        for epoch in range(start_epoch, end_epoch):
            lr_h, lr_e = set_epoch_lr(optimizer, epoch, cfg)
            order = _epoch_order(cfg.seed, epoch, n)
            losses = []
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                chunk = [train_samples[i] for i in idx]
                if cfg.augment:
                    chunk = [D.augment(s, _aug_seed(cfg.seed, epoch, int(i)), aug_cfg) for s, i in zip(chunk, idx)]
                batch = D.collate(chunk, ignore)
                loss = train_step(model, batch, optimizer, ignore, [s.id for s in chunk])
                losses.append(loss)
                step += 1
                logf.write(json.dumps({"type": "step", "epoch": epoch, "step": step, "loss": loss}) + "\n")
            record = {
                "type": "epoch",
                "epoch": epoch,
                "steps": step,
                "loss": float(np.mean(losses)),
                "lr_head": lr_h,
                "lr_encoder": lr_e,
            }
            if test_samples:
                report, _ = evaluate(model, test_samples, catalog, cfg.eval_batch_size)
                metric = report.mean_iou
                record["test_miou"] = metric
            else:
                metric = -record["loss"]
            improved = metric > best
            if improved:
                best = metric
                save_checkpoint(model, out_dir / "best.ckpt", {"epoch": epoch, "metric": metric, "catalog": catalog.to_dict()})
            save_checkpoint(model, out_dir / "last.ckpt", {"epoch": epoch, "metric": metric, "catalog": catalog.to_dict()})
            torch.save(
                {"optimizer": optimizer.state_dict(), "epoch": epoch, "best_metric": best, "global_step": step},
                out_dir / STATE_FILE,
            )
            record["time"] = time.time()
            history.append(record)
            logf.write(json.dumps(record) + "\n")
            logf.flush()
            log.info("epoch %d loss %.4f lr %.2e%s", epoch, record["loss"], lr_h,
                     f" mIoU {record['test_miou']:.4f}" if "test_miou" in record else "")
    return FitResult(out_dir=out_dir, best_metric=best, last_epoch=epoch, history=history)


def read_log(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


def run_config_dict(mcfg: ModelConfig, tcfg: TrainConfig) -> dict:
    return {"model": mcfg.to_dict(), "train": asdict(tcfg)}


def build_and_fit(mcfg: ModelConfig, tcfg: TrainConfig, manifest: D.DatasetManifest, out_dir, resume=False) -> FitResult:
    model = build_model(mcfg, tcfg.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(run_config_dict(mcfg, tcfg), indent=2))
    return fit(
        model,
        D.load_split(manifest, "train"),
        tcfg,
        out_dir,
        test_samples=D.load_split(manifest, "test"),
        catalog=manifest.catalog,
        resume=resume,
    )
