"""Dataset layout, validation, color coding and augmentation.

On-disk layout::

    root/manifest.json
    root/images/<id>.png      RGB panoramas
    root/labels/<id>.png      single channel, pixel value = class id
    root/masks/<id>.png       optional validity masks (nonzero = valid)

``manifest.json`` holds ``{"classes": [...], "ignore_id": 255, "samples":
[{"id", "image", "label", "mask"?, "split"}]}`` with paths relative to root.
Without a manifest, ``images/`` and ``labels/`` are paired by file stem and
ids listed in ``test.txt`` form the test split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


IGNORE_ID = 255
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SPLITS = ("train", "test")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ClassCatalog:
    names: tuple[str, ...]
    colors: tuple[tuple[int, int, int], ...]
    ignore_id: int | None = IGNORE_ID
    ignore_color: tuple[int, int, int] = (255, 255, 255)

    def __post_init__(self):
        if len(self.names) != len(self.colors):
            raise DatasetError("catalog names and colors differ in length")
        if len(self.names) < 1:
            raise DatasetError("catalog needs at least one class")
        if len(set(self.names)) != len(self.names):
            raise DatasetError("catalog class names must be unique")
        palette = [tuple(c) for c in self.colors]
        if self.ignore_id is not None:
            if self.ignore_id < len(self.names):
                raise DatasetError("ignore_id collides with a class id")
            palette.append(tuple(self.ignore_color))
        if len(set(palette)) != len(palette):
            raise DatasetError("catalog colors must be unique")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def to_dict(self) -> dict:
        return {
            "classes": [
                {"id": k, "name": n, "color": list(c)}
                for k, (n, c) in enumerate(zip(self.names, self.colors))
            ],
            "ignore_id": self.ignore_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassCatalog":
        entries = sorted(d["classes"], key=lambda e: e["id"])
        ids = [e["id"] for e in entries]
        if ids != list(range(len(entries))):
            raise DatasetError(f"class ids must be contiguous from 0, got {ids}")
        return cls(
            names=tuple(e["name"] for e in entries),
            colors=tuple(tuple(int(v) for v in e["color"]) for e in entries),
            ignore_id=d.get("ignore_id", IGNORE_ID),
        )


# track green, field red, "others" black; ignored pixels render white
AERIAL_PASS = ClassCatalog(
    names=("track", "field", "others"),
    colors=((0, 255, 0), (255, 0, 0), (0, 0, 0)),
)


@dataclass
class SegSample:
    image: np.ndarray  # HxWx3 float32 in [0, 1]
    label: np.ndarray  # HxW int64
    valid_mask: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.label.shape:
            raise DatasetError(
                f"sample {self.id!r}: image {self.image.shape[:2]} and label "
                f"{self.label.shape} differ in size"
            )


@dataclass
class ManifestEntry:
    id: str
    image: Path
    label: Path
    split: str
    mask: Path | None = None


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    catalog: ClassCatalog = AERIAL_PASS

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def __len__(self):
        return len(self.entries)

    def to_dict(self) -> dict:
        d = self.catalog.to_dict()
        d["samples"] = []
        for e in self.entries:
            item = {
                "id": e.id,
                "image": str(e.image.relative_to(self.root)),
                "label": str(e.label.relative_to(self.root)),
                "split": e.split,
            }
            if e.mask is not None:
                item["mask"] = str(e.mask.relative_to(self.root))
            d["samples"].append(item)
        return d

    def save(self) -> Path:
        path = self.root / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def _check_entries(entries: list[ManifestEntry]) -> None:
    seen: dict[str, str] = {}
    for e in entries:
        if e.split not in SPLITS:
            raise DatasetError(f"sample {e.id!r}: unknown split {e.split!r}")
        if e.id in seen:
            if seen[e.id] != e.split:
                raise DatasetError(f"sample {e.id!r} appears in both train and test splits")
            raise DatasetError(f"duplicate sample id {e.id!r}")
        seen[e.id] = e.split
        for p in (e.image, e.label, e.mask):
            if p is not None and not p.is_file():
                raise DatasetError(f"sample {e.id!r}: missing file {p}")


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    mpath = root / "manifest.json"
    if mpath.is_file():
        data = json.loads(mpath.read_text())
        catalog = ClassCatalog.from_dict(data) if "classes" in data else AERIAL_PASS
        entries = []
        for s in data.get("samples", []):
            entries.append(
                ManifestEntry(
                    id=str(s["id"]),
                    image=root / s["image"],
                    label=root / s["label"],
                    split=s.get("split", "train"),
                    mask=root / s["mask"] if s.get("mask") else None,
                )
            )
    else:
        images, labels = root / "images", root / "labels"
        if not (images.is_dir() and labels.is_dir()):
            raise DatasetError(f"{root}: no manifest.json and no images/ + labels/ layout")
        test_ids = set()
        if (root / "test.txt").is_file():
            test_ids = {ln.strip() for ln in (root / "test.txt").read_text().splitlines() if ln.strip()}
        catalog = AERIAL_PASS
        entries = []
        for img in sorted(images.glob("*.png")):
            mask = root / "masks" / img.name
            entries.append(
                ManifestEntry(
                    id=img.stem,
                    image=img,
                    label=labels / img.name,
                    split="test" if img.stem in test_ids else "train",
                    mask=mask if mask.is_file() else None,
                )
            )
    if not entries:
        raise DatasetError(f"{root}: dataset lists no samples")
    _check_entries(entries)
    return DatasetManifest(root=root, entries=entries, catalog=catalog)


def read_image(path) -> np.ndarray:
    """RGB PNG as float32 HxWx3 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def read_label(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise DatasetError(f"{path}: label must be single channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def write_png(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    elif arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating):
            arr = np.clip(np.rint(arr * 255.0), 0, 255)
        arr = arr.astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def load_sample(entry: ManifestEntry) -> SegSample:
    mask = None
    if entry.mask is not None:
        with Image.open(entry.mask) as im:
            mask = np.asarray(im.convert("L")) > 0
    return SegSample(
        image=read_image(entry.image),
        label=read_label(entry.label),
        valid_mask=mask,
        id=entry.id,
    )


def load_split(manifest: DatasetManifest, split: str) -> list[SegSample]:
    return [load_sample(e) for e in manifest.split(split)]


def validate_sample(s: SegSample, catalog: ClassCatalog) -> dict:
    """Report label-range violations, size mismatches and per-class pixel counts."""
    violations = []
    if s.image.shape[:2] != s.label.shape:
        violations.append(f"image size {s.image.shape[:2]} != label size {s.label.shape}")
    if s.valid_mask is not None and s.valid_mask.shape != s.label.shape:
        violations.append(f"mask size {s.valid_mask.shape} != label size {s.label.shape}")
    values, counts = np.unique(s.label, return_counts=True)
    allowed = set(range(catalog.num_classes))
    if catalog.ignore_id is not None:
        allowed.add(catalog.ignore_id)
    for v, c in zip(values.tolist(), counts.tolist()):
        if v not in allowed:
            violations.append(f"label value {v} outside catalog ({c} pixels)")
    hist = np.bincount(
        s.label[(s.label >= 0) & (s.label < catalog.num_classes)].ravel(),
        minlength=catalog.num_classes,
    )
    ignored = int((s.label == catalog.ignore_id).sum()) if catalog.ignore_id is not None else 0
    return {
        "id": s.id,
        "ok": not violations,
        "violations": violations,
        "class_counts": {n: int(c) for n, c in zip(catalog.names, hist)},
        "ignored": ignored,
    }


def validate_dataset(manifest: DatasetManifest) -> dict:
    reports = [validate_sample(load_sample(e), manifest.catalog) for e in manifest.entries]
    totals = {n: 0 for n in manifest.catalog.names}
    for r in reports:
        for n, c in r["class_counts"].items():
            totals[n] += c
    return {
        "root": str(manifest.root),
        "ok": all(r["ok"] for r in reports),
        "num_samples": len(reports),
        "splits": {s: len(manifest.split(s)) for s in SPLITS},
        "class_counts": totals,
        "samples": reports,
    }


def colorize(label: np.ndarray, catalog: ClassCatalog) -> np.ndarray:
    label = np.asarray(label)
    lut = np.zeros((max(256, catalog.num_classes), 3), dtype=np.uint8)
    lut[: catalog.num_classes] = catalog.colors
    known = (label >= 0) & (label < catalog.num_classes)
    if catalog.ignore_id is not None:
        lut[catalog.ignore_id] = catalog.ignore_color
        known |= label == catalog.ignore_id
    if not known.all():
        y, x = np.argwhere(~known)[0]
        raise DatasetError(f"label value {label[y, x]} at (row={y}, col={x}) not in catalog")
    return lut[label]


def decode_color(rgb: np.ndarray, catalog: ClassCatalog) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.int64)[..., :3]
    key = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
    out = np.full(key.shape, -1, dtype=np.int64)
    palette = list(enumerate(catalog.colors))
    if catalog.ignore_id is not None:
        palette.append((catalog.ignore_id, catalog.ignore_color))
    for cid, (r, g, b) in palette:
        out[key == ((r << 16) | (g << 8) | b)] = cid
    if (out < 0).any():
        y, x = np.argwhere(out < 0)[0]
        raise DatasetError(f"unknown color {tuple(rgb[y, x])} at (row={y}, col={x})")
    return out


@dataclass(frozen=True)
class AugmentConfig:
    crop: tuple[int, int] = (512, 512)
    scale_range: tuple[float, float] = (0.5, 2.0)
    flip_prob: float = 0.5
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"scale range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if min(self.crop) < 1:
            raise ValueError("crop size must be positive")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be a probability")


@dataclass(frozen=True)
class AugmentParams:
    """Recorded geometric transform: resize, optional flip, then crop/pad."""

    scale: float
    flip: bool
    top: int
    left: int
    scaled_size: tuple[int, int]
    crop: tuple[int, int]


def sample_augment_params(shape: tuple[int, int], rng: np.random.Generator, cfg: AugmentConfig):
    h, w = shape
    scale = float(rng.uniform(*cfg.scale_range))
    flip = bool(rng.random() < cfg.flip_prob)
    sh, sw = max(1, round(h * scale)), max(1, round(w * scale))
    ch, cw = cfg.crop
    top = int(rng.integers(0, sh - ch + 1)) if sh > ch else 0
    left = int(rng.integers(0, sw - cw + 1)) if sw > cw else 0
    return AugmentParams(scale, flip, top, left, (sh, sw), (ch, cw))


def nearest_index(n_in: int, n_out: int) -> np.ndarray:
    """Source index of each output index for a nearest resize (pixel-center aligned)."""
    idx = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.intp)
    return np.minimum(idx, n_in - 1)


def _resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy()


def _place(arr: np.ndarray, top: int, left: int, crop: tuple[int, int], fill) -> np.ndarray:
    ch, cw = crop
    out = np.full((ch, cw) + arr.shape[2:], fill, dtype=arr.dtype)
    src = arr[top : top + ch, left : left + cw]
    out[: src.shape[0], : src.shape[1]] = src
    return out


def apply_augment(s: SegSample, p: AugmentParams, ignore_id: int = IGNORE_ID) -> SegSample:
    h, w = s.label.shape
    sh, sw = p.scaled_size
    if (sh, sw) == (h, w):
        image, label, mask = s.image, s.label, s.valid_mask
    else:
        image = _resize_bilinear(s.image, (sh, sw))
        rows, cols = nearest_index(h, sh), nearest_index(w, sw)
        label = s.label[np.ix_(rows, cols)]
        mask = None if s.valid_mask is None else s.valid_mask[np.ix_(rows, cols)]
    if p.flip:
        image, label = image[:, ::-1], label[:, ::-1]
        mask = None if mask is None else mask[:, ::-1]
    return SegSample(
        image=_place(image, p.top, p.left, p.crop, 0.0),
        label=_place(label, p.top, p.left, p.crop, ignore_id),
        valid_mask=None if mask is None else _place(mask, p.top, p.left, p.crop, False),
        id=s.id,
    )


def augment(s: SegSample, rng_seed, cfg: AugmentConfig = AugmentConfig(), return_params=False):
    """Random scale, horizontal flip and crop applied jointly to image, label and mask.

    The image is resized bilinearly, label and mask by nearest neighbour. Regions of
    the crop window that fall outside the scaled image are padded with zeros in the
    image and ``cfg.ignore_id`` in the label.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    p = sample_augment_params(s.label.shape, rng, cfg)
    out = apply_augment(s, p, cfg.ignore_id)
    return (out, p) if return_params else out


def mask_blind_labels(s: SegSample, ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Label with blind-area pixels set to ``ignore_id``."""
    if s.valid_mask is None:
        return s.label
    return np.where(s.valid_mask, s.label, ignore_id)


def to_tensor(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> torch.Tensor:
    """HxWx3 [0, 1] array to a normalized 3xHxW float tensor."""
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)
    m = torch.tensor(mean, dtype=t.dtype).view(3, 1, 1)
    sd = torch.tensor(std, dtype=t.dtype).view(3, 1, 1)
    return (t - m) / sd


def collate(samples: list[SegSample], ignore_id: int = IGNORE_ID, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    images = torch.stack([to_tensor(s.image, mean, std) for s in samples])
    labels = torch.stack([torch.from_numpy(np.ascontiguousarray(mask_blind_labels(s, ignore_id))) for s in samples])
    return images, labels.long()
