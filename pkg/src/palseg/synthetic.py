"""Synthetic annulus images and segmentation fixtures."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import data as D
from .geometry import PalCalibration, annular_point_to_unfolded, cartesian_to_polar


def _raw_grid(raw_w, raw_h):
    return np.meshgrid(np.arange(raw_w, dtype=np.float64), np.arange(raw_h, dtype=np.float64))


def annulus_mask(raw_w, raw_h, calib: PalCalibration) -> np.ndarray:
    x, y = _raw_grid(raw_w, raw_h)
    r, _ = cartesian_to_polar(x, y, calib)
    return (r >= calib.r_inner) & (r <= calib.r_outer)


def sector_annulus(raw_w, raw_h, calib: PalCalibration, n_sectors=8, colors=None) -> np.ndarray:
    """RGB uint8 ring split into ``n_sectors`` equal azimuth sectors of distinct colors."""
    if colors is None:
        rng = np.random.default_rng(n_sectors)
        colors = rng.choice(np.arange(30, 256), size=(n_sectors, 3), replace=True)
        colors[:, 0] = np.linspace(30, 250, n_sectors).astype(int)  # keeps sectors distinct
    x, y = _raw_grid(raw_w, raw_h)
    _, j = annular_point_to_unfolded(x, y, calib, n_sectors, 1)
    sector = np.minimum(np.floor(j).astype(int), n_sectors - 1)
    img = np.asarray(colors, dtype=np.uint8)[sector]
    img[~annulus_mask(raw_w, raw_h, calib)] = 0
    return img


def radial_gradient_annulus(raw_w, raw_h, calib: PalCalibration, scale: float = 255.0, dtype=np.float64) -> np.ndarray:
    """Single-channel image whose value is ``scale * (r - r_inner) / (r_outer - r_inner)``."""
    x, y = _raw_grid(raw_w, raw_h)
    r, _ = cartesian_to_polar(x, y, calib)
    img = scale * (r - calib.r_inner) / (calib.r_outer - calib.r_inner)
    if np.issubdtype(np.dtype(dtype), np.integer):
        img = np.clip(np.rint(img), 0, np.iinfo(dtype).max)
    return img.astype(dtype)


CLASS_COLORS = {
    0: (0.80, 0.35, 0.25),  # track: brick red running surface
    1: (0.25, 0.65, 0.30),  # field: grass
    2: (0.55, 0.55, 0.60),  # others: concrete / roofs
}


def aerial_scene(h: int, w: int, rng: np.random.Generator, noise: float = 0.03):
    """Panorama-like scene: a background of 'others', a field block and track bands."""
    label = np.full((h, w), 2, dtype=np.int64)
    fh = int(rng.integers(h // 4, h // 2))
    fw = int(rng.integers(w // 4, w // 2))
    top = int(rng.integers(0, h - fh))
    left = int(rng.integers(0, w - fw))
    label[top : top + fh, left : left + fw] = 1
    band = max(3, h // 16)
    for _ in range(2):
        r0 = int(rng.integers(0, h - band))
        label[r0 : r0 + band, :] = 0
    c0 = int(rng.integers(0, w - band))
    label[:, c0 : c0 + band] = 0
    palette = np.array([CLASS_COLORS[k] for k in range(3)])
    brightness = rng.uniform(0.85, 1.15)
    image = palette[label] * brightness + rng.normal(0.0, noise, size=(h, w, 3))
    return np.clip(image, 0.0, 1.0).astype(np.float32), label


def make_samples(n: int, h: int, w: int, seed: int = 0, prefix: str = "s") -> list[D.SegSample]:
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        image, label = aerial_scene(h, w, rng)
        out.append(D.SegSample(image=image, label=label, id=f"{prefix}{k:03d}"))
    return out


def write_dataset(root, n_train: int, n_test: int, h: int = 128, w: int = 128, seed: int = 0,
                  blind_rows: int = 0, catalog: D.ClassCatalog = D.AERIAL_PASS) -> D.DatasetManifest:
    """Write a fixture in the on-disk layout and return its manifest.

    ``blind_rows`` > 0 adds validity masks whose first rows are blind.
    """
    root = Path(root)
    for sub in ("images", "labels") + (("masks",) if blind_rows else ()):
        (root / sub).mkdir(parents=True, exist_ok=True)
    samples = make_samples(n_train + n_test, h, w, seed)
    entries = []
    for k, s in enumerate(samples):
        img_p, lab_p = root / "images" / f"{s.id}.png", root / "labels" / f"{s.id}.png"
        D.write_png(img_p, s.image)
        D.write_png(lab_p, s.label.astype(np.uint8))
        mask_p = None
        if blind_rows:
            mask = np.ones((h, w), bool)
            mask[:blind_rows] = False
            mask_p = root / "masks" / f"{s.id}.png"
            D.write_png(mask_p, mask)
        entries.append(D.ManifestEntry(s.id, img_p, lab_p, "train" if k < n_train else "test", mask_p))
    manifest = D.DatasetManifest(root=root, entries=entries, catalog=catalog)
    manifest.save()
    return manifest
