"""Annular-to-panoramic unfolding for panoramic annular lens images.

Conventions
-----------
Image coordinates have x to the right and y pointing down; pixel ``k`` sits
at coordinate ``k``. The azimuth is measured counterclockwise (as seen on
screen) from the +x axis, starting at ``theta_offset``. ``clockwise=True``
reverses the sweep. Row 0 of the panorama is the inner radius unless
``flip_rows`` is requested when building a sample map.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * math.pi


class CalibrationError(ValueError):
    """Raised for calibrations that violate the annulus invariants."""


@dataclass(frozen=True)
class PalCalibration:
    center_x: float
    center_y: float
    r_inner: float
    r_outer: float
    theta_offset: float = 0.0
    clockwise: bool = False

    def __post_init__(self):
        for name in ("center_x", "center_y", "r_inner", "r_outer", "theta_offset"):
            if not math.isfinite(getattr(self, name)):
                raise CalibrationError(f"{name} must be finite")
        if not 0 < self.r_inner < self.r_outer:
            raise CalibrationError(
                f"require 0 < r_inner < r_outer, got r_inner={self.r_inner}, "
                f"r_outer={self.r_outer}"
            )
        if not 0.0 <= self.theta_offset < TWO_PI:
            raise CalibrationError(
                f"theta_offset must lie in [0, 2*pi), got {self.theta_offset}"
            )

    @property
    def _ysign(self) -> float:
        # y points down, so a visually counterclockwise sweep decreases y
        return 1.0 if self.clockwise else -1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PalCalibration":
        required = ("center_x", "center_y", "r_inner", "r_outer")
        missing = [k for k in required if k not in d]
        if missing:
            raise CalibrationError(f"calibration missing fields: {', '.join(missing)}")
        unknown = set(d) - {*required, "theta_offset", "clockwise"}
        if unknown:
            raise CalibrationError(f"unknown calibration fields: {', '.join(sorted(unknown))}")
        try:
            return cls(
                center_x=float(d["center_x"]),
                center_y=float(d["center_y"]),
                r_inner=float(d["r_inner"]),
                r_outer=float(d["r_outer"]),
                theta_offset=float(d.get("theta_offset", 0.0)),
                clockwise=bool(d.get("clockwise", False)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, CalibrationError):
                raise
            raise CalibrationError(f"malformed calibration value: {exc}") from exc

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def load_calibration(path) -> PalCalibration:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CalibrationError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise CalibrationError(f"{path}: expected a JSON object")
    return PalCalibration.from_dict(data)


def save_calibration(calib: PalCalibration, path) -> None:
    Path(path).write_text(json.dumps(calib.to_dict(), indent=2))


def annular_to_unfolded(r, theta, calib: PalCalibration, out_w: int, out_h: int):
    """Map polar coordinates ``(r, theta)`` to panorama coordinates ``(i, j)``.

    ``theta`` is the visual azimuth (counterclockwise from +x); it is shifted by
    the calibration's angular origin and sweep direction before scaling.
    Accepts scalars or arrays.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be positive")
    r = np.asarray(r, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(theta))):
        raise ValueError("r and theta must be finite")
    i = (r - calib.r_inner) / (calib.r_outer - calib.r_inner) * out_h
    sweep = theta - calib.theta_offset
    if calib.clockwise:
        sweep = -sweep
    phi = np.mod(sweep, TWO_PI)
    j = phi / TWO_PI * out_w
    # mod can round up to exactly 2*pi for tiny negative inputs
    j = np.where(j >= out_w, j - out_w, j)
    if i.ndim == 0:
        return float(i), float(j)
    return i, j


def cartesian_to_polar(x, y, calib: PalCalibration):
    """Radius and visual azimuth of raw-image points about the annulus center."""
    dx = np.asarray(x, dtype=np.float64) - calib.center_x
    dy = np.asarray(y, dtype=np.float64) - calib.center_y
    return np.hypot(dx, dy), np.arctan2(-dy, dx)


def annular_point_to_unfolded(x, y, calib: PalCalibration, out_w: int, out_h: int):
    r, theta = cartesian_to_polar(x, y, calib)
    return annular_to_unfolded(r, theta, calib, out_w, out_h)


def unfolded_to_annular(i, j, calib: PalCalibration, out_w: int, out_h: int):
    """Inverse mapping: panorama ``(i, j)`` to raw-image ``(x, y)``."""
    i = np.asarray(i, dtype=np.float64)
    j = np.asarray(j, dtype=np.float64)
    r = calib.r_inner + (i / out_h) * (calib.r_outer - calib.r_inner)
    phi = TWO_PI * j / out_w
    alpha = calib.theta_offset + (-phi if calib.clockwise else phi)
    x = calib.center_x + r * np.cos(alpha)
    y = calib.center_y - r * np.sin(alpha)
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


@dataclass
class SampleMap:
    width: int
    height: int
    raw_width: int
    raw_height: int
    src_x: np.ndarray
    src_y: np.ndarray
    valid: np.ndarray
    calib_digest: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width


def membership_mask(src_x, src_y, calib: PalCalibration, raw_w: int, raw_h: int):
    """True where a source coordinate is on the sensor and inside the annulus."""
    r = np.hypot(src_x - calib.center_x, src_y - calib.center_y)
    # slack absorbs the rounding of r computed back from (x, y)
    eps = 1e-9 * calib.r_outer
    return (
        (src_x >= 0)
        & (src_x <= raw_w - 1)
        & (src_y >= 0)
        & (src_y <= raw_h - 1)
        & (r >= calib.r_inner - eps)
        & (r <= calib.r_outer + eps)
    )


def build_sample_map(
    calib: PalCalibration,
    out_w: int,
    out_h: int,
    raw_w: int,
    raw_h: int,
    flip_rows: bool = False,
) -> SampleMap:
    """Precompute the raw-image source coordinate of every panorama pixel.

    Panorama pixel ``(row, col)`` samples the annulus at ``i = row``,
    ``j = col``. Pixels whose source leaves the sensor or the ring are flagged
    invalid; a sensor that crops the annulus yields scalloped invalid regions.
    """
    if min(out_w, out_h, raw_w, raw_h) < 1:
        raise ValueError("all dimensions must be positive")
    if not (0 <= calib.center_x <= raw_w - 1 and 0 <= calib.center_y <= raw_h - 1):
        raise CalibrationError(
            f"annulus center ({calib.center_x}, {calib.center_y}) lies outside "
            f"the {raw_w}x{raw_h} raw image"
        )
    rows = np.arange(out_h, dtype=np.float64)
    if flip_rows:
        rows = rows[::-1]
    cols = np.arange(out_w, dtype=np.float64)
    ii, jj = np.meshgrid(rows, cols, indexing="ij")
    src_x, src_y = unfolded_to_annular(ii, jj, calib, out_w, out_h)
    valid = membership_mask(src_x, src_y, calib, raw_w, raw_h)
    if not valid.any():
        raise CalibrationError("annulus does not intersect the raw image")
    return SampleMap(
        width=out_w,
        height=out_h,
        raw_width=raw_w,
        raw_height=raw_h,
        src_x=src_x,
        src_y=src_y,
        valid=valid,
        calib_digest=calib.digest(),
    )


def unfold_image(img: np.ndarray, smap: SampleMap, interp: str = "bilinear", fill=0):
    """Resample a raw annular image into the panorama described by ``smap``.

    Returns an array shaped like the map with the channel layout of ``img``.
    Invalid pixels are set to ``fill``; pair with ``smap.valid`` downstream.
    """
    img = np.asarray(img)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise ValueError(f"expected HxW or HxWxC image with C in (1, 3), got {img.shape}")
    h, w = img.shape[:2]
    if (h, w) != (smap.raw_height, smap.raw_width):
        raise ValueError(
            f"image is {w}x{h} but the sample map was built for "
            f"{smap.raw_width}x{smap.raw_height}"
        )
    sx = np.clip(smap.src_x, 0, w - 1)
    sy = np.clip(smap.src_y, 0, h - 1)
    if interp == "nearest":
        xi = np.rint(sx).astype(np.intp)
        yi = np.rint(sy).astype(np.intp)
        out = img[yi, xi]
    elif interp == "bilinear":
        x0 = np.floor(sx).astype(np.intp)
        y0 = np.floor(sy).astype(np.intp)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx = sx - x0
        fy = sy - y0
        if img.ndim == 3:
            fx = fx[..., None]
            fy = fy[..., None]
        src = img.astype(np.float64)
        top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
        bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
        out = top * (1 - fy) + bot * fy
        if np.issubdtype(img.dtype, np.integer):
            info = np.iinfo(img.dtype)
            out = np.clip(np.rint(out), info.min, info.max)
        out = out.astype(img.dtype)
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    out = np.array(out, copy=True)
    out[~smap.valid] = fill
    return out


_MAP_MAGIC = b"PALMAP1\x00"


def save_sample_map(smap: SampleMap, path) -> None:
    """Cache a map as magic + u32 header length + JSON header + float64/bool payload."""
    payload = (
        smap.src_x.astype("<f8").tobytes()
        + smap.src_y.astype("<f8").tobytes()
        + np.packbits(smap.valid).tobytes()
    )
    header = json.dumps(
        {
            "width": smap.width,
            "height": smap.height,
            "raw_width": smap.raw_width,
            "raw_height": smap.raw_height,
            "calib_digest": smap.calib_digest,
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        }
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAP_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_sample_map(path, calib: PalCalibration | None = None) -> SampleMap:
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAP_MAGIC):
        raise ValueError(f"{path}: not a sample map file")
    (n,) = struct.unpack_from("<I", blob, len(_MAP_MAGIC))
    start = len(_MAP_MAGIC) + 4
    header = json.loads(blob[start : start + n])
    payload = blob[start + n :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ValueError(f"{path}: payload checksum mismatch")
    if calib is not None and calib.digest() != header["calib_digest"]:
        raise ValueError(f"{path}: cached for a different calibration")
    h, w = header["height"], header["width"]
    count = h * w
    src_x = np.frombuffer(payload, "<f8", count, 0).reshape(h, w).copy()
    src_y = np.frombuffer(payload, "<f8", count, 8 * count).reshape(h, w).copy()
    bits = np.frombuffer(payload, np.uint8, offset=16 * count)
    valid = np.unpackbits(bits, count=count).astype(bool).reshape(h, w)
    return SampleMap(
        width=w,
        height=h,
        raw_width=header["raw_width"],
        raw_height=header["raw_height"],
        src_x=src_x,
        src_y=src_y,
        valid=valid,
        calib_digest=header["calib_digest"],
    )
