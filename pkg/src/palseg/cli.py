"""Command-line entry point.

Exit codes: 0 success, 1 validation failure (bad calibration, dataset, config or
checkpoint), 2 usage error. Machine-readable JSON goes to stdout, diagnostics
to stderr, artifacts to the paths given on the command line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("palseg")

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


class Invalid(Exception):
    """Input failed validation; reported on stderr with exit code 1."""


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(v) for v in text.lower().replace(",", "x").split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; use e.g. 1x3x512x2048")
    if not dims or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}")
    return dims


def _image_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise Invalid(f"no PNG files in {path}")
        return files
    if not path.is_file():
        raise Invalid(f"input {path} does not exist")
    return [path]


def cmd_unfold(args) -> int:
    from PIL import Image

    from . import geometry as G
    from .data import write_png

    try:
        calib = G.load_calibration(args.calib)
    except FileNotFoundError:
        raise Invalid(f"calibration file {args.calib} not found")
    inputs = _image_inputs(Path(args.inp))
    out = Path(args.out)
    single = len(inputs) == 1 and out.suffix.lower() == ".png"
    if not single:
        out.mkdir(parents=True, exist_ok=True)
    cache: dict[tuple[int, int], G.SampleMap] = {}
    written = []
    for src in inputs:
        with Image.open(src) as im:
            raw = np.asarray(im.convert("L") if im.mode in ("L", "I", "I;16", "P") else im.convert("RGB"))
        key = (raw.shape[1], raw.shape[0])
        if key not in cache:
            cache[key] = G.build_sample_map(calib, args.width, args.height, *key, flip_rows=args.flip_rows)
        smap = cache[key]
        pano = G.unfold_image(raw, smap, args.interp, fill=args.fill)
        dst = out if single else out / src.name
        write_png(dst, pano)
        item = {"input": str(src), "output": str(dst), "valid_fraction": float(smap.valid.mean())}
        if args.emit_mask:
            mask_path = dst.with_name(dst.stem + "_mask.png")
            write_png(mask_path, smap.valid)
            item["mask"] = str(mask_path)
        if args.figures:
            from .plotting import plot_unfold

            item["figure"] = str(plot_unfold(raw, pano, smap.valid, Path(args.figures) / f"{src.stem}_unfold.png"))
        written.append(item)
    _emit({"width": args.width, "height": args.height, "interp": args.interp, "outputs": written})
    return EXIT_OK


def cmd_dataset_validate(args) -> int:
    from .data import load_manifest, validate_dataset

    report = validate_dataset(load_manifest(args.root))
    _emit(report)
    return EXIT_OK if report["ok"] else EXIT_INVALID


def cmd_synth_dataset(args) -> int:
    from .synthetic import write_dataset

    h, w = _parse_shape(args.size)
    m = write_dataset(args.out, args.train, args.test, h, w, args.seed, blind_rows=args.blind_rows)
    _emit({"root": str(m.root), "train": len(m.split("train")), "test": len(m.split("test"))})
    return EXIT_OK


def cmd_synth_annulus(args) -> int:
    from . import geometry as G
    from .data import write_png
    from .synthetic import radial_gradient_annulus, sector_annulus

    calib = G.load_calibration(args.calib)
    w, h = _parse_shape(args.raw)
    if args.kind == "sectors":
        img = sector_annulus(w, h, calib, args.sectors)
    else:
        img = radial_gradient_annulus(w, h, calib, dtype=np.uint8)
    write_png(args.out, img)
    _emit({"output": args.out, "raw_size": [w, h], "kind": args.kind})
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_manifest
    from .plotting import plot_training
    from .train import build_and_fit, load_run_config, read_log

    try:
        mcfg, tcfg = load_run_config(args.config)
    except (TypeError, ValueError, KeyError) as exc:
        raise Invalid(f"invalid config {args.config}: {exc}")
    out = Path(args.out)
    if args.resume and not (out / "last.ckpt").is_file():
        raise Invalid(f"--resume given but {out} holds no checkpoint")
    manifest = load_manifest(args.data)
    if manifest.catalog.num_classes != mcfg.num_classes:
        raise Invalid(f"dataset has {manifest.catalog.num_classes} classes, config expects {mcfg.num_classes}")
    result = build_and_fit(mcfg, tcfg, manifest, out, resume=args.resume)
    fig = plot_training(read_log(out / "train_log.jsonl"), out / "figures" / "training.png")
    _emit({
        "out": str(out),
        "best_checkpoint": str(result.best_checkpoint),
        "last_checkpoint": str(result.last_checkpoint),
        "best_metric": result.best_metric,
        "last_epoch": result.last_epoch,
        "figure": str(fig),
    })
    return EXIT_OK


def _load_model(args):
    from .checkpoint import load_checkpoint
    from .train import load_run_config

    config = load_run_config(args.config)[0] if getattr(args, "config", None) else None
    model, meta = load_checkpoint(args.checkpoint, config=config)
    model.eval()
    return model, meta


def cmd_eval(args) -> int:
    from .data import load_manifest, load_split
    from .train import evaluate

    model, _ = _load_model(args)
    manifest = load_manifest(args.data)
    if manifest.catalog.num_classes != model.cfg.num_classes:
        raise Invalid(
            f"checkpoint predicts {model.cfg.num_classes} classes, dataset catalog has {manifest.catalog.num_classes}"
        )
    samples = load_split(manifest, args.split)
    if not samples:
        raise Invalid(f"split {args.split!r} is empty")
    report, cm = evaluate(model, samples, manifest.catalog)
    out = report.to_dict()
    if args.figures:
        from .plotting import plot_confusion, plot_iou

        fdir = Path(args.figures)
        out["figures"] = [
            str(plot_confusion(cm.counts, manifest.catalog.names, fdir / "confusion.png")),
            str(plot_iou(report, fdir / "iou.png", manifest.catalog.colors)),
        ]
    _emit(out)
    return EXIT_OK


def cmd_predict(args) -> int:
    import torch
    from PIL import Image

    from . import data as D
    from .train import pad_to_stride

    model, meta = _load_model(args)
    catalog = D.ClassCatalog.from_dict(meta["catalog"]) if "catalog" in meta else D.AERIAL_PASS
    if catalog.num_classes != model.cfg.num_classes:
        catalog = D.ClassCatalog(
            names=tuple(str(k) for k in range(model.cfg.num_classes)),
            colors=tuple(tuple(int(v) for v in np.random.default_rng(k).integers(0, 255, 3)) for k in range(model.cfg.num_classes)),
        )
    fill = args.fill_class
    if fill is None:
        fill = catalog.names.index("others") if "others" in catalog.names else catalog.num_classes - 1
    elif fill not in range(catalog.num_classes):
        raise Invalid(f"--fill-class {fill} outside [0, {catalog.num_classes})")
    image = D.read_image(args.image)
    h, w = image.shape[:2]
    x, _ = pad_to_stride(D.to_tensor(image)[None], None, 0)
    with torch.no_grad():
        pred = model(x).argmax(1)[0, :h, :w].numpy()
    if args.mask:
        with Image.open(args.mask) as im:
            valid = np.asarray(im.convert("L")) > 0
        if valid.shape != pred.shape:
            raise Invalid(f"mask {valid.shape} does not match image {pred.shape}")
        pred = np.where(valid, pred, fill)
    color = D.colorize(pred, catalog)
    D.write_png(args.out, color)
    result = {"output": args.out, "class_counts": {n: int((pred == k).sum()) for k, n in enumerate(catalog.names)}}
    if args.overlay:
        blend = (1 - args.alpha) * image + args.alpha * (color / 255.0)
        D.write_png(args.overlay, blend)
        result["overlay"] = args.overlay
    _emit(result)
    return EXIT_OK


def cmd_bench(args) -> int:
    import torch

    from .metrics import benchmark
    from .model import ModelConfig, build_model

    if args.checkpoint:
        model, _ = _load_model(args)
    else:
        cfg = ModelConfig.tiny() if args.preset == "tiny-test" else ModelConfig.resnet18()
        model = build_model(cfg, 0)
    if args.threads:
        torch.set_num_threads(args.threads)
    shape = args.shape
    if len(shape) != 4 or shape[1] != 3:
        raise Invalid(f"--shape must be Nx3xHxW, got {'x'.join(map(str, shape))}")
    try:
        result = benchmark(model, shape, warmup=args.warmup, runs=args.runs)
    except RuntimeError as exc:
        raise Invalid(str(exc))
    if args.figures:
        from .plotting import plot_latency

        result["figure"] = str(plot_latency(result, Path(args.figures) / "latency.png"))
    _emit(result)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="palseg", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    u = sub.add_parser("unfold", help="unfold annular images into panoramas")
    u.add_argument("--calib", required=True, help="calibration JSON file")
    u.add_argument("--in", dest="inp", required=True, help="PNG file or directory of PNGs")
    u.add_argument("--out", required=True, help="output PNG (single input) or directory")
    u.add_argument("--width", type=int, default=2048, help="panorama width (default 2048)")
    u.add_argument("--height", type=int, default=512, help="panorama height (default 512)")
    u.add_argument("--interp", choices=("nearest", "bilinear"), default="bilinear")
    u.add_argument("--fill", type=int, default=0, help="value for blind pixels (default 0)")
    u.add_argument("--flip-rows", action="store_true", help="put the outer radius on row 0")
    u.add_argument("--emit-mask", action="store_true", help="also write <name>_mask.png validity masks")
    u.add_argument("--figures", help="directory for raw/unfolded/mask comparison figures")
    u.set_defaults(func=cmd_unfold)

    d = sub.add_parser("dataset", help="dataset utilities")
    dsub = d.add_subparsers(dest="dataset_command", required=True)
    dv = dsub.add_parser("validate", help="check a dataset and print a JSON report")
    dv.add_argument("--root", required=True)
    dv.set_defaults(func=cmd_dataset_validate)

    s = sub.add_parser("synth", help="write synthetic fixtures")
    ssub = s.add_subparsers(dest="synth_command", required=True)
    sd = ssub.add_parser("dataset", help="synthetic segmentation dataset")
    sd.add_argument("--out", required=True)
    sd.add_argument("--train", type=int, default=12)
    sd.add_argument("--test", type=int, default=2)
    sd.add_argument("--size", default="128x128", help="HxW (default 128x128)")
    sd.add_argument("--seed", type=int, default=0)
    sd.add_argument("--blind-rows", type=int, default=0, help="blind rows at the top of each validity mask")
    sd.set_defaults(func=cmd_synth_dataset)
    sa = ssub.add_parser("annulus", help="synthetic raw annular image")
    sa.add_argument("--calib", required=True)
    sa.add_argument("--out", required=True)
    sa.add_argument("--raw", default="1024x1024", help="raw image WxH (default 1024x1024)")
    sa.add_argument("--kind", choices=("sectors", "gradient"), default="sectors")
    sa.add_argument("--sectors", type=int, default=8)
    sa.set_defaults(func=cmd_synth_annulus)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True, help='JSON {"model": {...}, "train": {...}}')
    t.add_argument("--data", required=True, help="dataset root")
    t.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    t.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint, print IoU JSON")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--config", help="run config the checkpoint must match")
    e.add_argument("--figures", help="directory for confusion/IoU figures")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="write a colorized label map for one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True, help="colorized label PNG")
    pr.add_argument("--overlay", help="also write an alpha-blended overlay PNG here")
    pr.add_argument("--alpha", type=float, default=0.5, help="overlay opacity (default 0.5)")
    pr.add_argument("--mask", help="validity mask PNG; blind pixels get --fill-class")
    pr.add_argument("--fill-class", type=int, help="class id for blind pixels (default: 'others')")
    pr.add_argument("--config", help="run config the checkpoint must match")
    pr.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", help="measure forward latency / FPS")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--preset", choices=("resnet18", "tiny-test"), help="randomly initialized model")
    b.add_argument("--shape", type=_parse_shape, default=(1, 3, 512, 2048), help="NxCxHxW (default 1x3x512x2048)")
    b.add_argument("--runs", type=int, default=10)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--threads", type=int, help="torch intra-op threads")
    b.add_argument("--config", help="run config the checkpoint must match")
    b.add_argument("--figures", help="directory for the latency figure")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "bench" and (args.runs < 1 or args.warmup < 0):
        parser.error("--runs must be >= 1 and --warmup >= 0")
    from .checkpoint import CheckpointError
    from .data import DatasetError
    from .geometry import CalibrationError

    try:
        return args.func(args)
    except (Invalid, CalibrationError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
