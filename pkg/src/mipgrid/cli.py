"""Command-line entry point: ``mipgrid {train,render,eval,gen-data,inspect-kernels}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from . import config as config_text
from .data import (
    DatasetError,
    ProceduralScene,
    load_multiscale,
    procedural_dataset,
    write_multiscale,
)
from .metrics import EvalReport
from .mipgen import kernel_second_moment
from .pngio import write_png
from .render import CameraModel, render_image
from .train import TrainingAborted, metrics_csv, run

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
CHECKPOINT_NAME = "checkpoint.mgrd"

log = logging.getLogger("mipgrid")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _parse_factor(text: str) -> Fraction:
    """Downsampling factor such as ``8``, ``8/3`` or ``2.5`` (must be > 0)."""
    try:
        f = Fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise UsageError(f"invalid scale factor {text!r}") from exc
    if f <= 0:
        raise UsageError(f"scale factor must be positive, got {text}")
    return f


def _resolution_arg(text: str) -> Fraction:
    """Resolution fraction such as ``3/8`` (output size = base size x fraction)."""
    try:
        f = Fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise UsageError(f"invalid resolution {text!r}") from exc
    if f <= 0:
        raise UsageError(f"resolution must be positive, got {text}")
    return f


def _dataset(cfg):
    if not cfg.data_path:
        raise UsageError("config key 'data.path' is not set")
    if not Path(cfg.data_path).is_dir():
        raise UsageError(f"config key 'data.path': directory {cfg.data_path!r} does not exist")
    return load_multiscale(cfg.data_path, cfg.background, cfg.factors)


def _load_checkpoint(path):
    if not path:
        raise UsageError("--checkpoint is required")
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} does not exist")
    return ckpt.load(path)


def _camera_from_json(path, near, far) -> CameraModel:
    meta = json.loads(Path(path).read_text())
    w, h = int(meta["width"]), int(meta.get("height", meta["width"]))
    if "focal" in meta:
        fx = fy = float(meta["focal"])
    else:
        fx = fy = 0.5 * w / math.tan(0.5 * float(meta["camera_angle_x"]))
    return CameraModel(
        fx, fy, w, h, np.array(meta["transform_matrix"], dtype=np.float64),
        float(meta.get("near", near)), float(meta.get("far", far)),
    )


def _bounds(cam: CameraModel, cfg) -> CameraModel:
    if cfg.near > 0 and cfg.far > 0:
        from dataclasses import replace

        return replace(cam, near=cfg.near, far=cfg.far, camera_to_world=cam.camera_to_world.copy())
    return cam


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    if not args.config:
        raise UsageError("--config is required")
    cfg = config_text.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    ds = _dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_text.dumps(cfg))
    try:
        result = run(cfg, ds, progress=lambda row: log.info("iteration %d loss %.6f", row["iteration"], row["loss"]))
    except TrainingAborted as exc:
        r = exc.result
        ckpt.save(out / CHECKPOINT_NAME, ckpt.Checkpoint.from_field(r.field, cfg, r.rng_state))
        (out / "metrics.csv").write_text(metrics_csv(r.rows))
        print(f"training aborted: {exc}; last good checkpoint kept in {out}", file=sys.stderr)
        return EXIT_RUNTIME
    ckpt.save(out / CHECKPOINT_NAME, ckpt.Checkpoint.from_field(result.field, cfg, result.rng_state))
    (out / "metrics.csv").write_text(metrics_csv(result.rows))
    print(f"wrote {out / CHECKPOINT_NAME} and {out / 'metrics.csv'} ({result.seconds:.1f} s)")
    return EXIT_OK


def cmd_render(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    cfg = ck.train_config()
    if args.secondary is not None and ck.scale_kind != "2d":
        raise UsageError(f"--secondary needs a 2d scale coordinate model, checkpoint is {ck.scale_kind!r}")
    if args.scale is not None and args.scale <= 0:
        raise UsageError("--scale must be positive")
    if args.factor is not None and args.resolution is not None:
        raise UsageError("give either --factor or --resolution")
    frac = Fraction(1)
    if args.factor is not None:
        frac = 1 / _parse_factor(args.factor)
    elif args.resolution is not None:
        frac = _resolution_arg(args.resolution)

    if args.camera:
        cams = [("camera", _camera_from_json(args.camera, cfg.near or 2.0, cfg.far or 6.0))]
    else:
        ds = _dataset(cfg)
        base = ds.test[1] if ds.test else ds.train[1]
        views = range(len(base)) if args.view is None else [args.view]
        for v in views:
            if not 0 <= v < len(base):
                raise UsageError(f"--view {v} out of range (0..{len(base) - 1})")
        cams = [(base[v].name or f"view{v:03d}", base[v].camera) for v in views]

    fld = ck.to_field()
    out = Path(args.out)
    override = None if args.scale is None and args.secondary is None else (args.scale, args.secondary)
    for name, cam in cams:
        try:
            cam = _bounds(cam, cfg).rescaled(frac)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        img = render_image(fld, cam, cfg.eval_samples, cfg.background, scale_override=override)
        path = out / f"{name}_res{frac.numerator}-{frac.denominator}.png" if len(cams) > 1 or out.suffix != ".png" else out
        write_png(path, img)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    cfg = ck.train_config()
    if args.data:
        cfg = cfg.replace(data_path=args.data)
    ds = _dataset(cfg)
    fld = ck.to_field()
    report = EvalReport()
    start = time.perf_counter()
    for f in sorted(ds.test):
        for view in ds.test[f][: args.views or None]:
            cam = _bounds(view.camera, cfg)
            if view.image.shape[:2] != (cam.height, cam.width):
                raise ckpt.CheckpointError(
                    f"view {view.name} at factor {f}: image {view.image.shape[1]}x{view.image.shape[0]} "
                    f"does not match camera {cam.width}x{cam.height}"
                )
            img = render_image(fld, cam, cfg.eval_samples, cfg.background)
            report.add(f, view.name, img, view.image)
    report.seconds = time.perf_counter() - start
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(report.to_csv())
    table = report.table()
    (out / "eval.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc.strerror}") from exc
    if args.width % 8:
        raise UsageError("--width must be divisible by 8")
    if args.constant is not None:
        c = tuple(args.constant for _ in range(3))
        scene = ProceduralScene(color_a=c, color_b=c, background=args.constant)
    else:
        scene = ProceduralScene(checker_size=args.checker)
    ds = procedural_dataset(
        scene, args.views, args.test_views, args.width, args.focal, args.radius,
        args.near, args.far, supersample=args.supersample, phase=_seed_phase(args.seed),
    )
    write_multiscale(ds, out, args.near, args.far)
    print(f"wrote {len(ds.factors)} scale trees to {out}")
    return EXIT_OK


def _seed_phase(seed) -> float:
    """Azimuth offset of the orbit; seed 0 keeps the canonical layout."""
    if not seed:
        return 0.0
    return float(np.random.default_rng(seed).uniform(0.0, 2.0 * math.pi))


def cmd_inspect_kernels(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    fld = ck.to_field()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["grid bank scale factor rank second_moment"]
    bounds = ["grid bank scale factor min max"]
    for which, banks in fld.banks.items():
        names = fld.grids[which].factor_names
        for b, bank in enumerate(banks):
            for s in range(bank.scales):
                moments = kernel_second_moment(bank, s)
                for name, ker, mom in zip(names, bank.kernels, moments):
                    for r, m in enumerate(mom):
                        lines.append(f"{which} {b} {s} {name} {r} {m:.8g}")
                    tile, lo, hi = _kernel_tile(ker[s])
                    write_png(out / f"{which}_bank{b}_s{s}_{name}.png", tile)
                    bounds.append(f"{which} {b} {s} {name} {lo:.8g} {hi:.8g}")
            if args.slices and which == "appearance":
                ms = fld.multiscale(which, b)
                for s in range(ms.scales):
                    write_png(out / f"slice_{which}_bank{b}_s{s}.png", _xy_slice(ms.scale(s)))
    report = "\n".join(lines) + "\n\n# min-max normalization bounds per PNG\n" + "\n".join(bounds) + "\n"
    (out / "kernel_moments.txt").write_text(report)
    print(f"wrote {len(bounds) - 1} kernel images and kernel_moments.txt to {out}")
    return EXIT_OK


def _kernel_tile(k: np.ndarray, zoom: int = 16):
    """Ranks side by side, min-max normalized, nearest-neighbour enlarged."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim == 2:  # (R, K) -> (R, 1, K)
        k = k[:, None, :]
    lo, hi = float(k.min()), float(k.max())
    norm = (k - lo) / (hi - lo) if hi > lo else np.zeros_like(k)
    r, kh, kw = norm.shape
    gap = np.ones((kh, 1))
    row = np.concatenate([np.concatenate([norm[i], gap], axis=1) for i in range(r)], axis=1)[:, :-1]
    return np.kron(row, np.ones((zoom, zoom))), lo, hi


def _xy_slice(grid) -> np.ndarray:
    """Mid-height XY slice of the summed dense components, min-max normalized."""
    from .grids import reconstruct_dense

    dense = reconstruct_dense(grid).data.sum(axis=-1)
    sl = dense[:, :, dense.shape[2] // 2]
    lo, hi = sl.min(), sl.max()
    return (sl - lo) / (hi - lo) if hi > lo else np.zeros_like(sl)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--out", default="out", help="output directory (or .png file for render)")
    common.add_argument("--seed", type=int, default=None, help="override the random seed")
    common.add_argument("--threads", type=int, default=1, help="BLAS/numba threads (1 = reproducible)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mipgrid", description="Multi-scale factorized radiance grids.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train a model from a config file")

    r = sub.add_parser("render", parents=[common], help="render views from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--view", type=int, default=None, help="test view index (default: all)")
    r.add_argument("--camera", help="JSON camera: width, focal or camera_angle_x, transform_matrix")
    r.add_argument("--factor", help="downsampling factor, e.g. 8 or 8/3")
    r.add_argument("--resolution", help="resolution fraction, e.g. 3/8")
    r.add_argument("--scale", type=float, default=None, help="explicit primary scale value")
    r.add_argument("--secondary", type=float, default=None, help="explicit distance channel (2d models)")

    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM per scale on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory (default: data.path from the checkpoint)")
    e.add_argument("--views", type=int, default=0, help="limit views per scale (0 = all)")

    g = sub.add_parser("gen-data", parents=[common], help="write the procedural multi-scale dataset")
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--focal", type=float, default=80.0)
    g.add_argument("--views", type=int, default=24)
    g.add_argument("--test-views", type=int, default=4)
    g.add_argument("--radius", type=float, default=4.0)
    g.add_argument("--near", type=float, default=2.6)
    g.add_argument("--far", type=float, default=5.4)
    g.add_argument("--checker", type=float, default=0.45, help="checker cell size (world units)")
    g.add_argument("--constant", type=float, default=None, help="constant grey level instead of checkers")
    g.add_argument("--supersample", type=int, default=16)

    k = sub.add_parser("inspect-kernels", parents=[common], help="kernel PNGs and second-moment report")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--slices", action="store_true", help="also write XY slices of generated appearance grids")
    return p


COMMANDS = {
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "gen-data": cmd_gen_data,
    "inspect-kernels": cmd_inspect_kernels,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits with 2 on usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(args.threads):
            return COMMANDS[args.command](args)
    except (UsageError, config_text.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, ckpt.CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
