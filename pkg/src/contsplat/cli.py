"""Command-line interface: ``contsplat <command> [options]``.

Scenes use the binary scene format, cameras a JSON array, and image sets a
directory of PNGs read in sorted filename order (one per camera).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench
from .change2d import detect_changes, write_mask_png
from .continual import UpdateConfig, camera_extent, optimize_local, update_scene
from .core import GaussianScene, load_cameras, load_scene, save_cameras, save_scene
from .errors import ContractError, FormatError
from .history import changed_suffix, load_delta, merge_concurrent, recover_state, save_delta
from .lift3d import init_new_gaussians
from .rasterizer import compute_tile_mask, read_png, render, write_png, write_raw

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONTRACT = 2
EXIT_USAGE = 64
DELTA_SUFFIX = ".cldelta"

log = logging.getLogger("contsplat")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# file helpers


def load_images(directory) -> list[np.ndarray]:
    files = sorted(Path(directory).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG images in {directory}")
    return [read_png(f) for f in files]


def save_images(images, directory, raw: bool = False) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for i, im in enumerate(images):
        write_png(im, out / f"{i:04d}.png")
        if raw:
            write_raw(im, out / f"{i:04d}.f32")


def _views(args):
    cams = load_cameras(args.cameras)
    images = load_images(args.images)
    if len(images) != len(cams):
        raise ContractError(f"{len(images)} images for {len(cams)} cameras")
    return cams, images


def delta_files(directory) -> dict[int, Path]:
    d = Path(directory)
    if not d.exists():
        return {}
    return {int(p.stem.split("_")[-1]): p for p in d.glob(f"delta_*{DELTA_SUFFIX}")}


def _config(args) -> UpdateConfig:
    cfg = UpdateConfig.from_json(args.config) if args.config else UpdateConfig()
    optim = replace(cfg.optim, precision=args.precision or cfg.optim.precision)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
        optim = replace(optim, seed=args.seed)
    return replace(cfg, optim=optim)


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is None or str(path) == "-":
        print(text)
    else:
        Path(path).write_text(text + "\n")


# ---------------------------------------------------------------------------
# commands


def _axes_meet(cams) -> np.ndarray:
    """Least-squares point closest to every camera's optical axis."""
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for c in cams:
        d = c.rotation[2]
        p = np.eye(3) - np.outer(d, d)
        a += p
        b += p @ c.center
    return np.linalg.lstsq(a, b, rcond=None)[0]


def cmd_init(args, cfg: UpdateConfig) -> int:
    cams, images = _views(args)
    rng = np.random.default_rng(cfg.seed)
    if args.bounds:
        lo, hi = np.array(args.bounds[:3]), np.array(args.bounds[3:])
    else:
        mid = _axes_meet(cams)
        half = 0.5 * np.mean([np.linalg.norm(c.center - mid) for c in cams])
        lo, hi = mid - half, mid + half
    pts = rng.uniform(lo, hi, (args.points, 3))
    everywhere = [np.ones((c.height, c.width), dtype=bool) for c in cams]
    scene = GaussianScene.from_gaussians(init_new_gaussians(pts, everywhere, images, cams))
    optim = replace(cfg.optim, scene_extent=cfg.optim.scene_extent or camera_extent(cams))
    res = optimize_local(scene, np.arange(len(scene)), [], images, cams, optim, full_frame=True,
                         rng=rng)
    save_scene(res.scene, args.out)
    log.info("initialized %d Gaussians", len(res.scene))
    return EXIT_OK


def cmd_render(args, cfg: UpdateConfig) -> int:
    scene = load_scene(args.scene)
    cams = load_cameras(args.cameras)
    save_images([render(scene, c, precision=cfg.optim.precision).image for c in cams], args.out, args.raw)
    return EXIT_OK


def cmd_detect(args, cfg: UpdateConfig) -> int:
    scene = load_scene(args.scene)
    cams, images = _views(args)
    masks = detect_changes(scene, images, cams, cfg.extractor, cfg.tau1, precision=cfg.optim.precision)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(masks):
        write_mask_png(m, out / f"{i:04d}.png")
    log.info("%d of %d views changed", sum(m.any() for m in masks), len(masks))
    return EXIT_OK


def cmd_update(args, cfg: UpdateConfig) -> int:
    prev = load_scene(args.scene)
    cams, images = _views(args)
    history = Path(args.history)
    t = max(delta_files(history), default=0) + 1
    res = update_scene(prev, images, cams, replace(cfg, time_index=t))
    history.mkdir(parents=True, exist_ok=True)
    save_delta(res.delta, history / f"delta_{t:04d}{DELTA_SUFFIX}")
    save_scene(res.scene, args.out)
    if not res.changed:
        log.info("no change detected")
    else:
        log.info("time %d: %d changed Gaussians in %d spheres", t, len(res.change_set.indices),
                 len(res.change_set.spheres))
    if args.changes:
        info = {"time": t, "status": res.status, **res.change_set.to_dict(),
                "stats": {k: v for k, v in res.stats.items() if k not in ("seconds", "mean_iter_time")}}
        _write_json(info, args.changes)
    if args.log and res.log is not None:
        res.log.write_csv(args.log)
    return EXIT_OK


def cmd_recover(args, cfg: UpdateConfig) -> int:
    current = load_scene(args.scene)
    files = delta_files(args.history)
    deltas = {t: load_delta(p) for t, p in files.items()}
    now = args.current if args.current is not None else max(deltas, default=args.to)
    save_scene(recover_state(current, deltas, args.to, now), args.out)
    return EXIT_OK


def cmd_merge(args, cfg: UpdateConfig) -> int:
    base = load_scene(args.base)
    updates = []
    for scene_path, delta_path in args.update:
        delta = load_delta(delta_path)
        updates.append((changed_suffix(load_scene(scene_path), delta), delta.bitmap))
    save_scene(merge_concurrent(base, updates), args.out)
    return EXIT_OK


def cmd_gen(args, cfg: UpdateConfig) -> int:
    intr = bench.Intrinsics().scaled(args.width, args.height)
    bcfg = bench.BenchConfig(seed=cfg.seed, intrinsics=intr, n_train=args.train_views, n_test=args.test_views,
                             scene=bench.SceneSpec(n_gaussians=args.gaussians))
    case = bench.make_case(args.op, bcfg, cfg.optim.precision)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(case.before.scene, out / "before.splat")
    save_scene(case.after, out / "after.splat")
    save_cameras(case.train_cameras, out / "train_cameras.json")
    save_cameras(case.test_cameras, out / "test_cameras.json")
    save_images(case.train_images, out / "train")
    save_images(case.test_images, out / "test")
    _write_json({"op": args.op, "seed": cfg.seed, "changed_objects": case.change.changed,
                 "region": case.change.region.tolist()}, out / "case.json")
    return EXIT_OK


def cmd_eval(args, cfg: UpdateConfig) -> int:
    case = Path(args.case)
    before = load_scene(case / "before.splat")
    after = load_scene(case / "after.splat")
    train_cams = load_cameras(case / "train_cameras.json")
    test_cams = load_cameras(case / "test_cameras.json")
    train_imgs = load_images(case / "train")
    test_imgs = load_images(case / "test")
    prec = cfg.optim.precision
    res = update_scene(before, train_imgs, train_cams, cfg)
    updated = load_scene(args.scene) if args.scene else res.scene
    truth = bench.gt_change_masks(before, after, train_cams, prec)
    masks = bench.mask_pr(res.masks, truth)
    tiles = bench.mask_pr([compute_tile_mask(res.scene, res.change_set.indices, c).pixel_mask()
                           for c in train_cams], truth)
    report = {
        "status": res.status,
        "psnr_pre": bench.mean_psnr(before, test_cams, test_imgs, prec),
        "psnr_post": bench.mean_psnr(updated, test_cams, test_imgs, prec),
        "ssim_post": float(np.mean([bench.ssim(render(updated, c, precision=prec).image, im)
                                    for c, im in zip(test_cams, test_imgs)])),
        "mask_precision": masks.precision,
        "mask_recall": masks.recall,
        "tile_precision": tiles.precision,
        "tile_recall": tiles.recall,
        "changed_gaussians": int(len(res.change_set.indices)),
        "seed": cfg.seed,
        "threads": args.threads,
        "precision": prec,
    }
    # JSON has no inf; identical renders report a capped PSNR
    report = {k: (100.0 if isinstance(v, float) and math.isinf(v) else v) for k, v in report.items()}
    _write_json(report, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _global_options(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; SUPPRESS keeps them from resetting values given earlier
    def default(v):
        return argparse.SUPPRESS if suppress else v

    common = _Parser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=default(None), help="run seed for every RNG (default: config or 0)")
    g.add_argument("--threads", type=int, default=default(1), help="worker threads for the numba kernels")
    g.add_argument("--config", type=Path, default=default(None), help="JSON update/optimizer configuration")
    g.add_argument("--precision", choices=("f32", "f64"), default=default(None), help="compute precision")
    g.add_argument("-v", "--verbose", action="store_true", default=default(False), help="debug logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_options(suppress=True)
    p = _Parser(prog="contsplat", description="Continual Gaussian-splatting scene updates.",
                parents=[_global_options(suppress=False)])
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def cmd(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    sp = cmd("init", cmd_init, "optimize a scene from posed images, starting from random points")
    sp.add_argument("--cameras", required=True, help="camera JSON")
    sp.add_argument("--images", required=True, help="directory of PNGs")
    sp.add_argument("--out", required=True, help="output scene file")
    sp.add_argument("--points", type=int, default=2000, help="initial Gaussian count")
    sp.add_argument("--bounds", type=float, nargs=6, metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1"),
                    help="box to seed points in (default: around where the optical axes meet)")

    sp = cmd("render", cmd_render, "render a scene from each camera to PNGs")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--cameras", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--raw", action="store_true", help="also write lossless .f32 dumps")

    sp = cmd("detect", cmd_detect, "write per-view dilated change masks")
    sp.add_argument("--scene", required=True, help="previous scene")
    sp.add_argument("--cameras", required=True)
    sp.add_argument("--images", required=True, help="directory of new PNGs")
    sp.add_argument("--out", required=True, help="mask directory")

    sp = cmd("update", cmd_update, "run a full continual update and record its delta")
    sp.add_argument("--scene", required=True, help="previous scene")
    sp.add_argument("--cameras", required=True)
    sp.add_argument("--images", required=True, help="directory of new PNGs")
    sp.add_argument("--out", required=True, help="updated scene file")
    sp.add_argument("--history", required=True, help="directory holding delta files")
    sp.add_argument("--changes", help="write the change set as JSON here")
    sp.add_argument("--log", help="write the training log CSV here")

    sp = cmd("recover", cmd_recover, "rebuild an earlier scene from the current one and its deltas")
    sp.add_argument("--scene", required=True, help="current scene")
    sp.add_argument("--history", required=True, help="directory holding delta files")
    sp.add_argument("--to", type=int, required=True, help="time index to recover")
    sp.add_argument("--current", type=int, help="time index of --scene (default: latest delta)")
    sp.add_argument("--out", required=True)

    sp = cmd("merge", cmd_merge, "merge updates made independently from the same scene")
    sp.add_argument("--base", required=True, help="scene both updates started from")
    sp.add_argument("--update", nargs=2, action="append", required=True, metavar=("SCENE", "DELTA"),
                    help="an updated scene and its delta; repeat per update")
    sp.add_argument("--out", required=True)

    sp = cmd("gen", cmd_gen, "generate a synthetic benchmark case")
    sp.add_argument("--op", choices=bench.CHANGE_OPS, default="add")
    sp.add_argument("--out", required=True, help="case directory")
    sp.add_argument("--width", type=int, default=320)
    sp.add_argument("--height", type=int, default=240)
    sp.add_argument("--gaussians", type=int, default=3000)
    sp.add_argument("--train-views", type=int, default=25)
    sp.add_argument("--test-views", type=int, default=10)

    sp = cmd("eval", cmd_eval, "update a benchmark case and report mask and image metrics")
    sp.add_argument("--case", required=True, help="directory written by gen")
    sp.add_argument("--scene", help="score this scene instead of the fresh update")
    sp.add_argument("--out", default="-", help="report JSON (default: stdout)")
    return p


def _set_threads(n: int) -> None:
    import numba

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", numba.NumbaWarning)
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"contsplat: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr, force=True)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        _set_threads(args.threads)
        cfg = _config(args)
        return args.func(args, cfg)
    except ContractError as exc:
        log.error("error: %s", exc)
        return EXIT_CONTRACT
    except (FormatError, OSError, json.JSONDecodeError) as exc:
        log.error("error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
