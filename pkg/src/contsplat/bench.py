"""Synthetic benchmark: procedural scenes, object-level changes, cameras and metrics."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .continual import UpdateConfig, camera_extent, optimize_local, update_scene
from .core import Camera, GaussianScene
from .errors import ContractError, DimensionMismatch, NoObjects
from .rasterizer import compute_tile_mask, render
from .ssim import ssim_map

Z_UP = np.array([0.0, 0.0, 1.0])
CHANGE_OPS = ("add", "remove", "move", "multi")
DEFAULT_PALETTE = (
    (0.85, 0.15, 0.12),
    (0.12, 0.55, 0.85),
    (0.95, 0.80, 0.10),
    (0.20, 0.70, 0.25),
    (0.60, 0.25, 0.70),
    (0.95, 0.50, 0.10),
    (0.10, 0.75, 0.70),
    (0.90, 0.30, 0.55),
)
# neutral greys: a tinted ground shares a direction with warm palette colours
GROUND_TONES = ((0.62, 0.62, 0.62), (0.38, 0.38, 0.38))


@dataclass
class SceneSpec:
    n_gaussians: int = 3000
    extent: float = 4.0
    n_objects: int = 5
    ground_fraction: float = 0.6
    object_size: float = 0.5
    palette: tuple = DEFAULT_PALETTE

    def __post_init__(self):
        if self.n_gaussians < 10:
            raise ContractError("a benchmark scene needs at least 10 Gaussians")
        if not 0.0 < self.ground_fraction < 1.0:
            raise ContractError("ground_fraction must lie in (0, 1)")


@dataclass(eq=False)
class BenchScene:
    scene: GaussianScene
    labels: np.ndarray  # -1 for ground, otherwise the object id
    boxes: dict  # object id -> (lo, hi) corners of its placement box
    spec: SceneSpec = field(default_factory=SceneSpec)

    @property
    def object_ids(self) -> list[int]:
        return sorted(self.boxes)

    def centroid(self, label: int) -> np.ndarray:
        return self.scene.positions[self.labels == label].astype(np.float64).mean(axis=0)


@dataclass(eq=False)
class ChangeOutcome:
    bench: BenchScene
    changed: list  # object ids affected
    region: np.ndarray  # point the update cameras should look at
    spread: float  # rough radius of the changed region
    ops: list = field(default_factory=list)
    shift: np.ndarray | None = None


def _logit(p: float) -> float:
    return math.log(p / (1 - p))


def _random_quats(rng, n: int) -> np.ndarray:
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.sign(q[:, :1] + 1e-12)


def _object_rows(rng, center, size, n, color) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    half = np.array([size / 2, size / 2, size / 2])
    base = np.array([center[0], center[1], size / 2])
    lo, hi = base - half, base + half
    # ellipsoid fill keeps the silhouette rounded
    pts = rng.standard_normal((n, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts *= rng.uniform(0, 1, (n, 1)) ** (1 / 3)
    pos = base + pts * half
    s = 0.9 * size / max(n, 1) ** (1 / 3)
    rows = np.zeros((n, 14))
    rows[:, 0:3] = pos
    rows[:, 3:7] = _random_quats(rng, n)
    rows[:, 7:10] = np.log(s * rng.uniform(0.6, 1.2, (n, 3)))
    rows[:, 10] = _logit(0.9)
    shade = 0.75 + 0.25 * (pos[:, 2:3] - lo[2]) / size
    rows[:, 11:14] = np.clip(np.asarray(color) * shade + rng.normal(0, 0.03, (n, 3)), 0.02, 0.98)
    return rows, (lo, hi)


def _free_spot(rng, taken: Sequence[np.ndarray], extent: float, size: float, tries: int = 1000) -> np.ndarray:
    """A ground position at least 2.5 object sizes from every taken one.

    A crowded layout falls back to the roomiest candidate seen, provided
    the objects still do not touch.
    """
    lim = 0.35 * extent
    best, best_gap = None, -1.0
    for _ in range(tries):
        c = rng.uniform(-lim, lim, 2)
        gap = min((float(np.linalg.norm(c - t)) for t in taken), default=math.inf)
        if gap >= 2.5 * size:
            return c
        if gap > best_gap:
            best, best_gap = c, gap
    if best_gap >= 1.5 * size:
        return best
    raise ContractError("no free spot for another object; enlarge the extent")


def gen_scene(seed: int, spec: SceneSpec | None = None) -> BenchScene:
    """Checkered ground plane of flat Gaussians with ``n_objects`` coloured blobs on top."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    n_ground = int(round(spec.n_gaussians * spec.ground_fraction))
    n_obj = spec.n_gaussians - n_ground
    side = math.ceil(math.sqrt(n_ground))
    step = spec.extent / side
    gx, gy = np.meshgrid(np.arange(side), np.arange(side))
    cells = np.stack([gx.ravel(), gy.ravel()], axis=1)[:n_ground]
    xy = -spec.extent / 2 + (cells + 0.5 + rng.uniform(-0.25, 0.25, cells.shape)) * step
    ground = np.zeros((n_ground, 14))
    ground[:, 0:2] = xy
    yaw = rng.uniform(0, np.pi, n_ground)
    ground[:, 3] = np.cos(yaw / 2)
    ground[:, 6] = np.sin(yaw / 2)
    ground[:, 7:9] = np.log(0.75 * step)
    ground[:, 9] = np.log(0.05 * step)
    ground[:, 10] = _logit(0.95)
    checker = (np.floor(xy[:, 0] / (spec.extent / 8)) + np.floor(xy[:, 1] / (spec.extent / 8))) % 2
    tones = np.asarray(GROUND_TONES)[checker.astype(int)]
    ground[:, 11:14] = np.clip(tones + rng.normal(0, 0.02, (n_ground, 3)), 0.02, 0.98)

    rows = [ground]
    labels = [np.full(n_ground, -1)]
    boxes = {}
    centers = []
    per = np.full(spec.n_objects, n_obj // max(spec.n_objects, 1))
    per[: n_obj - per.sum()] += 1
    for k in range(spec.n_objects):
        c = _free_spot(rng, centers, spec.extent, spec.object_size)
        centers.append(c)
        r, box = _object_rows(rng, c, spec.object_size, int(per[k]), spec.palette[k % len(spec.palette)])
        rows.append(r)
        labels.append(np.full(len(r), k))
        boxes[k] = box
    scene = GaussianScene(np.concatenate(rows).astype(np.float32))
    return BenchScene(scene, np.concatenate(labels), boxes, spec)


def apply_change(bench: BenchScene, op: str, seed: int) -> ChangeOutcome:
    """Add, remove or move one object, or combine an add with a removal ("multi")."""
    if op not in CHANGE_OPS:
        raise ContractError(f"unknown change {op!r}; expected one of {CHANGE_OPS}")
    rng = np.random.default_rng(seed)
    spec = bench.spec
    ids = bench.object_ids
    if op in ("remove", "move", "multi") and not ids:
        raise NoObjects(f"{op} needs at least one object")
    params = bench.scene.params.copy()
    labels = bench.labels.copy()
    boxes = dict(bench.boxes)
    centers = {k: (lo[:2] + hi[:2]) / 2 for k, (lo, hi) in boxes.items()}

    def add():
        nonlocal params, labels
        new_id = max(ids, default=-1) + 1
        c = _free_spot(rng, list(centers.values()), spec.extent, spec.object_size)
        n = max(int(np.mean([np.sum(labels == k) for k in centers])) if centers else 50, 10)
        color = spec.palette[new_id % len(spec.palette)]
        r, box = _object_rows(rng, c, spec.object_size, n, color)
        params = np.concatenate([params, r.astype(np.float32)])
        labels = np.concatenate([labels, np.full(n, new_id)])
        boxes[new_id] = box
        centers[new_id] = c
        return new_id, np.array([c[0], c[1], spec.object_size / 2])

    def remove(k):
        nonlocal params, labels
        keep = labels != k
        center = params[~keep, 0:3].astype(np.float64).mean(axis=0)
        params = params[keep]
        labels = labels[keep]
        del boxes[k]
        del centers[k]
        return center

    if op == "add":
        new_id, where = add()
        out = BenchScene(GaussianScene(params), labels, boxes, spec)
        return ChangeOutcome(out, [new_id], where, spec.object_size, ["add"])
    if op == "remove":
        k = int(rng.choice(ids))
        where = remove(k)
        out = BenchScene(GaussianScene(params), labels, boxes, spec)
        return ChangeOutcome(out, [k], where, spec.object_size, ["remove"])
    if op == "move":
        k = int(rng.choice(ids))
        others = [c for j, c in centers.items() if j != k]
        old = centers[k]
        for _ in range(1000):
            dest = _free_spot(rng, others, spec.extent, spec.object_size)
            if 1.5 * spec.object_size <= np.linalg.norm(dest - old) <= 4 * spec.object_size:
                break
        shift = np.array([dest[0] - old[0], dest[1] - old[1], 0.0])
        sel = labels == k
        params[sel, 0:3] = (params[sel, 0:3].astype(np.float64) + shift).astype(np.float32)
        lo, hi = boxes[k]
        boxes[k] = (lo + shift, hi + shift)
        out = BenchScene(GaussianScene(params), labels, boxes, spec)
        mid = np.array([(old[0] + dest[0]) / 2, (old[1] + dest[1]) / 2, spec.object_size / 2])
        return ChangeOutcome(out, [k], mid, spec.object_size + np.linalg.norm(shift) / 2, ["move"], shift)
    # multi: remove one existing object and add a new one elsewhere
    k = int(rng.choice(ids))
    gone = remove(k)
    new_id, where = add()
    out = BenchScene(GaussianScene(params), labels, boxes, spec)
    mid = (gone + where) / 2
    return ChangeOutcome(out, [k, new_id], mid, spec.object_size + np.linalg.norm(gone - where) / 2, ["remove", "add"])


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class Intrinsics:
    width: int = 320
    height: int = 240
    fx: float = 260.0
    fy: float = 260.0

    @property
    def cx(self) -> float:
        return (self.width - 1) / 2

    @property
    def cy(self) -> float:
        return (self.height - 1) / 2

    def scaled(self, width: int, height: int) -> "Intrinsics":
        return Intrinsics(width, height, self.fx * width / self.width, self.fy * height / self.height)


def orbit_cameras(n: int, center, radius: float, height: float, intrinsics: Intrinsics | None = None,
                  phase: float = 0.0) -> list[Camera]:
    """``n`` cameras evenly spaced on a horizontal circle, all looking at ``center``."""
    if n < 1:
        raise ContractError("need at least one camera")
    k = intrinsics or Intrinsics()
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for i in range(n):
        a = phase + 2 * np.pi * i / n
        eye = center + np.array([radius * np.cos(a), radius * np.sin(a), height])
        cams.append(Camera.look_at(eye, center, Z_UP, k.fx, k.fy, k.cx, k.cy, k.width, k.height))
    return cams


# ---------------------------------------------------------------------------
# metrics


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; ``inf`` when they are identical."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def ssim(a, b) -> float:
    a, b = _pair(a, b)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    s, _ = ssim_map(a, b)
    return float(s.mean())


@dataclass(frozen=True)
class PR:
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


def mask_pr(predicted: Sequence[np.ndarray], truth: Sequence[np.ndarray]) -> PR:
    """Pixel precision and recall pooled over all views (1.0 when the denominator is empty)."""
    if len(predicted) != len(truth):
        raise DimensionMismatch(f"{len(predicted)} predicted masks vs {len(truth)} ground truth")
    tp = fp = fn = 0
    for p, t in zip(predicted, truth):
        p = np.asarray(getattr(p, "mask", p), dtype=bool)
        t = np.asarray(getattr(t, "mask", t), dtype=bool)
        if p.shape != t.shape:
            raise DimensionMismatch(f"mask shapes differ: {p.shape} vs {t.shape}")
        tp += int((p & t).sum())
        fp += int((p & ~t).sum())
        fn += int((~p & t).sum())
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return PR(precision, recall, tp, fp, fn)


def gt_change_masks(before: GaussianScene, after: GaussianScene, cameras: Sequence[Camera],
                    precision=None) -> list[np.ndarray]:
    """Pixels whose rendered colour changes by more than 1/255 in any channel."""
    out = []
    for cam in cameras:
        a = render(before, cam, precision=precision).image.astype(np.float64)
        b = render(after, cam, precision=precision).image.astype(np.float64)
        out.append(np.abs(a - b).max(axis=2) > 1.0 / 255.0)
    return out


# ---------------------------------------------------------------------------
# benchmark harness


@dataclass
class BenchConfig:
    seed: int = 0
    scene: SceneSpec = field(default_factory=SceneSpec)
    intrinsics: Intrinsics = field(default_factory=Intrinsics)
    n_train: int = 25
    n_test: int = 10
    train_radius: float = 2.2
    train_height: float = 1.6
    test_radius: float = 1.8
    test_height: float = 2.2


@dataclass(eq=False)
class BenchCase:
    op: str
    before: BenchScene
    change: ChangeOutcome
    train_cameras: list
    train_images: list
    test_cameras: list
    test_images: list

    @property
    def after(self) -> GaussianScene:
        return self.change.bench.scene


def _aim(change: ChangeOutcome, cfg: BenchConfig):
    extra = max(change.spread - cfg.scene.object_size, 0.0)
    return change.region, cfg.train_radius + 1.5 * extra, cfg.train_height + extra, cfg.test_radius + 1.5 * extra, \
        cfg.test_height + extra


def make_case(op: str, cfg: BenchConfig | None = None, precision=None) -> BenchCase:
    """Scene before and after ``op``, sparse training views and held-out test views of the change."""
    cfg = cfg or BenchConfig()
    before = gen_scene(cfg.seed, cfg.scene)
    change = apply_change(before, op, cfg.seed + 1)
    center, tr, th, er, eh = _aim(change, cfg)
    train = orbit_cameras(cfg.n_train, center, tr, th, cfg.intrinsics)
    test = orbit_cameras(cfg.n_test, center, er, eh, cfg.intrinsics, phase=np.pi / cfg.n_test)
    after = change.bench.scene
    train_img = [render(after, c, precision=precision).image for c in train]
    test_img = [render(after, c, precision=precision).image for c in test]
    return BenchCase(op, before, change, train, train_img, test, test_img)


def mean_psnr(scene: GaussianScene, cameras: Sequence[Camera], images: Sequence[np.ndarray], precision=None) -> float:
    return float(np.mean([psnr(render(scene, c, precision=precision).image, im) for c, im in zip(cameras, images)]))


def naive_finetune(scene: GaussianScene, cameras, images, config):
    """Baseline: optimize every Gaussian on full frames, no change detection or spheres."""
    if config.scene_extent is None:
        config = replace(config, scene_extent=camera_extent(cameras))
    return optimize_local(scene, np.arange(len(scene)), [], images, cameras, config, full_frame=True).scene


def run_case(case: BenchCase, update_config=None, naive: bool = True, precision=None) -> dict:
    """Update ``case.before`` from the training views and score it on the held-out views."""
    ucfg = update_config or UpdateConfig()
    t0 = time.perf_counter()
    res = update_scene(case.before.scene, case.train_images, case.train_cameras, ucfg)
    t_update = time.perf_counter() - t0

    truth = gt_change_masks(case.before.scene, case.after, case.train_cameras, precision)
    dilated = mask_pr(res.masks, truth)
    idx = res.change_set.indices
    tiles = [compute_tile_mask(res.scene, idx, c).pixel_mask() for c in case.train_cameras]
    tile_pr = mask_pr(tiles, truth)

    report = {
        "op": case.op,
        "status": res.status,
        "psnr_pre": mean_psnr(case.before.scene, case.test_cameras, case.test_images, precision),
        "psnr_post": mean_psnr(res.scene, case.test_cameras, case.test_images, precision),
        "ssim_post": float(np.mean([ssim(render(res.scene, c).image, im)
                                    for c, im in zip(case.test_cameras, case.test_images)])),
        "mask_precision": dilated.precision,
        "mask_recall": dilated.recall,
        "tile_precision": tile_pr.precision,
        "tile_recall": tile_pr.recall,
        "changed_gaussians": int(len(idx)),
        "scene_size": len(res.scene),
        "update_seconds": t_update,
        "static_prefix_intact": bool(
            np.array_equal(
                res.scene.params[: res.delta.static_count].view(np.uint32),
                case.before.scene.params[~res.delta.bitmap].view(np.uint32),
            )
        ) if res.changed else res.scene.equals(case.before.scene),
    }
    if naive:
        t0 = time.perf_counter()
        base = naive_finetune(case.before.scene, case.train_cameras, case.train_images, ucfg.optim)
        report["psnr_naive"] = mean_psnr(base, case.test_cameras, case.test_images, precision)
        report["naive_seconds"] = time.perf_counter() - t0
    report["result"] = res
    return report
