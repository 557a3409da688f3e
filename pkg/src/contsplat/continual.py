"""End-to-end continual update: detect, lift, sample, then optimize only the changed region."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .change2d import BUILTIN, TAU1, detect_changes
from .core import Camera, ChangeSet, GaussianScene, Sphere, inside_spheres
from .errors import ContractError, DimensionMismatch, NoViews, SamplingStalled
from .history import DeltaRecord, record_delta
from .lift3d import (
    DEFAULT_SAMPLES,
    MAX_ROUNDS,
    cluster,
    fit_spheres,
    init_new_gaussians,
    sample_points,
    vote,
)
from .optimizer import (
    AdamState,
    GradStats,
    OptimConfig,
    TrainingLog,
    adam_step,
    densify_and_prune,
    photometric_loss,
    prune_outside,
)
from .rasterizer import TileMask, backward, compute_tile_mask, project_scene, render

CHANGED = "changed"
NO_CHANGE = "no change detected"


@dataclass
class UpdateConfig:
    extractor: str = BUILTIN
    tau1: float = TAU1
    n_samples: int = DEFAULT_SAMPLES
    max_rounds: int = MAX_ROUNDS
    min_cluster_size: int | None = None
    time_index: int = 1
    seed: int = 0
    optim: OptimConfig = field(default_factory=OptimConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "UpdateConfig":
        """Top-level keys of this class plus an ``optim`` table; unknown top-level keys go to ``optim``."""
        d = dict(d)
        own = {f.name for f in fields(cls)} - {"optim"}
        optim = dict(d.pop("optim", {}))
        kwargs = {}
        for k, v in d.items():
            if k in own:
                kwargs[k] = v
            else:
                optim[k] = v
        return cls(optim=OptimConfig.from_dict(optim), **kwargs)

    @classmethod
    def from_json(cls, path) -> "UpdateConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class UpdateResult:
    scene: GaussianScene
    change_set: ChangeSet
    delta: DeltaRecord
    status: str
    stats: dict = field(default_factory=dict)
    log: TrainingLog | None = None
    masks: list = field(default_factory=list)

    @property
    def changed(self) -> bool:
        return self.status == CHANGED


@dataclass(eq=False)
class LocalResult:
    scene: GaussianScene
    active: np.ndarray
    log: TrainingLog
    pruned: int = 0  # sphere and opacity pruning together
    sphere_pruned: int = 0
    densified: int = 0
    mean_iter_time: float = 0.0
    active_tile_fraction: float = 0.0


def camera_extent(cameras: Sequence[Camera]) -> float:
    """Spatial learning-rate scale: 1.1 times the largest camera distance from the mean camera centre."""
    centers = np.array([c.center for c in cameras])
    return 1.1 * float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()) or 1.0


def optimize_local(scene: GaussianScene, active, spheres: Sequence[Sphere], images: Sequence[np.ndarray],
                   cameras: Sequence[Camera], config: OptimConfig, full_frame: bool = False,
                   rng: np.random.Generator | None = None) -> LocalResult:
    """Optimize the Gaussians in ``active`` against ``images``; everything else stays frozen.

    Each iteration renders only the tiles touched by the active Gaussians
    (all tiles when ``full_frame``). Active Gaussians whose centres leave the
    spheres are removed every ``config.prune_interval`` iterations and once
    more at the end. Returns the new scene and the surviving active indices.
    """
    if len(images) != len(cameras):
        raise DimensionMismatch(f"{len(images)} images for {len(cameras)} cameras")
    if len(cameras) == 0:
        raise NoViews("optimization needs at least one view")
    scene = scene.copy()
    active = np.unique(np.asarray(active, dtype=np.int64).reshape(-1))
    if len(active) and (active[0] < 0 or active[-1] >= len(scene)):
        raise ContractError("active index out of range")
    spheres = list(spheres)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    state = AdamState.for_scene(scene, config)
    stats = GradStats(len(scene))
    log = TrainingLog()
    pruned = sphere_pruned = densified = 0
    times = []
    fractions = []
    targets = [np.asarray(im, dtype=np.float64) for im in images]

    for it in range(config.iterations):
        if len(active) == 0:
            break
        t0 = time.perf_counter()
        k = it % len(cameras)
        cam = cameras[k]
        state.lr = config.lr_vector(it)
        proj = project_scene(scene, cam, config.precision)
        mask = TileMask.full(cam.width, cam.height) if full_frame else compute_tile_mask(scene, active, cam, proj)
        if mask.count():
            fwd = render(scene, cam, mask, projection=proj)
            loss, gimg = photometric_loss(fwd.image, targets[k], mask.pixel_mask(), config.lambda_dssim)
            grads = backward(scene, cam, mask, gimg, active, forward=fwd)
            adam_step(scene, grads, state, active)
            seen = proj.rect[grads.indices, 0] >= 0
            stats.add(grads.indices, grads.screen, seen)
        else:
            loss = float("nan")
        step = it + 1
        if spheres and step % config.prune_interval == 0:
            scene, active, n = prune_outside(scene, active, spheres, state, stats)
            pruned += n
            sphere_pruned += n
        if config.densify and step % config.densify_interval == 0 and step < config.iterations:
            res = densify_and_prune(scene, stats, active, ChangeSet(np.zeros(0), spheres), config, state, rng)
            densified += res.n_cloned + res.n_split
            pruned += res.n_pruned
            scene, active = res.scene, res.active_set
        dt = time.perf_counter() - t0
        times.append(dt)
        fractions.append(mask.fraction())
        log.append(step, loss, mask.count(), dt)

    if spheres:
        scene, active, n = prune_outside(scene, active, spheres)
        pruned += n
        sphere_pruned += n
    return LocalResult(scene, active, log, pruned, sphere_pruned, densified,
                       float(np.mean(times)) if times else 0.0, float(np.mean(fractions)) if fractions else 0.0)


def update_scene(prev: GaussianScene, images: Sequence[np.ndarray], cameras: Sequence[Camera],
                 config: UpdateConfig | None = None, feature_paths=None) -> UpdateResult:
    """Update ``prev`` to match ``images``, touching only the region that changed.

    When nothing changes the result carries ``prev`` itself, an empty delta
    and status ``"no change detected"``.
    """
    cfg = config or UpdateConfig()
    if len(cameras) < 3:
        raise NoViews(f"an update needs at least 3 views, got {len(cameras)}")
    if len(images) != len(cameras):
        raise DimensionMismatch(f"{len(images)} images for {len(cameras)} cameras")
    rng = np.random.default_rng(cfg.seed)
    stats: dict = {}
    t0 = time.perf_counter()

    masks = detect_changes(prev, images, cameras, cfg.extractor, cfg.tau1, feature_paths, cfg.optim.precision)
    stats["mask_fraction"] = float(np.mean([m.mask.mean() for m in masks]))
    changed = vote(prev, masks, cameras)
    stats["voted"] = int(len(changed))

    def unchanged() -> UpdateResult:
        _, empty = record_delta(prev, [], cfg.time_index)
        return UpdateResult(prev, ChangeSet(), empty, NO_CHANGE, stats, masks=masks)

    if not any(m.any() for m in masks):
        return unchanged()
    scene, delta = record_delta(prev, changed, cfg.time_index)
    first = delta.static_count
    try:
        sampled = sample_points(scene.positions[first:].astype(np.float64), scene, masks, cameras,
                                cfg.n_samples, rng, cfg.max_rounds)
    except SamplingStalled:
        if len(changed) == 0:
            return unchanged()
        raise
    stats["sampled"] = int(len(sampled.new_points))
    stats["sampling_capped"] = sampled.capped
    if len(sampled.points) == 0:
        return unchanged()

    if len(sampled.new_points):
        fresh = init_new_gaussians(sampled.new_points, masks, images, cameras, scene, knn_points=sampled.points)
        scene = scene.concat(GaussianScene.from_gaussians(fresh, dtype=scene.dtype))
    active = np.arange(first, len(scene))

    positions = scene.positions[active].astype(np.float64)
    groups = cluster(positions, cfg.min_cluster_size)
    clusters = groups.clusters if len(groups) else [np.arange(len(positions))]
    spheres = fit_spheres(positions, clusters)
    stats["clusters"] = len(spheres)
    stats["noise"] = int(len(groups.noise)) if len(groups) else 0

    optim = cfg.optim
    if optim.scene_extent is None:
        optim = replace(optim, scene_extent=camera_extent(cameras))
    local = optimize_local(scene, active, spheres, images, cameras, optim, rng=rng)
    stats["final_active"] = int(len(local.active))
    stats["pruned"] = local.pruned
    stats["sphere_pruned"] = local.sphere_pruned
    stats["densified"] = local.densified
    stats["mean_iter_time"] = local.mean_iter_time
    stats["seconds"] = time.perf_counter() - t0
    return UpdateResult(local.scene, ChangeSet(local.active, spheres), delta, CHANGED, stats, local.log, masks)


def changed_inside_spheres(result: UpdateResult) -> bool:
    cs = result.change_set
    if not len(cs.indices):
        return True
    return bool(inside_spheres(result.scene.positions[cs.indices].astype(np.float64), cs.spheres).all())
