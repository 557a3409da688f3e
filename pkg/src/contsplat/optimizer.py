"""Masked photometric loss, per-Gaussian Adam and densification restricted to the changed set."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import COLOR, LOG_SCALE, N_PARAMS, OPACITY, POS, ROT, ChangeSet, GaussianScene, inside_spheres, quat_to_rotmat
from .errors import ContractError, DimensionMismatch, EmptyMask, IndexOutOfRange
from .rasterizer import GaussianGrads
from .ssim import ssim_and_grad


@dataclass
class OptimConfig:
    iterations: int = 500
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lambda_dssim: float = 0.2
    prune_interval: int = 15
    densify: bool = True
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    densify_max_count: int = 200_000
    opacity_prune_threshold: float = 5e-3
    percent_dense: float = 0.01
    # world-size reference: multiplies the position learning rate and sets the clone/split boundary;
    # None means 1.0 for direct use, and the camera spread inside an update
    scene_extent: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    precision: str = "f32"
    seed: int = 0

    def __post_init__(self):
        if self.prune_interval < 1:
            raise ContractError("prune_interval must be >= 1")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ContractError("lambda_dssim must lie in [0, 1]")
        if self.iterations < 0:
            raise ContractError("iterations must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "OptimConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    def position_lr(self, step: int) -> float:
        """Exponentially decayed position learning rate at ``step`` (log-linear interpolation)."""
        t = min(max(step / max(self.iterations, 1), 0.0), 1.0)
        lr = math.exp((1 - t) * math.log(self.lr_position) + t * math.log(self.lr_position_final))
        return lr * self.extent

    @property
    def extent(self) -> float:
        return 1.0 if self.scene_extent is None else float(self.scene_extent)

    def lr_vector(self, step: int) -> np.ndarray:
        lr = np.empty(N_PARAMS)
        lr[POS] = self.position_lr(step)
        lr[ROT] = self.lr_rotation
        lr[LOG_SCALE] = self.lr_scale
        lr[OPACITY] = self.lr_opacity
        lr[COLOR] = self.lr_color
        return lr


# ---------------------------------------------------------------------------
# loss


def _bbox(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def photometric_loss(rendered: np.ndarray, target: np.ndarray, pixel_mask: np.ndarray | None = None,
                     lambda_dssim: float = 0.2):
    """``(1 - lambda) * L1 + lambda * (1 - SSIM)`` over the masked pixels.

    Outside the mask the target replaces the render, so those pixels carry
    no gradient. SSIM is evaluated on the mask's bounding box and averaged
    over masked pixels only.
    """
    rendered = np.asarray(rendered)
    target = np.asarray(target)
    if rendered.shape != target.shape or rendered.ndim != 3:
        raise DimensionMismatch(f"image shapes differ: {rendered.shape} vs {target.shape}")
    if pixel_mask is None:
        pixel_mask = np.ones(rendered.shape[:2], dtype=bool)
    pixel_mask = np.asarray(pixel_mask, dtype=bool)
    if pixel_mask.shape != rendered.shape[:2]:
        raise DimensionMismatch(f"mask shape {pixel_mask.shape} != image {rendered.shape[:2]}")
    n = int(pixel_mask.sum())
    if n == 0:
        raise EmptyMask("pixel mask selects no pixels")

    ys, xs = _bbox(pixel_mask)
    m = pixel_mask[ys, xs][..., None]
    y = target[ys, xs].astype(np.float64)
    x = np.where(m, rendered[ys, xs].astype(np.float64), y)
    ch = rendered.shape[2]

    diff = x - y
    l1 = np.abs(diff).sum() / (n * ch)
    g = (1 - lambda_dssim) * np.sign(diff) / (n * ch)
    loss = (1 - lambda_dssim) * l1
    if lambda_dssim > 0:
        w = np.broadcast_to(m, x.shape) / (n * ch)
        s, g_s = ssim_and_grad(x, y, w)
        loss += lambda_dssim * (1 - s)
        g = g - lambda_dssim * g_s
    grad = np.zeros(rendered.shape, dtype=np.float64)
    grad[ys, xs] = np.where(m, g, 0.0)
    return float(loss), grad


# ---------------------------------------------------------------------------
# Adam


@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: np.ndarray = field(default_factory=lambda: OptimConfig().lr_vector(0))

    @classmethod
    def for_scene(cls, scene: GaussianScene, config: OptimConfig | None = None) -> "AdamState":
        cfg = config or OptimConfig()
        n = len(scene)
        return cls(np.zeros((n, N_PARAMS)), np.zeros((n, N_PARAMS)), 0, cfg.beta1, cfg.beta2, cfg.eps,
                   cfg.lr_vector(0))

    def resize(self, keep: np.ndarray, n_new: int) -> None:
        """Keep rows ``keep`` (in that order) and append ``n_new`` zeroed rows."""
        z = np.zeros((n_new, N_PARAMS))
        self.m = np.concatenate([self.m[keep], z])
        self.v = np.concatenate([self.v[keep], z])


def _dense_grads(grads, n: int, active: np.ndarray) -> np.ndarray:
    out = np.zeros((len(active), N_PARAMS))
    if isinstance(grads, GaussianGrads):
        gi = np.asarray(grads.indices, dtype=np.int64)
        if len(gi) and (gi.min() < 0 or gi.max() >= n):
            raise IndexOutOfRange("gradient index out of range")
        pos = np.searchsorted(active, gi)
        hit = (pos < len(active)) & (active[np.minimum(pos, len(active) - 1)] == gi) if len(active) else np.zeros(len(gi), bool)
        if not hit.all():
            raise IndexOutOfRange(f"gradient supplied for inactive Gaussian {int(gi[~hit][0])}")
        out[pos] = grads.params
        return out
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != (n, N_PARAMS):
        raise DimensionMismatch(f"gradient shape {g.shape} != {(n, N_PARAMS)}")
    inactive = np.ones(n, dtype=bool)
    inactive[active] = False
    bad = np.flatnonzero(inactive & (g != 0).any(axis=1))
    if len(bad):
        raise IndexOutOfRange(f"nonzero gradient for inactive Gaussian {int(bad[0])}")
    return g[active]


def _as_indices(active_set, n: int) -> np.ndarray:
    if isinstance(active_set, ChangeSet):
        active_set = active_set.indices
    idx = np.unique(np.asarray(active_set, dtype=np.int64).reshape(-1))
    if len(idx) and (idx[0] < 0 or idx[-1] >= n):
        raise IndexOutOfRange("active set index out of range")
    return idx


def adam_step(scene: GaussianScene, grads, state: AdamState, active_set):
    """One Adam update applied to ``active_set`` only; modifies ``scene`` and ``state`` in place.

    ``grads`` is a :class:`GaussianGrads` or a dense (N, 14) array that must be
    zero on inactive rows. Returns ``(scene, state)``.
    """
    n = len(scene)
    if state.m.shape != (n, N_PARAMS):
        raise DimensionMismatch(f"Adam state has {len(state.m)} rows, scene has {n}")
    idx = _as_indices(active_set, n)
    g = _dense_grads(grads, n, idx)
    state.t += 1
    if len(idx) == 0:
        return scene, state
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.m[idx] + (1 - b1) * g
    v = b2 * state.v[idx] + (1 - b2) * g * g
    state.m[idx] = m
    state.v[idx] = v
    m_hat = m / (1 - b1**state.t)
    v_hat = v / (1 - b2**state.t)
    p = scene.params[idx].astype(np.float64)
    p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    q = p[:, ROT]
    p[:, ROT] = q / np.linalg.norm(q, axis=1, keepdims=True)
    scene.params[idx] = p.astype(scene.dtype)
    return scene, state


# ---------------------------------------------------------------------------
# densification


class GradStats:
    """Running mean of the screen-space positional gradient norm per Gaussian."""

    def __init__(self, n: int):
        self.total = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)

    def add(self, indices, norms, visible=None) -> None:
        indices = np.asarray(indices, dtype=np.int64)
        norms = np.asarray(norms, dtype=np.float64)
        if visible is not None:
            indices = indices[visible]
            norms = norms[visible]
        np.add.at(self.total, indices, norms)
        np.add.at(self.count, indices, 1)

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.total / np.maximum(self.count, 1), 0.0)

    def resize(self, n: int) -> None:
        self.total = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)


@dataclass(eq=False)
class DensifyResult:
    scene: GaussianScene
    active_set: np.ndarray
    n_cloned: int = 0
    n_split: int = 0
    n_pruned: int = 0


def _sample_children(parent: np.ndarray, spheres, rng, tries: int = 10) -> np.ndarray:
    r = quat_to_rotmat(parent[ROT])
    s = np.exp(parent[LOG_SCALE])
    for _ in range(tries):
        pos = parent[POS] + r @ (s * rng.standard_normal(3))
        if not spheres or inside_spheres(pos[None], spheres)[0]:
            return pos
    return parent[POS].astype(np.float64)


def densify_and_prune(scene: GaussianScene, grad_stats, active_set, change_set: ChangeSet | None,
                      config: OptimConfig, state: AdamState | None = None, rng=None) -> DensifyResult:
    """Clone, split and prune among ``active_set``; new Gaussians are appended.

    Cloning copies small high-gradient Gaussians. Splitting replaces a large
    one in place by its first child and appends the second, each with scale
    divided by 1.6 and a position drawn from the parent's Gaussian, resampled
    to stay inside ``change_set.spheres``. Pruning deletes active Gaussians
    whose opacity falls below the threshold; when the active set is the
    scene's suffix, the statics in front keep their indices.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    n = len(scene)
    idx = _as_indices(active_set, n)
    spheres = list(change_set.spheres) if change_set is not None else []
    mean_grad = grad_stats.mean() if isinstance(grad_stats, GradStats) else np.asarray(grad_stats, dtype=np.float64)
    if mean_grad.shape != (n,):
        raise DimensionMismatch(f"grad stats length {mean_grad.shape} != scene size {n}")

    params = scene.params
    big = np.exp(params[idx][:, LOG_SCALE].astype(np.float64)).max(axis=1) > config.percent_dense * config.extent
    hot = mean_grad[idx] >= config.densify_grad_threshold
    room = max(config.densify_max_count - len(idx), 0)
    clone = idx[hot & ~big]
    split = idx[hot & big]
    # enforce the cap on how many Gaussians may be added, hottest first
    if len(clone) + len(split) > room:
        cand = np.concatenate([clone, split])
        keep = cand[np.argsort(-mean_grad[cand], kind="stable")[:room]]
        clone = np.intersect1d(clone, keep)
        split = np.intersect1d(split, keep)

    params = params.copy()
    appended = [params[clone]]
    shrink = np.log(1.6)
    second = np.empty((len(split), N_PARAMS), dtype=params.dtype)
    for j, i in enumerate(split):
        parent = params[i].astype(np.float64)
        child = parent.copy()
        child[LOG_SCALE] -= shrink
        c1 = child.copy()
        c1[POS] = _sample_children(parent, spheres, rng)
        c2 = child.copy()
        c2[POS] = _sample_children(parent, spheres, rng)
        params[i] = c1
        second[j] = c2
    appended.append(second)
    new_rows = np.concatenate(appended)
    params = np.concatenate([params, new_rows])
    n_new = len(new_rows)
    active_after = np.concatenate([idx, np.arange(n, n + n_new)])

    op = 1.0 / (1.0 + np.exp(-params[active_after, OPACITY].astype(np.float64)))
    dead = active_after[op < config.opacity_prune_threshold]
    keep = np.ones(len(params), dtype=bool)
    keep[dead] = False
    remap = np.cumsum(keep) - 1
    survivors = active_after[keep[active_after]]
    new_active = remap[survivors]

    if state is not None:
        state.m[split] = 0
        state.v[split] = 0
        state.resize(np.arange(n), n_new)
        state.m = state.m[keep]
        state.v = state.v[keep]
    if isinstance(grad_stats, GradStats):
        grad_stats.resize(int(keep.sum()))

    out = GaussianScene(params[keep])
    return DensifyResult(out, np.sort(new_active), len(clone), len(split), len(dead))


def prune_outside(scene: GaussianScene, active_set, spheres, state: AdamState | None = None,
                  grad_stats: GradStats | None = None):
    """Remove active Gaussians whose centre left the union of ``spheres``.

    Returns ``(scene, active_set, n_removed)``.
    """
    n = len(scene)
    idx = _as_indices(active_set, n)
    if not spheres or len(idx) == 0:
        return scene, idx, 0
    out = ~inside_spheres(scene.positions[idx].astype(np.float64), spheres)
    if not out.any():
        return scene, idx, 0
    keep = np.ones(n, dtype=bool)
    keep[idx[out]] = False
    remap = np.cumsum(keep) - 1
    if state is not None:
        state.m = state.m[keep]
        state.v = state.v[keep]
    if grad_stats is not None:
        grad_stats.total = grad_stats.total[keep]
        grad_stats.count = grad_stats.count[keep]
    return GaussianScene(scene.params[keep]), remap[idx[~out]], int(out.sum())


# ---------------------------------------------------------------------------
# training log


class TrainingLog:
    """Rows of (iteration, loss, active tile count, wall time), written as CSV."""

    header = ("iteration", "loss", "active_tiles", "wall_time")

    def __init__(self):
        self.rows: list[tuple] = []

    def append(self, iteration: int, loss: float, active_tiles: int, wall_time: float) -> None:
        self.rows.append((iteration, loss, active_tiles, wall_time))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.header)
            w.writerows(self.rows)
