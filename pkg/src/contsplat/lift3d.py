"""Lift per-view 2D change masks to a 3D changed set."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .change2d import ChangeMask2D
from .clustering import ClusterSet, hdbscan, kmeans
from .core import (
    Camera,
    Gaussian,
    GaussianScene,
    Sphere,
    knn_mean_distance,
    project_points,
    scene_aabb,
)
from .errors import (
    ContractError,
    DimensionMismatch,
    EmptyCluster,
    EmptyInput,
    EmptyScene,
    NoViews,
    SamplingStalled,
    TooFewPoints,
)

DEFAULT_SAMPLES = 500
MAX_ROUNDS = 50
SPHERE_QUANTILE = 0.98
SPHERE_INFLATE = 1.1
MIN_RADIUS = 1e-3
KMEANS_K = 10
KMEANS_ITERS = 20
VAR_FLOOR = 1e-6
NEW_OPACITY = 0.1


@dataclass(eq=False)
class VoteCounts:
    c: np.ndarray
    o: np.ndarray
    n_views: int

    def selected(self) -> np.ndarray:
        return ((4.0 / 3.0) * self.o < self.n_views) & (self.n_views < 2 * self.c)


def _mask_arrays(masks) -> list[np.ndarray]:
    return [m.mask if isinstance(m, ChangeMask2D) else np.asarray(m, dtype=bool) for m in masks]


def count_votes(points: np.ndarray, masks, cameras: Sequence[Camera]) -> VoteCounts:
    """Per point: views whose mask is true at the projected centre (c) and views it misses (o)."""
    masks = _mask_arrays(masks)
    if len(cameras) == 0:
        raise NoViews("voting needs at least one view")
    if len(masks) != len(cameras):
        raise DimensionMismatch(f"{len(masks)} masks for {len(cameras)} cameras")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    c = np.zeros(len(pts), dtype=np.int64)
    o = np.zeros(len(pts), dtype=np.int64)
    for m, cam in zip(masks, cameras):
        if m.shape != (cam.height, cam.width):
            raise DimensionMismatch(f"mask {m.shape} vs camera {(cam.height, cam.width)}")
        uv, _, front = project_points(cam, pts)
        px = np.floor(np.where(front, uv[:, 0], -1.0) + 0.5)
        py = np.floor(np.where(front, uv[:, 1], -1.0) + 0.5)
        inside = front & (px >= 0) & (py >= 0) & (px < cam.width) & (py < cam.height)
        o += ~inside
        xi = px[inside].astype(np.int64)
        yi = py[inside].astype(np.int64)
        hit = np.zeros(len(pts), dtype=bool)
        hit[inside] = m[yi, xi]
        c += hit
    return VoteCounts(c, o, len(cameras))


def vote(scene: GaussianScene, masks, cameras: Sequence[Camera]) -> np.ndarray:
    """Indices of Gaussians with ``(4/3) o < N < 2 c``."""
    counts = count_votes(scene.positions, masks, cameras)
    return np.flatnonzero(counts.selected())


def default_min_cluster_size(n_points: int) -> int:
    return max(20, math.ceil(0.01 * n_points))


def cluster(points: np.ndarray, min_cluster_size: int | None = None) -> ClusterSet:
    """HDBSCAN over Euclidean distance with excess-of-mass selection.

    When the hierarchy never splits, the whole set is one cluster and points
    that separate from it far later than the rest are noise.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInput("cannot cluster zero points")
    mcs = default_min_cluster_size(len(pts)) if min_cluster_size is None else int(min_cluster_size)
    if mcs < 2:
        raise ContractError("min_cluster_size must be >= 2")
    return hdbscan(pts, mcs)


def fit_spheres(points: np.ndarray, clusters: ClusterSet | Sequence[np.ndarray]) -> list[Sphere]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    members = clusters.clusters if isinstance(clusters, ClusterSet) else clusters
    out = []
    for idx in members:
        idx = np.asarray(idx, dtype=np.int64)
        if len(idx) == 0:
            raise EmptyCluster("cannot fit a sphere to an empty cluster")
        p = pts[idx]
        center = p.mean(axis=0)
        d = np.quantile(np.linalg.norm(p - center, axis=1), SPHERE_QUANTILE)
        out.append(Sphere(center, max(SPHERE_INFLATE * float(d), MIN_RADIUS)))
    return out


# ---------------------------------------------------------------------------
# point sampling


def _accept(points: np.ndarray, masks, cameras) -> np.ndarray:
    if len(points) == 0:
        return points.reshape(0, 3)
    return points[count_votes(points, masks, cameras).selected()]


def random_sample(scene: GaussianScene, masks, cameras: Sequence[Camera], n: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Uniform candidates in the scene bounding box, kept when they pass the vote."""
    if len(scene) == 0:
        raise EmptyScene("random sampling needs a non-empty scene")
    lo, hi = scene_aabb(scene)
    pts = rng.uniform(lo.astype(np.float64), hi.astype(np.float64), size=(n, 3))
    return _accept(pts, masks, cameras)


def region_mixture(points: np.ndarray, rng: np.random.Generator):
    """K-means components as (means, variances) of an equal-weight diagonal mixture."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInput("region sampling needs at least one point")
    centroids, labels = kmeans(pts, min(KMEANS_K, len(pts)), rng, KMEANS_ITERS)
    var = np.full_like(centroids, VAR_FLOOR)
    for j in range(len(centroids)):
        m = pts[labels == j]
        if len(m):
            far = m[np.argmax(np.linalg.norm(m - centroids[j], axis=1))]
            var[j] = np.maximum((far - centroids[j]) ** 2, VAR_FLOOR)
    return centroids, var


def sample_region(points: np.ndarray, masks, cameras: Sequence[Camera], n: int,
                  rng: np.random.Generator, return_drawn: bool = False):
    """Draw ``ceil(n / 5)`` points from a mixture fitted to ``points`` and keep those passing the vote."""
    means, var = region_mixture(points, rng)
    m = math.ceil(n / 5)
    comp = rng.integers(len(means), size=m)
    drawn = means[comp] + np.sqrt(var[comp]) * rng.standard_normal((m, 3))
    accepted = _accept(drawn, masks, cameras)
    return (accepted, drawn) if return_drawn else accepted


@dataclass(eq=False)
class SampleResult:
    points: np.ndarray  # the changed-set positions followed by accepted samples
    new_points: np.ndarray  # accepted samples only
    rounds: int
    capped: bool


def sample_points(changed_positions: np.ndarray, scene: GaussianScene, masks, cameras: Sequence[Camera],
                  n: int = DEFAULT_SAMPLES, rng: np.random.Generator | None = None,
                  max_rounds: int = MAX_ROUNDS) -> SampleResult:
    """Grow the changed set's point cloud to at least ``n`` points.

    An empty set is seeded by full-scene sampling, otherwise the cloud is
    extended from a mixture fitted to the points gathered so far.
    """
    if n < 1:
        raise ContractError("sample count n must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    base = np.asarray(changed_positions, dtype=np.float64).reshape(-1, 3)
    pts = base
    rounds = 0
    while len(pts) < n:
        if rounds == max_rounds:
            if len(pts) == len(base):
                raise SamplingStalled(f"{max_rounds} sampling rounds accepted no points")
            warnings.warn(f"point sampling stopped after {max_rounds} rounds with {len(pts)} of {n} points",
                          RuntimeWarning, stacklevel=2)
            return SampleResult(pts, pts[len(base):], rounds, True)
        if len(pts) == 0:
            extra = random_sample(scene, masks, cameras, n, rng)
        else:
            extra = sample_region(pts, masks, cameras, n, rng)
        pts = np.concatenate([pts, extra])
        rounds += 1
    return SampleResult(pts, pts[len(base):], rounds, False)


def init_new_gaussians(points: np.ndarray, masks, images: Sequence[np.ndarray], cameras: Sequence[Camera],
                       scene: GaussianScene | None = None, knn_points: np.ndarray | None = None) -> list[Gaussian]:
    """Isotropic Gaussians at ``points`` coloured from the masked target pixels they project onto.

    Scales come from the mean distance to the 3 nearest neighbours within
    ``knn_points`` (default: ``points``); below 4 points the scene's median
    scale is used.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise TooFewPoints("no points to initialise")
    masks = _mask_arrays(masks)
    if not (len(masks) == len(images) == len(cameras)):
        raise DimensionMismatch("masks, images and cameras must align")
    ref = pts if knn_points is None else np.asarray(knn_points, dtype=np.float64).reshape(-1, 3)
    if len(ref) >= 4:
        if knn_points is None:
            scale = knn_mean_distance(pts, 3)
        else:
            # query points are members of ref, so column 0 is the point itself
            d, _ = cKDTree(ref).query(pts, k=4)
            scale = d[:, 1:].mean(axis=1)
    elif scene is not None and len(scene):
        scale = np.full(len(pts), float(np.median(np.exp(scene.log_scales.astype(np.float64)))))
    else:
        raise TooFewPoints("k-NN scale needs 4 points and there is no scene to fall back on")
    scale = np.maximum(scale, 1e-6)

    col_sum = np.zeros((len(pts), 3))
    col_n = np.zeros(len(pts))
    for m, img, cam in zip(masks, images, cameras):
        uv, _, front = project_points(cam, pts)
        px = np.floor(np.where(front, uv[:, 0], -1.0) + 0.5)
        py = np.floor(np.where(front, uv[:, 1], -1.0) + 0.5)
        ok = front & (px >= 0) & (py >= 0) & (px < cam.width) & (py < cam.height)
        xi = px[ok].astype(np.int64)
        yi = py[ok].astype(np.int64)
        hit = np.zeros(len(pts), dtype=bool)
        hit[ok] = m[yi, xi]
        rows = np.flatnonzero(hit)
        col_sum[rows] += np.asarray(img, dtype=np.float64)[py[rows].astype(np.int64), px[rows].astype(np.int64)]
        col_n[rows] += 1
    color = np.where(col_n[:, None] > 0, col_sum / np.maximum(col_n, 1)[:, None], 0.5)
    logit = math.log(NEW_OPACITY / (1 - NEW_OPACITY))
    return [
        Gaussian(pts[i], np.array([1.0, 0.0, 0.0, 0.0]), np.full(3, math.log(scale[i])), logit, color[i])
        for i in range(len(pts))
    ]
