"""Tile-based Gaussian rasterizer with an analytic backward pass.

Rendering follows the usual splatting pipeline: every Gaussian is projected
to a 2D splat, splats are binned into 16x16 pixel tiles by their 3-sigma
bounding box, each tile sorts its splats by view depth (ties by scene index)
and pixels composite front to back. A :class:`TileMask` restricts both passes
to a subset of tiles; pixels of inactive tiles are black and never read any
splat data. Because a Gaussian only ever contributes to tiles it is binned
into, gradients for Gaussians whose tiles are all active are identical to the
gradients of an unmasked pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels as K
from .core import (
    COLOR,
    COV2D_FLOOR,
    LOG_SCALE,
    N_PARAMS,
    NEAR_PLANE,
    OPACITY,
    POS,
    ROT,
    Camera,
    GaussianScene,
    frustum_limits,
)
from .errors import DimensionMismatch, IndexOutOfRange, MaskTooSmall

TILE = K.TILE
ALL = None  # sentinel: render every tile

_DTYPES = {"f32": np.float32, "f64": np.float64, np.float32: np.float32, np.float64: np.float64}


def resolve_dtype(precision) -> type:
    if precision is None:
        return np.float32
    try:
        return _DTYPES[precision]
    except KeyError:
        return np.dtype(precision).type


class TileMask:
    """Boolean ``tiles_y x tiles_x`` grid of active 16x16 tiles."""

    __slots__ = ("bits", "width", "height")

    def __init__(self, width: int, height: int, bits: np.ndarray | None = None):
        self.width = int(width)
        self.height = int(height)
        shape = (self.tiles_y, self.tiles_x)
        if bits is None:
            bits = np.zeros(shape, dtype=bool)
        bits = np.asarray(bits, dtype=bool)
        if bits.shape != shape:
            raise DimensionMismatch(f"tile mask shape {bits.shape} != {shape}")
        self.bits = bits

    @property
    def tiles_x(self) -> int:
        return -(-self.width // TILE)

    @property
    def tiles_y(self) -> int:
        return -(-self.height // TILE)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @classmethod
    def full(cls, width, height) -> "TileMask":
        m = cls(width, height)
        m.bits[:] = True
        return m

    @classmethod
    def for_camera(cls, camera: Camera, fill=False) -> "TileMask":
        return cls.full(camera.width, camera.height) if fill else cls(camera.width, camera.height)

    def count(self) -> int:
        return int(self.bits.sum())

    def fraction(self) -> float:
        return self.count() / self.bits.size

    def pixel_mask(self) -> np.ndarray:
        """Per-pixel H x W boolean raster of the active tiles."""
        up = np.repeat(np.repeat(self.bits, TILE, axis=0), TILE, axis=1)
        return up[: self.height, : self.width]

    def __or__(self, other: "TileMask") -> "TileMask":
        return TileMask(self.width, self.height, self.bits | other.bits)

    def __and__(self, other: "TileMask") -> "TileMask":
        return TileMask(self.width, self.height, self.bits & other.bits)

    def __invert__(self) -> "TileMask":
        return TileMask(self.width, self.height, ~self.bits)

    def __repr__(self):
        return f"TileMask({self.tiles_y}x{self.tiles_x}, active={self.count()})"


@dataclass
class Projection:
    """Per-Gaussian splat data plus the intermediates the backward pass reuses."""

    dtype: type
    valid: np.ndarray  # beyond the near plane
    depth: np.ndarray
    mean: np.ndarray  # (N, 2) pixel coordinates
    cov: np.ndarray  # (N, 2, 2) with floor
    conic: np.ndarray  # (N, 3) inverse covariance (a, b, c)
    ext: np.ndarray  # (N, 2) half-extent of the 3-sigma box
    opacity: np.ndarray
    color: np.ndarray  # clamped to [0, 1]
    rect: np.ndarray  # (N, 4) inclusive tile rectangle, -1 if none
    # intermediates
    cam_pos: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray
    rotq: np.ndarray
    scale: np.ndarray
    cov3d: np.ndarray
    jw: np.ndarray  # J @ W  (N, 2, 3)


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    transmittance: np.ndarray  # (H, W)
    contrib_counts: np.ndarray  # (H, W)
    active_pixels: np.ndarray  # (H, W) bool, False for pixels of inactive tiles
    touched: np.ndarray  # (tiles_y, tiles_x) splat reads per tile; 0 for inactive tiles
    tile_mask: TileMask
    # state needed by backward
    projection: Projection
    offsets: np.ndarray
    order: np.ndarray
    last_idx: np.ndarray


@dataclass
class GaussianGrads:
    """Gradients for the Gaussians in ``indices`` (sorted), packed like scene rows."""

    indices: np.ndarray
    params: np.ndarray  # (len(indices), 14)
    screen: np.ndarray  # (len(indices),) norm of the NDC-space mean gradient

    def __len__(self):
        return len(self.indices)

    @property
    def position(self):
        return self.params[:, POS]

    @property
    def rotation(self):
        return self.params[:, ROT]

    @property
    def log_scale(self):
        return self.params[:, LOG_SCALE]

    @property
    def opacity_logit(self):
        return self.params[:, OPACITY]

    @property
    def color(self):
        return self.params[:, COLOR]


# ---------------------------------------------------------------------------
# projection


def _rotmat_and_jacobian(qn):
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    n = len(qn)
    R = np.empty((n, 3, 3), dtype=qn.dtype)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotmat_grad_to_quat(qn, dR):
    """Gradient w.r.t. the normalised quaternion given dL/dR (N, 3, 3)."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = np.empty_like(qn)
    g[:, 0] = 2 * (
        -z * dR[:, 0, 1] + y * dR[:, 0, 2] + z * dR[:, 1, 0] - x * dR[:, 1, 2] - y * dR[:, 2, 0] + x * dR[:, 2, 1]
    )
    g[:, 1] = 2 * (
        y * dR[:, 0, 1] + z * dR[:, 0, 2] + y * dR[:, 1, 0] - 2 * x * dR[:, 1, 1] - w * dR[:, 1, 2]
        + z * dR[:, 2, 0] + w * dR[:, 2, 1] - 2 * x * dR[:, 2, 2]
    )
    g[:, 2] = 2 * (
        -2 * y * dR[:, 0, 0] + x * dR[:, 0, 1] + w * dR[:, 0, 2] + x * dR[:, 1, 0] + z * dR[:, 1, 2]
        - w * dR[:, 2, 0] + z * dR[:, 2, 1] - 2 * y * dR[:, 2, 2]
    )
    g[:, 3] = 2 * (
        -2 * z * dR[:, 0, 0] - w * dR[:, 0, 1] + x * dR[:, 0, 2] + w * dR[:, 1, 0] - 2 * z * dR[:, 1, 1]
        + y * dR[:, 1, 2] + x * dR[:, 2, 0] + y * dR[:, 2, 1]
    )
    return g


def project_scene(scene: GaussianScene, camera: Camera, precision=None) -> Projection:
    dt = resolve_dtype(precision)
    p = scene.params.astype(dt, copy=False)
    n = len(p)
    W = camera.rotation.astype(dt)
    t = camera.translation.astype(dt)
    fx, fy, cx, cy = (dt(v) for v in (camera.fx, camera.fy, camera.cx, camera.cy))

    cam_pos = p[:, POS] @ W.T + t
    depth = cam_pos[:, 2]
    valid = depth > NEAR_PLANE
    tz = np.where(valid, depth, dt(1.0))
    tx, ty = cam_pos[:, 0], cam_pos[:, 1]
    limx, limy = (dt(v) for v in frustum_limits(camera))
    jx = np.clip(tx / tz, -limx, limx)
    jy = np.clip(ty / tz, -limy, limy)

    q = p[:, ROT]
    qnorm = np.sqrt((q * q).sum(axis=1))
    qnorm = np.where(qnorm > 0, qnorm, dt(1.0))
    qn = q / qnorm[:, None]
    rotq = _rotmat_and_jacobian(qn)
    scale = np.exp(p[:, LOG_SCALE])
    m = rotq * scale[:, None, :]
    cov3d = m @ m.transpose(0, 2, 1)

    jac = np.zeros((n, 2, 3), dtype=dt)
    jac[:, 0, 0] = fx / tz
    jac[:, 0, 2] = -fx * jx / tz
    jac[:, 1, 1] = fy / tz
    jac[:, 1, 2] = -fy * jy / tz
    jw = jac @ W
    cov = jw @ cov3d @ jw.transpose(0, 2, 1)
    off = dt(0.5) * (cov[:, 0, 1] + cov[:, 1, 0])
    cov[:, 0, 1] = off
    cov[:, 1, 0] = off
    cov[:, 0, 0] += dt(COV2D_FLOOR)
    cov[:, 1, 1] += dt(COV2D_FLOOR)

    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    det = np.where(det > 0, det, dt(1.0))
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mean = np.stack([fx * tx / tz + cx, fy * ty / tz + cy], axis=1)
    ext = dt(3.0) * np.sqrt(np.stack([a, c], axis=1))
    opacity = dt(1.0) / (dt(1.0) + np.exp(-p[:, OPACITY]))
    color = np.clip(p[:, COLOR], dt(0.0), dt(1.0))

    finite = np.isfinite(mean).all(axis=1) & np.isfinite(ext).all(axis=1)
    valid = valid & finite
    tiles_x = -(-camera.width // TILE)
    tiles_y = -(-camera.height // TILE)
    rect = K.tile_rects(
        np.ascontiguousarray(mean, dtype=np.float64),
        np.ascontiguousarray(ext, dtype=np.float64),
        valid,
        camera.width,
        camera.height,
        tiles_x,
        tiles_y,
    )
    return Projection(
        dt, valid, depth, np.ascontiguousarray(mean), cov, np.ascontiguousarray(conic), ext,
        np.ascontiguousarray(opacity), np.ascontiguousarray(color), rect,
        cam_pos, qn, qnorm, rotq, scale, cov3d, jw,
    )


# ---------------------------------------------------------------------------
# binning


def _sorted_bins(proj: Projection, camera: Camera, tile_active: np.ndarray):
    tiles_x = -(-camera.width // TILE)
    n_tiles = tile_active.size
    tiles, splats = K.bin_pairs(proj.rect, tiles_x, tile_active.reshape(-1))
    order_idx = np.lexsort((splats, proj.depth[splats], tiles))
    tiles = tiles[order_idx]
    order = np.ascontiguousarray(splats[order_idx])
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(tiles, minlength=n_tiles), out=offsets[1:])
    return offsets, order


def bin_tiles(proj_or_splats, width: int, height: int) -> list[list[int]]:
    """Per-tile (row-major) lists of splat indices sorted by depth, ties by index.

    Accepts either a :class:`Projection` or a sequence of ``Splat2D``.
    """
    if isinstance(proj_or_splats, Projection):
        proj = proj_or_splats
        rect, depth = proj.rect, proj.depth
    else:
        splats = list(proj_or_splats)
        n = len(splats)
        mean = np.array([s.mean2d for s in splats], dtype=np.float64).reshape(n, 2)
        cov = np.array([s.cov2d for s in splats], dtype=np.float64).reshape(n, 2, 2)
        depth = np.array([s.depth for s in splats], dtype=np.float64)
        ext = 3.0 * np.sqrt(np.stack([cov[:, 0, 0], cov[:, 1, 1]], axis=1)) if n else np.zeros((0, 2))
        tiles_x = -(-width // TILE)
        tiles_y = -(-height // TILE)
        rect = K.tile_rects(mean, np.ascontiguousarray(ext), depth > NEAR_PLANE, width, height, tiles_x, tiles_y)
    tiles_x = -(-width // TILE)
    tiles_y = -(-height // TILE)
    tiles, idx = K.bin_pairs(rect, tiles_x, np.ones(tiles_x * tiles_y, dtype=bool))
    o = np.lexsort((idx, depth[idx], tiles))
    out: list[list[int]] = [[] for _ in range(tiles_x * tiles_y)]
    for t, s in zip(tiles[o], idx[o]):
        out[t].append(int(s))
    return out


def compute_tile_mask(scene: GaussianScene, active_set, camera: Camera, projection: Projection | None = None) -> TileMask:
    """Tiles overlapped by the 3-sigma boxes of the Gaussians in ``active_set``."""
    proj = projection if projection is not None else project_scene(scene, camera)
    idx = np.asarray(active_set, dtype=np.int64).reshape(-1)
    tiles_x = -(-camera.width // TILE)
    tiles_y = -(-camera.height // TILE)
    bits = K.rect_mask(proj.rect, idx, tiles_x, tiles_y).reshape(tiles_y, tiles_x)
    return TileMask(camera.width, camera.height, bits)


# ---------------------------------------------------------------------------
# forward


def _check_mask(tile_mask, camera) -> TileMask:
    if tile_mask is None:
        return TileMask.full(camera.width, camera.height)
    if (tile_mask.width, tile_mask.height) != (camera.width, camera.height):
        raise DimensionMismatch(
            f"tile mask is for {tile_mask.width}x{tile_mask.height}, camera is {camera.width}x{camera.height}"
        )
    return tile_mask


def render(scene: GaussianScene, camera: Camera, tile_mask: TileMask | None = ALL, precision=None,
           projection: Projection | None = None) -> RenderOutput:
    """Composite all Gaussians front to back inside the active tiles."""
    mask = _check_mask(tile_mask, camera)
    proj = projection if projection is not None else project_scene(scene, camera, precision)
    dt = proj.dtype
    H, W = camera.height, camera.width
    active = np.ascontiguousarray(mask.bits.reshape(-1))
    offsets, order = _sorted_bins(proj, camera, active)

    image = np.zeros((H, W, 3), dtype=dt)
    trans = np.ones((H, W), dtype=dt)
    last = np.zeros((H, W), dtype=np.int64)
    counts = np.zeros((H, W), dtype=np.int32)
    touched = np.zeros(active.size, dtype=np.int64)
    K.forward(
        W, H, mask.tiles_x, mask.tiles_y, active, offsets, order,
        proj.mean, proj.conic, proj.opacity, proj.color,
        np.arange(W, dtype=dt), np.arange(H, dtype=dt), K.make_consts(dt),
        image, trans, last, counts, touched,
    )
    return RenderOutput(
        image=image,
        transmittance=trans,
        contrib_counts=counts,
        active_pixels=mask.pixel_mask(),
        touched=touched.reshape(mask.shape),
        tile_mask=mask,
        projection=proj,
        offsets=offsets,
        order=order,
        last_idx=last,
    )


# ---------------------------------------------------------------------------
# backward


def _splat_to_params(proj: Projection, camera: Camera, idx: np.ndarray, g2d: np.ndarray, scene_params: np.ndarray):
    """Chain per-splat gradients (mean2d, conic, opacity, color) to Gaussian parameters."""
    dt = proj.dtype
    n = len(idx)
    out = np.zeros((n, N_PARAMS), dtype=dt)
    if n == 0:
        return out, np.zeros(0, dtype=dt)
    fx, fy = dt(camera.fx), dt(camera.fy)
    Wr = camera.rotation.astype(dt)

    g_mean = g2d[:, 0:2]
    gA, gB, gC = g2d[:, 2], g2d[:, 3], g2d[:, 4]
    g_op = g2d[:, 5]
    g_col = g2d[:, 6:9]

    # colour: clamp passes gradient only strictly inside (0, 1)
    raw_col = scene_params[idx][:, COLOR].astype(dt)
    out[:, COLOR] = np.where((raw_col > 0) & (raw_col < 1), g_col, dt(0.0))
    op = proj.opacity[idx]
    out[:, OPACITY] = g_op * op * (dt(1.0) - op)

    cov = proj.cov[idx]
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    d2 = det * det
    ga = (-c * c * gA + b * c * gB - b * b * gC) / d2
    gb = (2 * b * c * gA - (det + 2 * b * b) * gB + 2 * a * b * gC) / d2
    gc = (-b * b * gA + a * b * gB - a * a * gC) / d2
    # symmetric dL/dcov2d with the off-diagonal gradient split across both entries
    G2 = np.empty((n, 2, 2), dtype=dt)
    G2[:, 0, 0] = ga
    G2[:, 1, 1] = gc
    G2[:, 0, 1] = dt(0.5) * gb
    G2[:, 1, 0] = dt(0.5) * gb

    jw = proj.jw[idx]
    sig = proj.cov3d[idx]
    g_sig = jw.transpose(0, 2, 1) @ G2 @ jw
    g_jw = dt(2.0) * (G2 @ jw @ sig)
    g_jac = g_jw @ Wr.T

    cp = proj.cam_pos[idx]
    tx, ty, tz = cp[:, 0], cp[:, 1], cp[:, 2]
    tz2 = tz * tz
    tz3 = tz2 * tz
    limx, limy = (dt(v) for v in frustum_limits(camera))
    rx, ry = tx / tz, ty / tz
    # a clamped ratio is constant in x (or y); the Jacobian entry is then -f*lim/z
    inx = (rx >= -limx) & (rx <= limx)
    iny = (ry >= -limy) & (ry <= limy)
    jx = np.clip(rx, -limx, limx)
    jy = np.clip(ry, -limy, limy)
    g_t = np.zeros((n, 3), dtype=dt)
    g_t[:, 0] = g_mean[:, 0] * fx / tz - np.where(inx, g_jac[:, 0, 2] * fx / tz2, dt(0.0))
    g_t[:, 1] = g_mean[:, 1] * fy / tz - np.where(iny, g_jac[:, 1, 2] * fy / tz2, dt(0.0))
    g_t[:, 2] = (
        -g_mean[:, 0] * fx * tx / tz2
        - g_mean[:, 1] * fy * ty / tz2
        - g_jac[:, 0, 0] * fx / tz2
        + g_jac[:, 0, 2] * np.where(inx, 2 * fx * tx / tz3, fx * jx / tz2)
        - g_jac[:, 1, 1] * fy / tz2
        + g_jac[:, 1, 2] * np.where(iny, 2 * fy * ty / tz3, fy * jy / tz2)
    )
    out[:, POS] = g_t @ Wr

    rotq = proj.rotq[idx]
    scale = proj.scale[idx]
    m = rotq * scale[:, None, :]
    g_m = dt(2.0) * (g_sig @ m)
    g_scale = np.einsum("nij,nij->nj", rotq, g_m)
    out[:, LOG_SCALE] = g_scale * scale
    g_rot = g_m * scale[:, None, :]
    qn = proj.qn[idx]
    g_qn = _rotmat_grad_to_quat(qn, g_rot)
    qnorm = proj.qnorm[idx]
    out[:, ROT] = (g_qn - qn * (qn * g_qn).sum(axis=1, keepdims=True)) / qnorm[:, None]

    screen = np.sqrt((g_mean[:, 0] * dt(0.5 * camera.width)) ** 2 + (g_mean[:, 1] * dt(0.5 * camera.height)) ** 2)
    return out, screen


def backward(scene: GaussianScene, camera: Camera, tile_mask: TileMask | None, grad_image: np.ndarray,
             active_set, precision=None, forward: RenderOutput | None = None) -> GaussianGrads:
    """Gradients of ``sum(grad_image * image)`` for every Gaussian in ``active_set``.

    ``forward`` may pass the :class:`RenderOutput` of the matching render call
    to avoid recomputing it. Raises :class:`MaskTooSmall` if an active
    Gaussian overlaps an inactive tile.
    """
    mask = _check_mask(tile_mask, camera)
    idx = np.unique(np.asarray(active_set, dtype=np.int64).reshape(-1))
    if len(idx) and (idx[0] < 0 or idx[-1] >= len(scene)):
        raise IndexOutOfRange("active set index out of range")
    if forward is None:
        forward = render(scene, camera, mask, precision)
    elif forward.tile_mask.bits.shape != mask.bits.shape or not np.array_equal(forward.tile_mask.bits, mask.bits):
        raise DimensionMismatch("forward pass was rendered with a different tile mask")
    proj = forward.projection
    dt = proj.dtype
    H, W = camera.height, camera.width
    grad_image = np.asarray(grad_image)
    if grad_image.shape != (H, W, 3):
        raise DimensionMismatch(f"grad image shape {grad_image.shape} != {(H, W, 3)}")
    if len(idx) == 0:
        return GaussianGrads(idx, np.zeros((0, N_PARAMS), dtype=dt), np.zeros(0, dtype=dt))

    need = compute_tile_mask(scene, idx, camera, projection=proj)
    if (need.bits & ~mask.bits).any():
        raise MaskTooSmall(f"{int((need.bits & ~mask.bits).sum())} tiles touched by the active set are masked out")

    want = np.zeros(len(scene), dtype=bool)
    want[idx] = True
    m = len(forward.order)
    g_mean = np.zeros((m, 2), dtype=dt)
    g_conic = np.zeros((m, 3), dtype=dt)
    g_opac = np.zeros(m, dtype=dt)
    g_color = np.zeros((m, 3), dtype=dt)
    gi = np.ascontiguousarray(grad_image, dtype=dt)
    gi = np.where(forward.active_pixels[..., None], gi, dt(0.0))
    active = np.ascontiguousarray(mask.bits.reshape(-1))
    K.backward(
        W, H, mask.tiles_x, mask.tiles_y, active, forward.offsets, forward.order,
        proj.mean, proj.conic, proj.opacity, proj.color, want,
        np.arange(W, dtype=dt), np.arange(H, dtype=dt), K.make_consts(dt),
        forward.transmittance, forward.last_idx, gi,
        g_mean, g_conic, g_opac, g_color,
    )
    per_splat = K.reduce_entries(forward.order, len(scene), g_mean, g_conic, g_opac, g_color)
    params, screen = _splat_to_params(proj, camera, idx, per_splat[idx], scene.params)
    invisible = ~proj.valid[idx]
    params[invisible] = 0
    screen[invisible] = 0
    return GaussianGrads(idx, params, screen)


# ---------------------------------------------------------------------------
# image output


def write_png(image: np.ndarray, path) -> None:
    from PIL import Image

    arr = np.asarray(image)
    arr = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def write_raw(image: np.ndarray, path) -> None:
    """Lossless dump: u32 width, height, channels then row-major little-endian f32."""
    arr = np.asarray(image, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    header = np.array([w, h, c], dtype="<u4").tobytes()
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, c = np.frombuffer(data, dtype="<u4", count=3)
    arr = np.frombuffer(data, dtype="<f4", offset=12)
    if arr.size != w * h * c:
        from .errors import FormatError

        raise FormatError(f"{path}: raw image size mismatch")
    return arr.reshape(h, w, c).copy()


def render_views(scene: GaussianScene, cameras: Sequence[Camera], precision=None) -> list[np.ndarray]:
    return [render(scene, cam, ALL, precision).image for cam in cameras]
