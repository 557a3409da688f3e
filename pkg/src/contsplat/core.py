"""Scene representation, camera geometry and the binary scene format."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    BehindCamera,
    ChecksumError,
    ContractError,
    EmptyScene,
    FormatError,
    FormatVersionError,
    TooFewPoints,
)

# Column layout of the packed (N, 14) parameter array.
POS = slice(0, 3)
ROT = slice(3, 7)
LOG_SCALE = slice(7, 10)
OPACITY = 10
COLOR = slice(11, 14)
N_PARAMS = 14

COV2D_FLOOR = 0.3
NEAR_EPS = 1e-6
# Rasterizer culling as in the base renderer: splats closer than NEAR_PLANE are
# dropped, and x/z, y/z in the projection Jacobian are clamped to 1.3x the half
# field of view so Gaussians beside the camera do not smear over the image.
NEAR_PLANE = 0.2
FRUSTUM_SLACK = 1.3

SCENE_MAGIC = b"CLSPLAT1"
_SCENE_MAGIC_STEM = b"CLSPLAT"


# ---------------------------------------------------------------------------
# Cameras


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera with a world-to-camera rigid pose (OpenCV axes: x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError("focal lengths must be positive")
        if self.width < 16 or self.height < 16:
            raise ContractError("image must be at least 16x16 pixels")
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9:
            raise ContractError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def image_size(self) -> tuple[int, int]:
        return self.width, self.height

    def world_to_camera(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz, dtype=np.float64) @ self.rotation.T + self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        # image y points down, so "down" is the negated world up projected off the view axis
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(fx, fy, cx, cy, rot, -rot @ eye, width, height)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            float(d["fx"]),
            float(d["fy"]),
            float(d["cx"]),
            float(d["cy"]),
            np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            np.asarray(d["translation"], dtype=np.float64),
            int(d["width"]),
            int(d["height"]),
        )


def save_cameras(cameras: Sequence[Camera], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


def load_cameras(path) -> list[Camera]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a JSON array of cameras")
    try:
        return [Camera.from_dict(d) for d in data]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed camera entry ({exc})") from exc


# ---------------------------------------------------------------------------
# Rotations


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) unit quaternions stored as (w, x, y, z)."""
    q = np.asarray(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def axis_angle_to_rotmat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    q = np.concatenate([[np.cos(half)], np.sin(half) * axis])
    return quat_to_rotmat(q)


# ---------------------------------------------------------------------------
# Gaussians


@dataclass(frozen=True, eq=False)
class Gaussian:
    position: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))

    def to_row(self, dtype=np.float32) -> np.ndarray:
        row = np.empty(N_PARAMS, dtype=dtype)
        row[POS] = self.position
        row[ROT] = self.rotation
        row[LOG_SCALE] = self.log_scale
        row[OPACITY] = self.opacity_logit
        row[COLOR] = self.color
        return row

    @classmethod
    def from_row(cls, row: np.ndarray) -> "Gaussian":
        row = np.asarray(row)
        return cls(row[POS].copy(), row[ROT].copy(), row[LOG_SCALE].copy(), row[OPACITY].item(), row[COLOR].copy())


class GaussianScene:
    """Ordered collection of Gaussians stored as one packed ``(N, 14)`` array.

    Row order is identity: voting, deltas and history all refer to Gaussians
    by their row index. Column layout is position(3), rotation(4),
    log_scale(3), opacity_logit(1), color(3).
    """

    __slots__ = ("params",)

    def __init__(self, params: np.ndarray | None = None, dtype=np.float32):
        if params is None:
            params = np.zeros((0, N_PARAMS), dtype=dtype)
        params = np.asarray(params)
        if params.ndim != 2 or params.shape[1] != N_PARAMS:
            raise ContractError(f"scene parameters must have shape (N, {N_PARAMS}), got {params.shape}")
        if params.dtype not in (np.float32, np.float64):
            params = params.astype(dtype)
        self.params = np.ascontiguousarray(params)

    @classmethod
    def from_fields(cls, positions, rotations, log_scales, opacity_logits, colors, dtype=np.float32):
        positions = np.asarray(positions, dtype=dtype).reshape(-1, 3)
        n = len(positions)
        params = np.empty((n, N_PARAMS), dtype=dtype)
        params[:, POS] = positions
        params[:, ROT] = np.asarray(rotations, dtype=dtype).reshape(n, 4)
        params[:, LOG_SCALE] = np.asarray(log_scales, dtype=dtype).reshape(n, 3)
        params[:, OPACITY] = np.asarray(opacity_logits, dtype=dtype).reshape(n)
        params[:, COLOR] = np.asarray(colors, dtype=dtype).reshape(n, 3)
        return cls(params)

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian], dtype=np.float32):
        rows = [g.to_row(dtype) for g in gaussians]
        if not rows:
            return cls(dtype=dtype)
        return cls(np.stack(rows))

    def __len__(self) -> int:
        return self.params.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian.from_row(self.params[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def dtype(self):
        return self.params.dtype

    @property
    def positions(self) -> np.ndarray:
        return self.params[:, POS]

    @property
    def rotations(self) -> np.ndarray:
        return self.params[:, ROT]

    @property
    def log_scales(self) -> np.ndarray:
        return self.params[:, LOG_SCALE]

    @property
    def opacity_logits(self) -> np.ndarray:
        return self.params[:, OPACITY]

    @property
    def colors(self) -> np.ndarray:
        return self.params[:, COLOR]

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.params[:, OPACITY]))

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.params.copy())

    def astype(self, dtype) -> "GaussianScene":
        return GaussianScene(self.params.astype(dtype))

    def take(self, indices) -> "GaussianScene":
        return GaussianScene(self.params[np.asarray(indices, dtype=np.int64)])

    def concat(self, other: "GaussianScene") -> "GaussianScene":
        return GaussianScene(np.concatenate([self.params, other.params.astype(self.dtype)]))

    def tobytes(self) -> bytes:
        return self.params.astype("<f4").tobytes()

    def equals(self, other: "GaussianScene") -> bool:
        """Bit-exact comparison (shape, dtype and every byte)."""
        return (
            self.params.shape == other.params.shape
            and self.params.dtype == other.params.dtype
            and self.params.tobytes() == other.params.tobytes()
        )

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.params).all())

    def __repr__(self) -> str:
        return f"GaussianScene(n={len(self)}, dtype={self.dtype})"


def make_gaussian(position, scale=0.05, opacity=0.9, color=(0.5, 0.5, 0.5), rotation=(1.0, 0.0, 0.0, 0.0)) -> Gaussian:
    """Build a Gaussian from activated (human-readable) values."""
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (3,))
    return Gaussian(
        np.asarray(position, dtype=np.float64),
        np.asarray(rotation, dtype=np.float64) / np.linalg.norm(rotation),
        np.log(scale),
        float(np.log(opacity / (1.0 - opacity))),
        np.asarray(color, dtype=np.float64),
    )


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if not self.radius > 0:
            raise ContractError("sphere radius must be positive")

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "radius": float(self.radius)}


def inside_spheres(points: np.ndarray, spheres: Sequence[Sphere]) -> np.ndarray:
    """Boolean mask of points lying inside the union of ``spheres`` (boundary counts as inside)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = np.zeros(len(points), dtype=bool)
    for s in spheres:
        d2 = ((points - s.center) ** 2).sum(axis=1)
        inside |= d2 <= s.radius * s.radius
    return inside


@dataclass(eq=False)
class ChangeSet:
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    spheres: list = field(default_factory=list)

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        self.indices = idx

    def validate(self, scene: GaussianScene) -> None:
        if len(self.indices) and (self.indices[0] < 0 or self.indices[-1] >= len(scene)):
            raise ContractError("change set index out of range")
        if self.spheres and len(self.indices):
            if not inside_spheres(scene.positions[self.indices], self.spheres).all():
                raise ContractError("changed Gaussian outside the bounding spheres")

    def to_dict(self) -> dict:
        return {"indices": self.indices.tolist(), "spheres": [s.to_dict() for s in self.spheres]}


# ---------------------------------------------------------------------------
# Projection


class ProjectedPoint(NamedTuple):
    u: float
    v: float
    depth: float
    in_front: bool


class Splat2D(NamedTuple):
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


def project_point(camera: Camera, xyz) -> ProjectedPoint:
    pc = camera.world_to_camera(np.asarray(xyz, dtype=np.float64).reshape(3))
    depth = float(pc[2])
    if depth <= NEAR_EPS:
        return ProjectedPoint(float("nan"), float("nan"), depth, False)
    return ProjectedPoint(camera.fx * pc[0] / depth + camera.cx, camera.fy * pc[1] / depth + camera.cy, depth, True)


def project_points(camera: Camera, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized pinhole projection: returns ``(uv (N,2), depth (N,), in_front (N,))``."""
    pc = camera.world_to_camera(np.asarray(xyz, dtype=np.float64).reshape(-1, 3))
    depth = pc[:, 2]
    in_front = depth > NEAR_EPS
    safe = np.where(in_front, depth, 1.0)
    uv = np.stack([camera.fx * pc[:, 0] / safe + camera.cx, camera.fy * pc[:, 1] / safe + camera.cy], axis=1)
    uv[~in_front] = np.nan
    return uv, depth, in_front


def frustum_limits(camera: Camera) -> tuple[float, float]:
    """Bounds on x/z and y/z used when linearising the projection."""
    return FRUSTUM_SLACK * 0.5 * camera.width / camera.fx, FRUSTUM_SLACK * 0.5 * camera.height / camera.fy


def project_gaussian(camera: Camera, g: Gaussian) -> Splat2D:
    pc = camera.world_to_camera(np.asarray(g.position, dtype=np.float64))
    tx, ty, tz = pc
    if tz <= NEAR_EPS:
        raise BehindCamera(f"Gaussian at depth {tz:.3g} is behind the camera")
    q = np.asarray(g.rotation, dtype=np.float64)
    rot = quat_to_rotmat(q / np.linalg.norm(q))
    m = rot * np.exp(np.asarray(g.log_scale, dtype=np.float64))[None, :]
    cov3d = m @ m.T
    limx, limy = frustum_limits(camera)
    jx = np.clip(tx / tz, -limx, limx)
    jy = np.clip(ty / tz, -limy, limy)
    jac = np.array(
        [
            [camera.fx / tz, 0.0, -camera.fx * jx / tz],
            [0.0, camera.fy / tz, -camera.fy * jy / tz],
        ]
    )
    t = jac @ camera.rotation
    cov2d = t @ cov3d @ t.T
    cov2d = 0.5 * (cov2d + cov2d.T) + COV2D_FLOOR * np.eye(2)
    mean = np.array([camera.fx * tx / tz + camera.cx, camera.fy * ty / tz + camera.cy])
    return Splat2D(mean, cov2d, float(tz))


# ---------------------------------------------------------------------------
# Point-set helpers


def knn_mean_distance(positions: np.ndarray, k: int) -> np.ndarray:
    """Mean Euclidean distance from each point to its ``k`` nearest other points."""
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if k < 1 or len(pts) < k + 1:
        raise TooFewPoints(f"need at least {k + 1} points, got {len(pts)}")
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    # column 0 is the point itself (or an exact duplicate), both at distance 0
    return dist[:, 1:].mean(axis=1)


def scene_aabb(scene: GaussianScene) -> tuple[np.ndarray, np.ndarray]:
    if len(scene) == 0:
        raise EmptyScene("bounding box of an empty scene")
    pos = scene.positions
    return pos.min(axis=0), pos.max(axis=0)


# ---------------------------------------------------------------------------
# Binary scene format: magic, u64 count, N x 14 f32 rows, u32 CRC32 of all preceding bytes.


def scene_to_bytes(scene: GaussianScene) -> bytes:
    body = SCENE_MAGIC + struct.pack("<Q", len(scene)) + scene.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def scene_from_bytes(data: bytes, source: str = "<bytes>") -> GaussianScene:
    if len(data) < 8 or not data.startswith(_SCENE_MAGIC_STEM):
        raise FormatError(f"{source}: not a scene file (bad magic)")
    if data[:8] != SCENE_MAGIC:
        raise FormatVersionError(f"{source}: unsupported scene format version {data[7:8]!r}")
    if len(data) < 8 + 8 + 4:
        raise FormatError(f"{source}: truncated scene file")
    (count,) = struct.unpack_from("<Q", data, 8)
    expected = 8 + 8 + count * N_PARAMS * 4 + 4
    if len(data) != expected:
        raise FormatError(f"{source}: size {len(data)} does not match {count} Gaussians")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError(f"{source}: checksum mismatch")
    rows = np.frombuffer(data, dtype="<f4", count=count * N_PARAMS, offset=16).reshape(count, N_PARAMS)
    return GaussianScene(rows.astype(np.float32))


def save_scene(scene: GaussianScene, path) -> None:
    Path(path).write_bytes(scene_to_bytes(scene))


def load_scene(path) -> GaussianScene:
    return scene_from_bytes(Path(path).read_bytes(), str(path))
