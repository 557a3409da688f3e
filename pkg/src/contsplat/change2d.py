"""Per-view 2D change detection from patch features."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import maximum_filter, zoom

from .core import Camera, GaussianScene
from .errors import ContractError, DimensionMismatch, FeatureFileMismatch, FormatError, ImageTooSmall
from .ssim import ssim_map

PATCH = 14
TAU1 = 0.5
FEATURE_MAGIC = b"CLFEAT1"
BUILTIN = "builtin-patch"
EXTERNAL = "external-file"
COLOR_L2 = "color-l2"
SSIM = "ssim"
EXTRACTORS = (BUILTIN, EXTERNAL, COLOR_L2, SSIM)
# per-pixel thresholds for the pixel-space baselines
COLOR_L2_THRESHOLD = 0.1
SSIM_THRESHOLD = 0.5
_N_BINS = 8
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(eq=False)
class FeatureMap:
    features: np.ndarray  # (grid_h, grid_w, D)
    patch: int = PATCH

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 3:
            raise DimensionMismatch("feature map must be (grid_h, grid_w, D)")
        if not np.isfinite(self.features).all():
            raise ContractError("feature map contains non-finite values")

    @property
    def grid_h(self) -> int:
        return self.features.shape[0]

    @property
    def grid_w(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]


@dataclass(eq=False)
class ChangeMask2D:
    mask: np.ndarray  # (H, W) bool
    provenance: str = "raw"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.provenance not in ("raw", "dilated"):
            raise ContractError(f"unknown provenance {self.provenance!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def any(self) -> bool:
        return bool(self.mask.any())


def crop_box(width: int, height: int, patch: int = PATCH) -> tuple[int, int, int, int]:
    """Centre crop (x0, y0, cw, ch) with both sides divisible by ``patch``."""
    if width < patch or height < patch:
        raise ImageTooSmall(f"image {width}x{height} smaller than patch {patch}")
    cw = width - width % patch
    ch = height - height % patch
    return (width - cw) // 2, (height - ch) // 2, cw, ch


def _builtin_features(img: np.ndarray, patch: int) -> np.ndarray:
    h, w, _ = img.shape
    gh, gw = h // patch, w // patch
    blocks = img.reshape(gh, patch, gw, patch, 3).transpose(0, 2, 1, 3, 4).reshape(gh, gw, patch * patch, 3)
    mean = blocks.mean(axis=2) - 0.5  # centred so cosine similarity sees brightness changes
    std = blocks.std(axis=2)

    luma = img @ _LUMA
    gy, gx = np.gradient(luma)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    bins = np.rint(ang / (2 * np.pi / _N_BINS)).astype(np.int64) % _N_BINS
    onehot = np.zeros((h, w, _N_BINS))
    np.put_along_axis(onehot, bins[..., None], mag[..., None], axis=2)
    hist = onehot.reshape(gh, patch, gw, patch, _N_BINS).sum(axis=(1, 3)) / (patch * patch)

    f = np.concatenate([mean, std, hist], axis=2)
    norm = np.linalg.norm(f, axis=2, keepdims=True)
    return np.where(norm > 0, f / np.where(norm > 0, norm, 1.0), 0.0)


def extract_features(image: np.ndarray, extractor_kind: str = BUILTIN, path=None, patch: int = PATCH) -> FeatureMap:
    """Per-patch features of the centre-cropped image.

    ``external-file`` reads a precomputed grid from ``path`` and checks that
    its dimensions agree with the image and patch size.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionMismatch(f"expected an (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    x0, y0, cw, ch = crop_box(w, h, patch)
    if extractor_kind == BUILTIN:
        return FeatureMap(_builtin_features(image[y0:y0 + ch, x0:x0 + cw], patch), patch)
    if extractor_kind == EXTERNAL:
        if path is None:
            raise ContractError("external-file extractor needs a feature file path")
        fm = read_features(path)
        if fm.patch != patch or (fm.grid_w, fm.grid_h) != (cw // patch, ch // patch):
            raise FeatureFileMismatch(
                f"feature grid {fm.grid_w}x{fm.grid_h} (P={fm.patch}) does not fit a {w}x{h} image with P={patch}"
            )
        return fm
    raise ContractError(f"extractor {extractor_kind!r} has no patch features")


def write_features(fm: FeatureMap, path) -> None:
    gh, gw, d = fm.features.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<4I", gw, gh, d, fm.patch))
        f.write(fm.features.astype("<f4").tobytes())


def read_features(path) -> FeatureMap:
    data = Path(path).read_bytes()
    head = len(FEATURE_MAGIC) + 16
    if not data.startswith(FEATURE_MAGIC) or len(data) < head:
        raise FormatError(f"{path}: not a feature file")
    gw, gh, d, p = struct.unpack_from("<4I", data, len(FEATURE_MAGIC))
    body = data[head:]
    if len(body) != gw * gh * d * 4:
        raise FormatError(f"{path}: expected {gw * gh * d * 4} feature bytes, found {len(body)}")
    return FeatureMap(np.frombuffer(body, dtype="<f4").reshape(gh, gw, d), p)


def cosine_grid(feat_prev: FeatureMap, feat_new: FeatureMap) -> np.ndarray:
    a = feat_prev.features.astype(np.float64)
    b = feat_new.features.astype(np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"feature maps differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=2)
    nb = np.linalg.norm(b, axis=2)
    dot = (a * b).sum(axis=2)
    zero = (na == 0) | (nb == 0)
    return np.where(zero, 1.0, dot / np.where(zero, 1.0, na * nb))


def change_mask(feat_prev: FeatureMap, feat_new: FeatureMap, tau1: float = TAU1):
    """Soft change score ``1 - cos`` and the binary grid ``cos <= tau1``."""
    cos = cosine_grid(feat_prev, feat_new)
    return 1.0 - cos, cos <= tau1


def upsample_and_pad(grid: np.ndarray, width: int, height: int, patch: int = PATCH, tau1: float = TAU1) -> ChangeMask2D:
    """Bilinearly resize the soft change grid (``1 - cos``) to the cropped size, threshold, and zero-pad.

    A pixel is changed when its interpolated cosine is at most ``tau1``. A
    0/1 grid works too: changed cells then need half the interpolation weight.
    """
    x0, y0, cw, ch = crop_box(width, height, patch)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape != (ch // patch, cw // patch):
        raise DimensionMismatch(f"grid {grid.shape} does not match crop {cw}x{ch} with P={patch}")
    up = zoom(grid, patch, order=1, grid_mode=True, mode="nearest")
    out = np.zeros((height, width), dtype=bool)
    out[y0:y0 + ch, x0:x0 + cw] = 1.0 - up <= tau1 + 1e-12
    return ChangeMask2D(out, "raw")


def kernel_side(width: int) -> int:
    side = int(np.floor(0.02 * width + 0.5))
    if side % 2 == 0:
        side += 1
    return max(side, 3)


def dilate(mask: ChangeMask2D | np.ndarray, side: int | None = None) -> ChangeMask2D:
    m = mask.mask if isinstance(mask, ChangeMask2D) else np.asarray(mask, dtype=bool)
    side = side if side is not None else kernel_side(m.shape[1])
    out = maximum_filter(m.astype(np.uint8), size=side, mode="constant", cval=0).astype(bool)
    return ChangeMask2D(out, "dilated")


def pixel_change(rendered: np.ndarray, image: np.ndarray, extractor_kind: str) -> np.ndarray:
    """Raw per-pixel masks of the pixel-space baselines."""
    rendered = np.asarray(rendered, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if extractor_kind == COLOR_L2:
        return np.linalg.norm(rendered - image, axis=2) > COLOR_L2_THRESHOLD
    if extractor_kind == SSIM:
        s, _ = ssim_map(rendered, image)
        return s.mean(axis=2) < SSIM_THRESHOLD
    raise ContractError(f"{extractor_kind!r} is not a pixel-space extractor")


def view_mask(rendered: np.ndarray, image: np.ndarray, extractor_kind: str = BUILTIN, tau1: float = TAU1,
              feature_paths=None, patch: int = PATCH) -> ChangeMask2D:
    """Raw (undilated) change mask for one view."""
    rendered = np.asarray(rendered)
    image = np.asarray(image)
    if rendered.shape != image.shape:
        raise DimensionMismatch(f"render {rendered.shape} vs image {image.shape}")
    h, w = image.shape[:2]
    if extractor_kind in (COLOR_L2, SSIM):
        return ChangeMask2D(pixel_change(rendered, image, extractor_kind), "raw")
    if extractor_kind == EXTERNAL:
        prev_path, new_path = feature_paths if feature_paths is not None else (None, None)
        f_prev = extract_features(rendered, EXTERNAL, prev_path, patch)
        f_new = extract_features(image, EXTERNAL, new_path, patch)
    elif extractor_kind == BUILTIN:
        f_prev = extract_features(rendered, BUILTIN, patch=patch)
        f_new = extract_features(image, BUILTIN, patch=patch)
    else:
        raise ContractError(f"unknown extractor {extractor_kind!r}; expected one of {EXTRACTORS}")
    soft, _ = change_mask(f_prev, f_new, tau1)
    return upsample_and_pad(soft, w, h, patch, tau1)


def detect_changes(prev_scene: GaussianScene, images: Sequence[np.ndarray], cameras: Sequence[Camera],
                   extractor_kind: str = BUILTIN, tau1: float = TAU1, feature_paths=None,
                   precision=None) -> list[ChangeMask2D]:
    """Dilated change mask per view, comparing each image to a render of ``prev_scene``."""
    from .rasterizer import render

    if len(images) != len(cameras):
        raise DimensionMismatch(f"{len(images)} images for {len(cameras)} cameras")
    out = []
    for i, (img, cam) in enumerate(zip(images, cameras)):
        img = np.asarray(img)
        if img.shape[:2] != (cam.height, cam.width):
            raise DimensionMismatch(f"view {i}: image {img.shape[:2]} vs camera {(cam.height, cam.width)}")
        rendered = render(prev_scene, cam, precision=precision).image
        paths = feature_paths[i] if feature_paths is not None else None
        out.append(dilate(view_mask(rendered, img, extractor_kind, tau1, paths)))
    return out


def write_mask_png(mask: ChangeMask2D | np.ndarray, path) -> None:
    m = mask.mask if isinstance(mask, ChangeMask2D) else np.asarray(mask, dtype=bool)
    Image.fromarray(m.astype(np.uint8) * 255).save(path)


def read_mask_png(path, provenance: str = "dilated") -> ChangeMask2D:
    with Image.open(path) as im:
        a = np.asarray(im.convert("L"))
    return ChangeMask2D(a >= 128, provenance)
