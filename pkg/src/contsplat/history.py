"""Delta recording, state recovery and merging of concurrent updates.

Every scene keeps its static Gaussians as a prefix. A delta for time ``t``
stores the Gaussians of the previous scene that were about to change, plus a
bitmap over the previous scene marking where they sat; together with the
static prefix of the current scene this rebuilds the previous scene exactly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import N_PARAMS, GaussianScene
from .errors import (
    BitmapMismatch,
    ChecksumError,
    FormatError,
    FormatVersionError,
    IndexOutOfRange,
    MissingDelta,
    OverlappingChanges,
)

DELTA_MAGIC = b"CLDELTA1"
_DELTA_STEM = b"CLDELTA"


@dataclass(eq=False)
class DeltaRecord:
    t: int
    old_changed: np.ndarray  # (k, 14) float32 rows of the previous scene, in original order
    bitmap: np.ndarray  # (n,) bool over the previous scene, True = changed
    static_count: int

    def __post_init__(self):
        self.old_changed = np.asarray(self.old_changed, dtype=np.float32).reshape(-1, N_PARAMS)
        self.bitmap = np.asarray(self.bitmap, dtype=bool).reshape(-1)
        self.check()

    def check(self) -> None:
        k = int(self.bitmap.sum())
        if k != len(self.old_changed):
            raise BitmapMismatch(f"bitmap flags {k} Gaussians but {len(self.old_changed)} are stored")
        if self.static_count != len(self.bitmap) - k:
            raise BitmapMismatch(f"static count {self.static_count} != {len(self.bitmap) - k}")

    @property
    def changed_count(self) -> int:
        return len(self.old_changed)

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bitmap)

    def is_empty(self) -> bool:
        return self.changed_count == 0


def stable_partition(n: int, indices) -> tuple[np.ndarray, np.ndarray]:
    """``(order, bitmap)``: statics first then changed, each in original order."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if len(idx) and (idx.min() < 0 or idx.max() >= n):
        raise IndexOutOfRange(f"changed index out of range for a scene of {n}")
    bitmap = np.zeros(n, dtype=bool)
    bitmap[idx] = True
    order = np.concatenate([np.flatnonzero(~bitmap), np.flatnonzero(bitmap)])
    return order, bitmap


def record_delta(scene: GaussianScene, indices, t: int = 1) -> tuple[GaussianScene, DeltaRecord]:
    """Reorder ``scene`` so changed Gaussians form the suffix, and record what they were."""
    order, bitmap = stable_partition(len(scene), indices)
    params = scene.params.astype(np.float32, copy=False)
    delta = DeltaRecord(t, params[bitmap].copy(), bitmap, int((~bitmap).sum()))
    return GaussianScene(params[order].copy()), delta


def step_back(current: GaussianScene, delta: DeltaRecord) -> GaussianScene:
    """Rebuild the scene before ``delta`` from the static prefix of ``current``."""
    delta.check()
    if delta.static_count > len(current):
        raise BitmapMismatch(f"delta needs {delta.static_count} static Gaussians, scene has {len(current)}")
    out = np.empty((len(delta.bitmap), N_PARAMS), dtype=np.float32)
    out[~delta.bitmap] = current.params[: delta.static_count]
    out[delta.bitmap] = delta.old_changed
    return GaussianScene(out)


def _by_time(deltas) -> dict[int, DeltaRecord]:
    if isinstance(deltas, Mapping):
        return dict(deltas)
    return {d.t: d for d in deltas}


def recover_state(current: GaussianScene, deltas, n: int, current_time: int | None = None) -> GaussianScene:
    """Scene at time ``n`` from the scene at ``current_time`` and the deltas in between.

    ``current_time`` defaults to the latest delta's time.
    """
    table = _by_time(deltas)
    T = current_time if current_time is not None else max(table, default=n)
    if n > T:
        raise MissingDelta(f"cannot recover future time {n} from time {T}")
    scene = current
    for t in range(T, n, -1):
        if t not in table:
            raise MissingDelta(f"no delta recorded for time {t}")
        scene = step_back(scene, table[t])
    return scene


def merge_concurrent(prev: GaussianScene, updates: Sequence[tuple[GaussianScene, np.ndarray]]) -> GaussianScene:
    """Combine updates made independently from ``prev``.

    Each update is ``(changed_suffix, bitmap)``, where ``bitmap`` flags the
    Gaussians of ``prev`` it replaced. Output: surviving statics in ``prev``
    order, then each suffix in update order.
    """
    taken = np.zeros(len(prev), dtype=bool)
    suffixes = []
    for k, (suffix, bitmap) in enumerate(updates):
        bitmap = np.asarray(bitmap, dtype=bool).reshape(-1)
        if len(bitmap) != len(prev):
            raise BitmapMismatch(f"update {k}: bitmap length {len(bitmap)} != scene size {len(prev)}")
        clash = taken & bitmap
        if clash.any():
            raise OverlappingChanges(f"update {k} changes Gaussian {int(np.flatnonzero(clash)[0])} already claimed")
        taken |= bitmap
        suffixes.append(suffix.params if isinstance(suffix, GaussianScene) else np.asarray(suffix).reshape(-1, N_PARAMS))
    rows = [prev.params[~taken]] + [s.astype(prev.dtype, copy=False) for s in suffixes]
    return GaussianScene(np.concatenate(rows))


def changed_suffix(scene: GaussianScene, delta: DeltaRecord) -> GaussianScene:
    return GaussianScene(scene.params[delta.static_count:].copy())


# ---------------------------------------------------------------------------
# delta file: magic, u32 t, u64 static_count, u64 bitmap length, packed bits,
# u64 changed count, 14 f32 per Gaussian, u32 CRC32 of everything before it


def delta_to_bytes(delta: DeltaRecord) -> bytes:
    bits = np.packbits(delta.bitmap, bitorder="little").tobytes()
    body = (
        DELTA_MAGIC
        + struct.pack("<IQQ", delta.t, delta.static_count, len(delta.bitmap))
        + bits
        + struct.pack("<Q", delta.changed_count)
        + delta.old_changed.astype("<f4").tobytes()
    )
    return body + struct.pack("<I", zlib.crc32(body))


def delta_from_bytes(data: bytes, source: str = "<bytes>") -> DeltaRecord:
    if len(data) < 8 or not data.startswith(_DELTA_STEM):
        raise FormatError(f"{source}: not a delta file (bad magic)")
    if data[:8] != DELTA_MAGIC:
        raise FormatVersionError(f"{source}: unsupported delta format version {data[7:8]!r}")
    try:
        t, static_count, n = struct.unpack_from("<IQQ", data, 8)
        off = 8 + 20
        nbytes = (n + 7) // 8
        bits = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=off)
        off += nbytes
        (k,) = struct.unpack_from("<Q", data, off)
        off += 8
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{source}: truncated delta file") from exc
    if len(data) != off + k * N_PARAMS * 4 + 4:
        raise FormatError(f"{source}: size {len(data)} does not match header")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError(f"{source}: checksum mismatch")
    bitmap = np.unpackbits(bits, count=n, bitorder="little").astype(bool)
    rows = np.frombuffer(data, dtype="<f4", count=k * N_PARAMS, offset=off).reshape(k, N_PARAMS)
    return DeltaRecord(t, rows.astype(np.float32), bitmap, static_count)


def save_delta(delta: DeltaRecord, path) -> None:
    Path(path).write_bytes(delta_to_bytes(delta))


def load_delta(path) -> DeltaRecord:
    return delta_from_bytes(Path(path).read_bytes(), str(path))
