import numpy as np
import pytest

from conftest import random_scene, small_camera
from contsplat.core import N_PARAMS, GaussianScene
from contsplat.errors import BitmapMismatch, ChecksumError, FormatError, FormatVersionError, IndexOutOfRange, \
    MissingDelta, OverlappingChanges
from contsplat.history import (
    DeltaRecord,
    changed_suffix,
    delta_from_bytes,
    delta_to_bytes,
    load_delta,
    merge_concurrent,
    record_delta,
    recover_state,
    save_delta,
    stable_partition,
    step_back,
)
from contsplat.rasterizer import render


def lettered(n=4):
    """Scene whose rows are distinguishable by their first field: A=0, B=1, ..."""
    p = np.zeros((n, N_PARAMS), np.float32)
    p[:, 0] = np.arange(n)
    p[:, 3] = 1.0
    return GaussianScene(p)


def fake_optimize(scene, first, rng):
    """Perturb the changed suffix, append clones and drop a few suffix rows."""
    p = scene.params.copy()
    p[first:] += rng.normal(0, 0.01, p[first:].shape).astype(np.float32)
    grow = p[first:][: rng.integers(0, 4)] + np.float32(0.5)
    p = np.concatenate([p, grow])
    suffix = np.arange(first, len(p))
    drop = rng.choice(suffix, size=min(len(suffix), rng.integers(0, 3)), replace=False)
    return GaussianScene(np.delete(p, drop, axis=0))


class TestRecord:
    def test_abcd_example(self):
        scene, delta = record_delta(lettered(), [1, 3])
        assert scene.params[:, 0].tolist() == [0, 2, 1, 3]
        assert delta.old_changed[:, 0].tolist() == [1, 3]
        assert delta.bitmap.astype(int).tolist() == [0, 1, 0, 1]
        assert delta.static_count == 2

    def test_empty_keeps_order(self):
        src = lettered()
        scene, delta = record_delta(src, [])
        assert scene.equals(src) and delta.is_empty() and delta.static_count == 4

    def test_popcount_invariant(self, rng):
        for _ in range(20):
            n = int(rng.integers(1, 50))
            idx = rng.choice(n, size=int(rng.integers(0, n + 1)), replace=False)
            _, delta = record_delta(random_scene(rng, n, dtype=np.float32), idx)
            assert delta.bitmap.sum() == len(delta.old_changed) == len(idx)

    def test_partition_is_permutation(self, rng):
        order, _ = stable_partition(30, rng.choice(30, 7, replace=False))
        assert sorted(order.tolist()) == list(range(30))

    def test_index_checked(self):
        with pytest.raises(IndexOutOfRange):
            record_delta(lettered(), [4])


class TestRecover:
    def test_same_time_is_identity(self):
        src = lettered()
        _, delta = record_delta(src, [1], t=3)
        assert recover_state(src, [delta], 3) is src

    def test_one_step(self):
        src = lettered()
        scene, delta = record_delta(src, [1, 3])
        assert step_back(scene, delta).equals(src)
        assert recover_state(scene, [delta], 0).equals(src)

    def test_ten_step_chain(self, rng):
        snapshots = [random_scene(rng, 40, dtype=np.float32)]
        deltas = []
        for t in range(1, 11):
            prev = snapshots[-1]
            idx = rng.choice(len(prev), size=int(rng.integers(1, 8)), replace=False)
            scene, delta = record_delta(prev, idx, t)
            deltas.append(delta)
            snapshots.append(fake_optimize(scene, delta.static_count, rng))
        for n in range(11):
            got = recover_state(snapshots[-1], deltas, n)
            assert got.params.tobytes() == snapshots[n].params.tobytes()

    def test_missing_delta(self):
        scene, d2 = record_delta(lettered(), [0], t=2)
        with pytest.raises(MissingDelta):
            recover_state(scene, [d2], 0)

    def test_future_time(self):
        _, d1 = record_delta(lettered(), [0], t=1)
        with pytest.raises(MissingDelta):
            recover_state(lettered(), [d1], 5)

    def test_bitmap_mismatch(self):
        with pytest.raises(BitmapMismatch):
            DeltaRecord(1, np.zeros((1, N_PARAMS)), np.array([1, 1, 0], bool), 1)

    def test_scene_too_short(self):
        _, delta = record_delta(lettered(6), [0])
        with pytest.raises(BitmapMismatch):
            step_back(lettered(3), delta)


class TestDeltaFile:
    def test_round_trip(self, rng, tmp_path):
        _, delta = record_delta(random_scene(rng, 21, dtype=np.float32), [2, 5, 20], t=7)
        save_delta(delta, tmp_path / "d.cldelta")
        back = load_delta(tmp_path / "d.cldelta")
        assert back.t == 7 and back.static_count == 18
        assert np.array_equal(back.bitmap, delta.bitmap)
        assert back.old_changed.tobytes() == delta.old_changed.tobytes()

    def test_size_bound(self, rng):
        n = 1000
        idx = rng.choice(n, 37, replace=False)
        _, delta = record_delta(random_scene(rng, n, dtype=np.float32), idx)
        assert len(delta_to_bytes(delta)) <= 37 * N_PARAMS * 4 + -(-n // 8) + 64

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            delta_from_bytes(b"NOTDELTA" + bytes(40))

    def test_future_version(self):
        data = bytearray(delta_to_bytes(record_delta(lettered(), [1])[1]))
        data[7:8] = b"2"
        with pytest.raises(FormatVersionError):
            delta_from_bytes(bytes(data))

    def test_checksum(self):
        data = bytearray(delta_to_bytes(record_delta(lettered(), [1])[1]))
        data[-10] ^= 0x01
        with pytest.raises(ChecksumError):
            delta_from_bytes(bytes(data))

    def test_truncated(self):
        data = delta_to_bytes(record_delta(lettered(), [1])[1])
        with pytest.raises(FormatError):
            delta_from_bytes(data[:-20])


def independent_update(prev, idx, rng, shift):
    scene, delta = record_delta(prev, idx)
    p = scene.params.copy()
    p[delta.static_count:, 11:14] = np.clip(p[delta.static_count:, 11:14] + shift, 0, 1)
    return GaussianScene(p), delta


class TestMerge:
    def test_single_update_identical(self, rng):
        prev = random_scene(rng, 12, dtype=np.float32)
        scene, delta = independent_update(prev, [3, 7], rng, 0.2)
        merged = merge_concurrent(prev, [(changed_suffix(scene, delta), delta.bitmap)])
        assert merged.equals(scene)

    def test_order_independent_render(self, rng):
        cam = small_camera()
        prev = random_scene(rng, 10, dtype=np.float32)
        s1, d1 = independent_update(prev, [1, 2], rng, 0.3)
        s2, d2 = independent_update(prev, [6], rng, -0.3)
        u1 = (changed_suffix(s1, d1), d1.bitmap)
        u2 = (changed_suffix(s2, d2), d2.bitmap)
        a = merge_concurrent(prev, [u1, u2])
        b = merge_concurrent(prev, [u2, u1])
        assert len(a) == len(b) == 10
        assert np.allclose(render(a, cam).image, render(b, cam).image, atol=1e-6)

    def test_overlap_rejected(self, rng):
        prev = random_scene(rng, 8, dtype=np.float32)
        s1, d1 = independent_update(prev, [1, 2], rng, 0.1)
        s2, d2 = independent_update(prev, [2, 5], rng, 0.1)
        with pytest.raises(OverlappingChanges):
            merge_concurrent(prev, [(changed_suffix(s1, d1), d1.bitmap), (changed_suffix(s2, d2), d2.bitmap)])

    def test_bitmap_length_checked(self, rng):
        prev = random_scene(rng, 8, dtype=np.float32)
        with pytest.raises(BitmapMismatch):
            merge_concurrent(prev, [(GaussianScene(), np.zeros(5, bool))])

    def test_merged_scene_is_recordable(self, rng):
        prev = random_scene(rng, 8, dtype=np.float32)
        s1, d1 = independent_update(prev, [0], rng, 0.1)
        merged = merge_concurrent(prev, [(changed_suffix(s1, d1), d1.bitmap)])
        scene, delta = record_delta(merged, [len(merged) - 1], t=2)
        assert step_back(scene, delta).equals(merged)
