import math

import numpy as np
import pytest

from oracles import naive_ssim
from contsplat.bench import (
    BenchConfig,
    Intrinsics,
    SceneSpec,
    apply_change,
    gen_scene,
    gt_change_masks,
    make_case,
    mask_pr,
    orbit_cameras,
    psnr,
    ssim,
)
from contsplat.errors import ContractError, DimensionMismatch, NoObjects

SPEC = SceneSpec(n_gaussians=500)


class TestScene:
    def test_deterministic(self):
        assert gen_scene(4, SPEC).scene.params.tobytes() == gen_scene(4, SPEC).scene.params.tobytes()

    def test_seeds_differ(self):
        assert gen_scene(4, SPEC).scene.params.tobytes() != gen_scene(5, SPEC).scene.params.tobytes()

    def test_objects_inside_boxes(self):
        b = gen_scene(1, SPEC)
        assert len(b.object_ids) == 5 and len(b.scene) == 500
        for k, (lo, hi) in b.boxes.items():
            p = b.scene.positions[b.labels == k]
            assert len(p) and (p >= lo - 1e-6).all() and (p <= hi + 1e-6).all()

    def test_too_small(self):
        with pytest.raises(ContractError):
            SceneSpec(n_gaussians=5)


class TestChange:
    def test_remove_count(self):
        b = gen_scene(2, SPEC)
        out = apply_change(b, "remove", 7)
        (k,) = out.changed
        assert len(out.bench.scene) == len(b.scene) - int((b.labels == k).sum())

    def test_move_shifts_centroid(self):
        b = gen_scene(2, SPEC)
        out = apply_change(b, "move", 7)
        (k,) = out.changed
        assert np.allclose(out.bench.centroid(k) - b.centroid(k), out.shift, atol=1e-5)
        assert np.linalg.norm(out.shift) > 0

    def test_add_new_label(self):
        b = gen_scene(2, SPEC)
        out = apply_change(b, "add", 7)
        (k,) = out.changed
        assert k not in b.object_ids and (out.bench.labels == k).sum() >= 10

    def test_multi_two_labels(self):
        out = apply_change(gen_scene(2, SPEC), "multi", 7)
        assert len(set(out.changed)) == 2

    def test_no_objects(self):
        b = gen_scene(2, SceneSpec(n_gaussians=100, n_objects=0))
        with pytest.raises(NoObjects):
            apply_change(b, "remove", 1)

    def test_unknown_op(self):
        with pytest.raises(ContractError):
            apply_change(gen_scene(2, SPEC), "swap", 1)

    def test_unchanged_scene_empty_truth(self):
        b = gen_scene(2, SPEC)
        cams = orbit_cameras(3, [0, 0, 0], 3.0, 2.0, Intrinsics(64, 48, 52, 52))
        assert not any(m.any() for m in gt_change_masks(b.scene, b.scene.copy(), cams))


class TestCameras:
    def test_four_at_right_angles(self):
        cams = orbit_cameras(4, [0, 0, 0], 2.0, 0.0)
        c = np.array([cam.center for cam in cams])
        ang = np.degrees(np.arctan2(c[:, 1], c[:, 0]))
        assert np.allclose(np.diff(ang) % 360, 90)

    def test_look_at_oracle(self):
        center = np.array([0.3, -0.2, 0.1])
        for cam in orbit_cameras(7, center, 2.5, 1.2) + orbit_cameras(1, center, 1.0, 0.5):
            d = center - cam.center
            assert np.linalg.norm(cam.rotation @ (d / np.linalg.norm(d)) - [0, 0, 1]) < 1e-9
            assert np.allclose(cam.rotation @ cam.rotation.T, np.eye(3), atol=1e-12)

    def test_n_zero(self):
        with pytest.raises(ContractError):
            orbit_cameras(0, [0, 0, 0], 1.0, 1.0)


class TestMetrics:
    def test_identical(self, rng):
        a = rng.uniform(size=(20, 20, 3))
        assert psnr(a, a) == math.inf and ssim(a, a) == pytest.approx(1.0)

    def test_psnr_20db(self):
        assert psnr(np.full((8, 8, 3), 0.5), np.full((8, 8, 3), 0.6)) == pytest.approx(20.0)

    def test_psnr_symmetric(self, rng):
        a, b = rng.uniform(size=(2, 10, 10, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_ssim_matches_naive(self, rng):
        a = rng.uniform(size=(24, 20, 3))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(naive_ssim(a, b).mean(), abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_pr_perfect(self, rng):
        m = [rng.uniform(size=(10, 10)) > 0.5]
        pr = mask_pr(m, m)
        assert (pr.precision, pr.recall) == (1.0, 1.0)

    def test_pr_all_true(self, rng):
        t = rng.uniform(size=(10, 10)) > 0.7
        pr = mask_pr([np.ones((10, 10), bool)], [t])
        assert pr.recall == 1.0 and pr.precision == pytest.approx(t.mean())

    def test_pr_counting_oracle(self, rng):
        p = [rng.uniform(size=(6, 7)) > 0.5 for _ in range(3)]
        t = [rng.uniform(size=(6, 7)) > 0.5 for _ in range(3)]
        tp = sum(int(np.sum(a & b)) for a, b in zip(p, t))
        fp = sum(int(np.sum(a & ~b)) for a, b in zip(p, t))
        fn = sum(int(np.sum(~a & b)) for a, b in zip(p, t))
        pr = mask_pr(p, t)
        assert (pr.tp, pr.fp, pr.fn) == (tp, fp, fn)
        assert pr.precision == tp / (tp + fp) and pr.recall == tp / (tp + fn)


def test_case_deterministic():
    cfg = BenchConfig(scene=SceneSpec(n_gaussians=300), intrinsics=Intrinsics(64, 48, 52, 52), n_train=3, n_test=2)
    a = make_case("move", cfg)
    b = make_case("move", cfg)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.train_images, b.train_images))
    assert len(a.train_cameras) == 3 and len(a.test_cameras) == 2
