import numpy as np
import pytest
from scipy.ndimage import label

from oracles import naive_dilate
from contsplat.bench import Intrinsics, gt_change_masks, make_case, mask_pr, orbit_cameras
from contsplat.change2d import (
    BUILTIN,
    COLOR_L2,
    EXTERNAL,
    ChangeMask2D,
    FeatureMap,
    change_mask,
    cosine_grid,
    crop_box,
    detect_changes,
    dilate,
    extract_features,
    kernel_side,
    read_features,
    read_mask_png,
    upsample_and_pad,
    view_mask,
    write_features,
    write_mask_png,
)
from contsplat.core import GaussianScene, make_gaussian
from contsplat.errors import DimensionMismatch, FeatureFileMismatch, FormatError, ImageTooSmall
from contsplat.rasterizer import render


def bilinear_oracle(grid, patch):
    """Half-pixel aligned, edge-clamped bilinear resize written out per pixel."""
    gh, gw = grid.shape
    out = np.empty((gh * patch, gw * patch))
    for y in range(gh * patch):
        v = min(max((y + 0.5) / patch - 0.5, 0.0), gh - 1)
        y0 = int(np.floor(v))
        y1, fy = min(y0 + 1, gh - 1), v - y0
        for x in range(gw * patch):
            u = min(max((x + 0.5) / patch - 0.5, 0.0), gw - 1)
            x0 = int(np.floor(u))
            x1, fx = min(x0 + 1, gw - 1), u - x0
            top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
            bot = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
            out[y, x] = top * (1 - fy) + bot * fy
    return out


class TestFeatures:
    def test_crop_960(self):
        x0, y0, cw, ch = crop_box(960, 540)
        assert (cw, ch) == (952, 532) and (x0, y0) == (4, 4)

    def test_grid_shape(self, rng):
        fm = extract_features(rng.uniform(size=(30, 45, 3)))
        assert (fm.grid_h, fm.grid_w) == (2, 3)

    def test_uniform_gray_identical(self):
        a = extract_features(np.full((28, 28, 3), 0.3))
        b = extract_features(np.full((28, 28, 3), 0.3))
        assert np.array_equal(a.features, b.features)
        assert np.allclose(cosine_grid(a, b), 1)

    def test_unit_norm(self, rng):
        fm = extract_features(rng.uniform(size=(28, 42, 3)))
        assert np.allclose(np.linalg.norm(fm.features, axis=2), 1, atol=1e-6)

    def test_rotation_permutes_histogram(self, rng):
        img = rng.uniform(size=(14, 14, 3))
        a = extract_features(img).features[0, 0]
        b = extract_features(np.rot90(img).copy()).features[0, 0]
        assert np.allclose(a[:6], b[:6], atol=1e-6)
        # a quarter turn moves every gradient angle by two 45-degree bins
        assert np.allclose(np.roll(a[6:], -2), b[6:], atol=1e-6)

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            extract_features(np.zeros((10, 20, 3)))

    def test_file_round_trip(self, tmp_path, rng):
        fm = FeatureMap(rng.normal(size=(3, 4, 16)), 14)
        write_features(fm, tmp_path / "f.bin")
        back = read_features(tmp_path / "f.bin")
        assert back.patch == 14 and back.features.tobytes() == fm.features.tobytes()

    def test_external_mismatch(self, tmp_path, rng):
        write_features(FeatureMap(rng.normal(size=(3, 4, 8))), tmp_path / "f.bin")
        with pytest.raises(FeatureFileMismatch):
            extract_features(np.zeros((56, 70, 3)), EXTERNAL, tmp_path / "f.bin")
        assert extract_features(np.zeros((42, 56, 3)), EXTERNAL, tmp_path / "f.bin").dim == 8

    def test_truncated_file(self, tmp_path, rng):
        write_features(FeatureMap(rng.normal(size=(2, 2, 4))), tmp_path / "f.bin")
        data = (tmp_path / "f.bin").read_bytes()
        (tmp_path / "g.bin").write_bytes(data[:-3])
        with pytest.raises(FormatError):
            read_features(tmp_path / "g.bin")


class TestChangeMask:
    def test_identical_no_change(self, rng):
        fm = FeatureMap(rng.normal(size=(3, 3, 5)))
        soft, grid = change_mask(fm, fm)
        assert not grid.any() and np.allclose(soft, 0, atol=1e-7)

    def test_orthogonal_changed(self):
        a = FeatureMap(np.array([[[1.0, 0.0]]]))
        b = FeatureMap(np.array([[[0.0, 1.0]]]))
        assert change_mask(a, b)[1].all()

    def test_boundary_inclusive(self):
        a = FeatureMap(np.array([[[1.0, 0, 0, 0]]]))
        b = FeatureMap(np.array([[[1.0, 1, 1, 1]]]))
        assert cosine_grid(a, b)[0, 0] == 0.5
        assert change_mask(a, b)[1][0, 0]

    def test_symmetric(self, rng):
        a = FeatureMap(rng.normal(size=(4, 5, 6)))
        b = FeatureMap(rng.normal(size=(4, 5, 6)))
        assert np.array_equal(change_mask(a, b)[1], change_mask(b, a)[1])

    def test_zero_vector_unchanged(self):
        a = FeatureMap(np.zeros((1, 1, 3)))
        b = FeatureMap(np.ones((1, 1, 3)))
        assert not change_mask(a, b)[1].any()

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            cosine_grid(FeatureMap(np.ones((2, 2, 3))), FeatureMap(np.ones((2, 3, 3))))


class TestUpsample:
    def test_all_zero(self):
        assert not upsample_and_pad(np.zeros((38, 68)), 960, 540).any()

    def test_all_one_fills_crop_only(self):
        m = upsample_and_pad(np.ones((38, 68)), 960, 540).mask
        assert m[4:536, 4:956].all()
        assert not m[:4].any() and not m[:, :4].any() and not m[536:].any() and not m[:, 956:].any()

    def test_single_cell_blob(self):
        grid = np.zeros((5, 6))
        grid[2, 3] = 1.0
        m = upsample_and_pad(grid, 84, 70).mask
        labels, n = label(m)
        assert n == 1 and m[2 * 14 + 7, 3 * 14 + 7]
        assert m.sum() == (bilinear_oracle(grid, 14) >= 0.5).sum()

    def test_soft_grid_matches_oracle(self, rng):
        grid = rng.uniform(size=(4, 5))
        m = upsample_and_pad(grid, 70, 56).mask
        want = 1.0 - bilinear_oracle(grid, 14) <= 0.5
        assert np.array_equal(m, want)

    def test_grid_shape_checked(self):
        with pytest.raises(DimensionMismatch):
            upsample_and_pad(np.zeros((3, 3)), 70, 56)


class TestDilate:
    def test_kernel_side(self):
        assert kernel_side(960) == 19
        assert kernel_side(320) == 7
        assert kernel_side(50) == 3
        assert kernel_side(100) == 3

    def test_empty_stays_empty(self):
        assert not dilate(np.zeros((40, 60), bool)).any()

    def test_single_pixel_block(self):
        m = np.zeros((540, 960), bool)
        m[200, 300] = True
        out = dilate(m).mask
        assert out.sum() == 19 * 19 and out[191:210, 291:310].all()

    def test_matches_naive_oracle(self, rng):
        m = rng.uniform(size=(30, 40)) > 0.97
        assert np.array_equal(dilate(m, 5).mask, naive_dilate(m, 5))

    def test_extensive_and_provenance(self, rng):
        m = rng.uniform(size=(30, 40)) > 0.9
        out = dilate(ChangeMask2D(m))
        assert (out.mask | ~m).all() and out.provenance == "dilated"

    def test_mask_png_round_trip(self, tmp_path, rng):
        m = rng.uniform(size=(20, 30)) > 0.5
        write_mask_png(m, tmp_path / "m.png")
        assert np.array_equal(read_mask_png(tmp_path / "m.png").mask, m)


def recolour_scene():
    centre = make_gaussian([0, 0, 0], scale=0.3, opacity=0.9, color=(0.9, 0.2, 0.2))
    ground = [
        make_gaussian([x, y, -0.3], scale=[0.25, 0.25, 0.02], opacity=0.95, color=(0.5 + 0.1 * ((i + j) % 2),) * 3)
        for i, x in enumerate(np.linspace(-2, 2, 9))
        for j, y in enumerate(np.linspace(-2, 2, 9))
    ]
    before = GaussianScene.from_gaussians([centre] + ground)
    after = before.copy()
    after.params[0, 11:14] = (0.2, 0.3, 0.9)
    return before, after


class TestDetect:
    def test_unchanged_views_empty(self):
        before, _ = recolour_scene()
        cams = orbit_cameras(3, [0, 0, 0], 3.0, 1.5, Intrinsics(128, 96, 110, 110))
        imgs = [render(before, c).image for c in cams]
        assert not any(m.any() for m in detect_changes(before, imgs, cams))

    def test_recoloured_gaussian_covered(self):
        before, after = recolour_scene()
        cams = orbit_cameras(6, [0, 0, 0], 3.0, 1.5, Intrinsics(128, 96, 110, 110))
        imgs = [render(after, c).image for c in cams]
        masks = detect_changes(before, imgs, cams)
        for cam, m, img in zip(cams, masks, imgs):
            # visible footprint: where the recolour shifts some channel by more than 0.2
            foot = np.abs(img - render(before, cam).image).max(axis=2) > 0.2
            assert foot.any() and m.mask[foot].all()

    def test_image_count_checked(self):
        before, _ = recolour_scene()
        cams = orbit_cameras(2, [0, 0, 0], 3.0, 1.5, Intrinsics(64, 48, 60, 60))
        with pytest.raises(DimensionMismatch):
            detect_changes(before, [np.zeros((48, 64, 3))], cams)

    def test_view_mask_shape_checked(self):
        with pytest.raises(DimensionMismatch):
            view_mask(np.zeros((28, 28, 3)), np.zeros((28, 42, 3)))

    @pytest.mark.xfail(strict=True, reason="colour-only descriptor is less sensitive than per-pixel colour distance")
    def test_builtin_recall_beats_color_l2(self):
        case = make_case("add")
        truth = gt_change_masks(case.before.scene, case.after, case.train_cameras)
        recall = {
            k: mask_pr(detect_changes(case.before.scene, case.train_images, case.train_cameras, k), truth).recall
            for k in (BUILTIN, COLOR_L2)
        }
        assert recall[BUILTIN] > recall[COLOR_L2]
