import numpy as np
import pytest

from conftest import random_scene, small_camera
from contsplat.core import (
    COV2D_FLOOR,
    Camera,
    ChangeSet,
    GaussianScene,
    Sphere,
    inside_spheres,
    knn_mean_distance,
    load_cameras,
    load_scene,
    make_gaussian,
    project_gaussian,
    project_point,
    project_points,
    save_cameras,
    save_scene,
    scene_aabb,
    scene_from_bytes,
    scene_to_bytes,
)
from contsplat.errors import (
    BehindCamera,
    ChecksumError,
    ContractError,
    EmptyScene,
    FormatError,
    FormatVersionError,
    TooFewPoints,
)


def axis_camera(f=100.0, w=64, h=48):
    return Camera(f, f, w / 2, h / 2, np.eye(3), np.zeros(3), w, h)


class TestCamera:
    def test_rejects_bad_rotation(self):
        with pytest.raises(ContractError):
            Camera(10, 10, 8, 8, np.diag([1.0, 1.0, 1.1]), np.zeros(3), 16, 16)

    def test_rejects_tiny_image(self):
        with pytest.raises(ContractError):
            Camera(10, 10, 4, 4, np.eye(3), np.zeros(3), 8, 16)

    def test_look_at_points_forward(self):
        cam = small_camera()
        u, v, depth, front = project_point(cam, [0, 0, 0])
        assert front and depth == pytest.approx(12.0)
        assert (u, v) == pytest.approx((15.5, 15.5))

    def test_json_round_trip(self, tmp_path):
        cams = [small_camera(), axis_camera()]
        save_cameras(cams, tmp_path / "c.json")
        back = load_cameras(tmp_path / "c.json")
        for a, b in zip(cams, back):
            assert np.array_equal(a.rotation, b.rotation)
            assert np.array_equal(a.translation, b.translation)
            assert (a.fx, a.cy, a.width) == (b.fx, b.cy, b.width)

    def test_malformed_json(self, tmp_path):
        (tmp_path / "c.json").write_text('{"fx": 1}')
        with pytest.raises(FormatError):
            load_cameras(tmp_path / "c.json")


class TestProjection:
    def test_point_on_axis_hits_principal_point(self):
        cam = axis_camera()
        p = project_point(cam, [0, 0, 5])
        assert (p.u, p.v, p.depth) == (32.0, 24.0, 5.0)

    def test_behind_camera_is_a_flag(self):
        p = project_point(axis_camera(), [0, 0, -1])
        assert not p.in_front

    def test_vectorized_matches_scalar(self, rng):
        cam = small_camera()
        pts = rng.normal(0, 4, (50, 3))
        uv, depth, front = project_points(cam, pts)
        for i, x in enumerate(pts):
            p = project_point(cam, x)
            assert front[i] == p.in_front
            if p.in_front:
                assert uv[i] == pytest.approx((p.u, p.v))

    def test_isotropic_on_axis_closed_form(self):
        cam = axis_camera()
        s, z = 0.2, 4.0
        sp = project_gaussian(cam, make_gaussian([0, 0, z], scale=s))
        want = np.diag([(cam.fx * s / z) ** 2, (cam.fy * s / z) ** 2]) + COV2D_FLOOR * np.eye(2)
        assert np.allclose(sp.cov2d, want, atol=1e-6)

    def test_doubling_depth_quarters_covariance(self):
        cam = axis_camera()
        g1 = project_gaussian(cam, make_gaussian([0, 0, 3], scale=[0.1, 0.3, 0.2]))
        g2 = project_gaussian(cam, make_gaussian([0, 0, 6], scale=[0.1, 0.3, 0.2]))
        pre1 = g1.cov2d - COV2D_FLOOR * np.eye(2)
        pre2 = g2.cov2d - COV2D_FLOOR * np.eye(2)
        assert np.allclose(pre2, pre1 / 4, rtol=1e-12)

    def test_symmetric_and_floored(self, rng):
        cam = small_camera()
        scene = random_scene(rng, 30, scale=(1e-4, 1.0))
        for g in scene:
            sp = project_gaussian(cam, g)
            assert sp.cov2d[0, 1] == sp.cov2d[1, 0]
            assert np.linalg.eigvalsh(sp.cov2d).min() >= COV2D_FLOOR - 1e-12

    def test_behind_raises(self):
        with pytest.raises(BehindCamera):
            project_gaussian(axis_camera(), make_gaussian([0, 0, -2]))


class TestScene:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        scene = random_scene(rng, 40, dtype=np.float32)
        save_scene(scene, tmp_path / "s.splat")
        assert load_scene(tmp_path / "s.splat").equals(scene)

    def test_empty_scene_round_trip(self):
        assert len(scene_from_bytes(scene_to_bytes(GaussianScene()))) == 0

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            scene_from_bytes(b"NOTASCENE" + bytes(20))

    def test_future_version(self):
        data = bytearray(scene_to_bytes(GaussianScene()))
        data[7:8] = b"9"
        with pytest.raises(FormatVersionError):
            scene_from_bytes(bytes(data))

    def test_checksum(self, rng):
        data = bytearray(scene_to_bytes(random_scene(rng, 3, dtype=np.float32)))
        data[20] ^= 0xFF
        with pytest.raises(ChecksumError):
            scene_from_bytes(bytes(data))

    def test_truncated(self, rng):
        data = scene_to_bytes(random_scene(rng, 3, dtype=np.float32))
        with pytest.raises(FormatError):
            scene_from_bytes(data[:-9])

    def test_shape_checked(self):
        with pytest.raises(ContractError):
            GaussianScene(np.zeros((3, 13)))

    def test_aabb(self):
        scene = GaussianScene.from_gaussians([make_gaussian([0, 1, 2]), make_gaussian([-1, 3, 0])])
        lo, hi = scene_aabb(scene)
        assert lo.tolist() == [-1, 1, 0] and hi.tolist() == [0, 3, 2]
        with pytest.raises(EmptyScene):
            scene_aabb(GaussianScene())


class TestKnn:
    def test_unit_square_k2(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
        assert np.allclose(knn_mean_distance(pts, 2), 1.0)

    def test_matches_brute_force(self, rng):
        pts = rng.normal(size=(60, 3))
        d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        np.fill_diagonal(d, np.inf)
        want = np.sort(d, axis=1)[:, :3].mean(axis=1)
        assert np.allclose(knn_mean_distance(pts, 3), want)

    def test_too_few(self):
        with pytest.raises(TooFewPoints):
            knn_mean_distance(np.zeros((3, 3)), 3)


def test_change_set_sorted_unique():
    cs = ChangeSet([5, 1, 5, 3])
    assert cs.indices.tolist() == [1, 3, 5]


def test_change_set_validate_spheres():
    scene = GaussianScene.from_gaussians([make_gaussian([0, 0, 0]), make_gaussian([5, 0, 0])])
    ChangeSet([0], [Sphere([0, 0, 0], 1.0)]).validate(scene)
    with pytest.raises(ContractError):
        ChangeSet([1], [Sphere([0, 0, 0], 1.0)]).validate(scene)


def test_inside_spheres_boundary_inclusive():
    s = [Sphere([0, 0, 0], 1.0)]
    assert inside_spheres(np.array([[1.0, 0, 0], [1.0001, 0, 0]]), s).tolist() == [True, False]


def test_sphere_radius_positive():
    with pytest.raises(ContractError):
        Sphere([0, 0, 0], 0.0)
