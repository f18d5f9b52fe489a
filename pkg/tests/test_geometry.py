import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvvc.errors import FormatError
from mvvc.geometry import (
    MultiViewVolume, PinholeCamera, VoxelGridSpec, bilinear, fill_multiview_volume, load_cameras,
    look_at, project, project_points, sample_image, save_cameras, select_views,
)


def nadir_camera(center=(0.0, 0.0, 100.0), f=200.0, size=101):
    return look_at(center, (center[0], center[1], 0.0), f, f, size, size)


def test_nadir_projection_hand_computed():
    cam = nadir_camera()
    # principal point for an odd 101-pixel image is pixel 50
    u, v, d = project(cam, (0.0, 0.0, 0.0))
    assert (u, v, d) == pytest.approx((50.0, 50.0, 100.0))
    # 10 m east at 100 m range and f = 200 px -> 20 px to the right
    u, v, d = project(cam, (10.0, 0.0, 0.0))
    assert u == pytest.approx(70.0) and v == pytest.approx(50.0)
    # north is up: +y moves toward row 0
    u, v, d = project(cam, (0.0, 10.0, 0.0))
    assert v == pytest.approx(30.0)


def test_behind_camera_or_off_image():
    cam = nadir_camera()
    assert project(cam, (0.0, 0.0, 150.0)) is None
    assert project(cam, (1000.0, 0.0, 0.0)) is None


def test_unproject_inverts_project(rng):
    cam = look_at((30.0, -20.0, 120.0), (0.0, 0.0, 5.0), 300.0, 310.0, 256, 200)
    pts = rng.uniform([-10, -10, 0], [10, 10, 10], size=(50, 3))
    u, v, d, ok = project_points(cam, pts)
    assert ok.all()
    np.testing.assert_allclose(cam.unproject(u, v, d), pts, atol=1e-9)


def test_look_at_rotation_orthonormal_and_aimed():
    cam = look_at((50.0, 40.0, 150.0), (32.0, 32.0, 10.0), 500.0, 500.0, 256, 256)
    np.testing.assert_allclose(cam.rotation @ cam.rotation.T, np.eye(3), atol=1e-12)
    u, v, _ = project(cam, (32.0, 32.0, 10.0))
    assert (u, v) == pytest.approx((127.5, 127.5))


def test_camera_validation():
    with pytest.raises(ValueError):
        PinholeCamera(0.0, 1.0, 0, 0, np.eye(3), np.zeros(3), 10, 10)
    with pytest.raises(ValueError):
        PinholeCamera(1.0, 1.0, 0, 0, 2 * np.eye(3), np.zeros(3), 10, 10)


def test_bilinear_exact_on_affine_images():
    yy, xx = np.mgrid[0:8, 0:9].astype(float)
    img = 0.3 * xx - 0.7 * yy + 2.0
    u = np.array([0.0, 3.25, 7.9, 8.0])
    v = np.array([0.0, 1.5, 6.1, 7.0])
    np.testing.assert_allclose(bilinear(img, u, v), 0.3 * u - 0.7 * v + 2.0, atol=1e-12)


def test_bilinear_integer_coordinates_hit_pixels(rng):
    img = rng.random((5, 6))
    np.testing.assert_array_equal(bilinear(img, np.array([2.0]), np.array([3.0])), img[3, 2])


def test_sample_image_outside_raises():
    with pytest.raises(ValueError):
        sample_image(np.zeros((4, 4)), 3.5, 0.0)


def test_scaled_camera_matches_box_downsampling():
    cam = nadir_camera(size=100)
    half = cam.scaled(2)
    p = np.array([3.0, -7.0, 0.0])
    u, v, _ = project(cam, p)
    u2, v2, _ = project(half, p)
    # pixel centers of a 2x box filter: full-res u = 2 u' + 0.5
    assert 2 * u2 + 0.5 == pytest.approx(u)
    assert 2 * v2 + 0.5 == pytest.approx(v)


def test_select_views_prefers_nadir():
    cams = [look_at((np.tan(np.deg2rad(a)) * 100, 0, 100), (0, 0, 0), 100, 100, 32, 32)
            for a in (30, 5, 20, 0, 25, 10, 15, 35, 40)]
    assert select_views(cams, 3) == [1, 3, 5]


def test_camera_json_roundtrip(tmp_path):
    cams = [nadir_camera(), look_at((5, 5, 90), (0, 0, 0), 120, 130, 64, 48)]
    save_cameras(tmp_path / "poses.json", cams)
    back = load_cameras(tmp_path / "poses.json")
    for a, b in zip(cams, back):
        np.testing.assert_array_equal(a.rotation, b.rotation)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height)


def test_camera_json_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(FormatError, match="bad.json"):
        load_cameras(tmp_path / "bad.json")
    (tmp_path / "obj.json").write_text(json.dumps({"fx": 1}))
    with pytest.raises(FormatError):
        load_cameras(tmp_path / "obj.json")
    (tmp_path / "rec.json").write_text(json.dumps([{"fx": 1}]))
    with pytest.raises(FormatError):
        load_cameras(tmp_path / "rec.json")


def _two_view_setup():
    cams = [nadir_camera((0.0, 0.0, 100.0), size=64), nadir_camera((2.0, 0.0, 100.0), size=64)]
    yy, xx = np.mgrid[0:64, 0:64].astype(float)
    imgs = [0.01 * xx + 0.02 * yy, 0.5 + 0.0 * xx]
    spec = VoxelGridSpec((-4.0, -4.0, -1.0), 0.5, 16, 16, 4)
    return cams, imgs, spec


def test_volume_gather_matches_direct_projection():
    cams, imgs, spec = _two_view_setup()
    vol = MultiViewVolume(spec, cams, imgs)
    ijk = np.array([[3, 4, 1], [15, 0, 3]])
    s, ok = vol.gather(ijk)
    assert ok.all()
    for n, cell in enumerate(ijk):
        c = spec.centers(cell)
        for v in range(2):
            u, vv, _ = project(cams[v], c)
            assert s[n, v] == pytest.approx(sample_image(imgs[v], u, vv))


def test_volume_out_of_grid_cells_invalid():
    cams, imgs, spec = _two_view_setup()
    vol = MultiViewVolume(spec, cams, imgs)
    s, ok = vol.gather(np.array([[-1, 0, 0], [0, 16, 0], [0, 0, 4], [2, 2, 2]]))
    assert not ok[:3].any() and ok[3].all()
    assert np.all(s[:3] == 0)


def test_dense_and_lazy_volumes_agree():
    cams, imgs, spec = _two_view_setup()
    lazy = MultiViewVolume(spec, cams, imgs)
    dense = fill_multiview_volume(spec, cams, imgs)
    ijk = np.stack(np.meshgrid(np.arange(-1, 17), np.arange(3), np.arange(4), indexing="ij"), -1)
    a, oka = lazy.gather(ijk)
    b, okb = dense.gather(ijk)
    np.testing.assert_array_equal(oka, okb)
    np.testing.assert_allclose(a, b, atol=0)


def test_volume_needs_two_views():
    cams, imgs, spec = _two_view_setup()
    with pytest.raises(ValueError, match="k >= 2"):
        MultiViewVolume(spec, cams[:1], imgs[:1])


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0, 30))
def test_project_unproject_roundtrip_property(x, y, z):
    cam = look_at((15.0, 10.0, 140.0), (0.0, 0.0, 0.0), 400.0, 400.0, 512, 512)
    u, v, d, ok = project_points(cam, np.array([[x, y, z]]))
    if ok[0]:
        np.testing.assert_allclose(cam.unproject(u, v, d)[0], [x, y, z], atol=1e-8)
