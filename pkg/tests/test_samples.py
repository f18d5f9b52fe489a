import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvvc.errors import FormatError, InsufficientDataError
from mvvc.geometry import MultiViewVolume, VoxelGridSpec, look_at
from mvvc.samples import (
    PATCH, SAMPLE_SHAPE, TEST, TRAIN, VALIDATION, BaselineMode, Dataset, SubVolumeSample,
    build_dataset, extract_points, extract_subvolume, normalize, normalize_batch,
    reshape_baseline, split_mosaic,
)
from mvvc.scene import LAND, WATER, SceneConfig, default_rig, generate_scene, make_label_polygons, points_in_polygon, render_views
from mvvc.sweep import DepthMap


def _dummy_cams(k=8):
    return [look_at((0.0, 0.0, 100.0 + i), (0.0, 0.0, 0.0), 100, 100, 8, 8) for i in range(k)]


def coded_volume():
    """Dense volume whose value encodes (i, j, k, view)."""
    spec = VoxelGridSpec((0.0, 0.0, 0.0), 0.25, 30, 30, 6)
    i, j, k, v = np.meshgrid(np.arange(30), np.arange(30), np.arange(6), np.arange(8), indexing="ij")
    samples = i * 1e4 + j * 1e2 + k + v * 1e-2
    return MultiViewVolume(spec, _dummy_cams(), [np.zeros((8, 8))] * 8, samples=samples,
                           valid=np.ones(samples.shape, dtype=bool))


def test_channel_layout_view_major():
    vol = coded_volume()
    ci, cj, ck = 12, 15, 2
    point = vol.spec.centers(np.array([ci, cj, ck]))
    values, valid = extract_points(point[None], vol)
    assert values.shape == (1, *SAMPLE_SHAPE)
    assert valid.all()
    for x in (0, 6, 12):
        for y in (0, 5, 12):
            for v in range(8):
                for l in range(2):
                    expect = (ci + x - 6) * 1e4 + (cj + y - 6) * 1e2 + (ck + l) + v * 1e-2
                    assert values[0, x, y, 2 * v + l] == pytest.approx(expect)


def test_border_validity_exactly_out_of_grid():
    vol = coded_volume()
    point = vol.spec.centers(np.array([2, 28, 5]))
    values, valid = extract_points(point[None], vol)
    xs = 2 + np.arange(PATCH) - 6
    ys = 28 + np.arange(PATCH) - 6
    inside_x = (xs >= 0) & (xs < 30)
    inside_y = (ys >= 0) & (ys < 30)
    for l, inside_z in enumerate([True, False]):  # slice 1 sits above the top layer
        expect = inside_x[:, None] & inside_y[None, :] & inside_z
        for v in range(8):
            np.testing.assert_array_equal(valid[0, :, :, 2 * v + l], expect)
    assert np.all(values[~valid] == 0)


def test_constant_volume_gives_constant_raw_sample():
    spec = VoxelGridSpec((0.0, 0.0, 0.0), 0.25, 20, 20, 4)
    samples = np.full((20, 20, 4, 8), 0.5)
    vol = MultiViewVolume(spec, _dummy_cams(), [np.zeros((8, 8))] * 8, samples=samples,
                          valid=np.ones(samples.shape, dtype=bool))
    values, valid = extract_points(spec.centers(np.array([[10, 10, 1]])), vol)
    assert np.all(values == 0.5) and values.size == 2704
    out, usable = normalize_batch(values, valid)
    assert usable[0] and np.all(out == 0)


def test_extract_subvolume_errors():
    vol = coded_volume()
    cam = look_at((3.75, 3.75, 50.0), (3.75, 3.75, 0.0), 50, 50, 9, 9)
    depth = np.full((9, 9), 49.5)
    valid = np.ones((9, 9), dtype=bool)
    valid[0, 0] = False
    dm = DepthMap(cam, np.array([0.5]), np.zeros((9, 9), int), depth, valid, ident=3)
    s = extract_subvolume(dm, (4, 4), vol)
    assert s.tensor.shape == SAMPLE_SHAPE and s.meta["depthmap"] == 3
    with pytest.raises(ValueError):
        extract_subvolume(dm, (0, 0), vol)
    with pytest.raises(IndexError):
        extract_subvolume(dm, (9, 0), vol)


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10), st.floats(-5, 5))
def test_normalize_properties(seed, a, b):
    r = np.random.default_rng(seed)
    t = r.random(SAMPLE_SHAPE)
    valid = r.random(SAMPLE_SHAPE) > 0.3
    s = normalize(SubVolumeSample(t, valid))
    vals = s.tensor[valid]
    assert abs(vals.mean()) < 1e-9
    assert abs(vals.std() - 1) < 1e-9
    assert np.all(s.tensor[~valid] == 0)
    # affine invariance and idempotence
    s2 = normalize(SubVolumeSample(a * t + b, valid))
    np.testing.assert_allclose(s2.tensor, s.tensor, atol=1e-9)
    np.testing.assert_allclose(normalize(s).tensor, s.tensor, atol=1e-9)


def test_normalize_needs_two_valid_entries():
    valid = np.zeros(SAMPLE_SHAPE, dtype=bool)
    valid[0, 0, 0] = True
    with pytest.raises(ValueError):
        normalize(SubVolumeSample(np.ones(SAMPLE_SHAPE), valid))


def test_mosaic_layout_and_roundtrip(rng):
    x = rng.random(SAMPLE_SHAPE)
    m = reshape_baseline(x, "mosaic")
    assert m.shape == (52, 52)
    np.testing.assert_array_equal(m[:13, :13], x[:, :, 0])
    np.testing.assert_array_equal(m[13:26, 39:52], x[:, :, 7])  # tile (1, 3)
    np.testing.assert_array_equal(split_mosaic(m), x)


def test_unrelated_and_full(rng):
    x = rng.random((3, *SAMPLE_SHAPE))
    u = reshape_baseline(x, BaselineMode.UNRELATED_PATCHES)
    assert u.shape == (3, 16, 13, 13)
    np.testing.assert_array_equal(u[1, 5], x[1, :, :, 5])
    assert reshape_baseline(x, "full") is x or np.array_equal(reshape_baseline(x, "full"), x)


# -- datasets -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_world():
    scene = generate_scene(SceneConfig.preset("lake", extent=48.0, cell_size=0.25), 8)
    cams = default_rig(scene, 8, image_size=96, gsd=0.5)
    views = render_views(scene, cams, seed=8)
    dms = []
    for i in (0, 3):
        v = views[i]
        ok = np.isfinite(v.gt_depth)
        dms.append(DepthMap(v.camera, np.array([0.0]), np.zeros(ok.shape, int), v.gt_depth, ok, ident=i))
    x0, y0, x1, y1 = scene.extent_xy
    spec = VoxelGridSpec((x0, y0, scene.z_range()[0] - 2), 0.25, 192, 192, 20)
    vol = MultiViewVolume(spec, cams, [v.image for v in views])
    polys = make_label_polygons(scene, 3, seed=8)
    return scene, dms, vol, polys


def test_build_dataset_counts_and_purity(small_world):
    scene, dms, vol, polys = small_world
    ds = build_dataset(polys, dms, vol, 200, seed=1, val_fraction=0.1)
    assert ds.class_histogram() == {0: 200, 1: 200}
    assert ds.split_counts() == {"train": 360, "validation": 40, "test": 0}
    for label, cls in enumerate((LAND, WATER)):
        pts = ds.points[ds.y == label]
        inside = np.zeros(len(pts), dtype=bool)
        for p, c in polys:
            if c == cls:
                inside |= points_in_polygon(pts[:, :2], p)
        assert inside.all()
    # stratified: both classes equal within each split
    for split in (TRAIN, VALIDATION):
        assert np.sum((ds.split == split) & (ds.y == 0)) == np.sum((ds.split == split) & (ds.y == 1))


def test_build_dataset_deterministic(small_world):
    scene, dms, vol, polys = small_world
    a = build_dataset(polys, dms, vol, 50, seed=4, test_fraction=0.2)
    b = build_dataset(polys, dms, vol, 50, seed=4, test_fraction=0.2)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.split, b.split)
    assert a.split_counts()["test"] == 20
    c = build_dataset(polys, dms, vol, 50, seed=5, test_fraction=0.2)
    assert not np.array_equal(a.source, c.source)


def test_build_dataset_insufficient(small_world):
    scene, dms, vol, polys = small_world
    with pytest.raises(InsufficientDataError, match="requested"):
        build_dataset(polys, dms, vol, 10**7, seed=0)


def test_dataset_file_roundtrip(tmp_path, rng):
    n = 5
    ds = Dataset(rng.normal(size=(n, *SAMPLE_SHAPE)).astype(np.float32), rng.random((n, *SAMPLE_SHAPE)) > 0.2,
                 np.array([0, 1, 1, 0, 1]), np.array([TRAIN, TRAIN, VALIDATION, TEST, TRAIN]))
    ds.save(tmp_path / "d.bin")
    raw = (tmp_path / "d.bin").read_bytes()
    assert raw[:8] == b"MVVC-DS1"
    assert int.from_bytes(raw[8:12], "little") == n
    # 2 label/split bytes + 2704 floats + 338 bitmap bytes per sample
    assert len(raw) == 24 + n * (2 + 4 * 2704 + 338)
    back = Dataset.load(tmp_path / "d.bin")
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.valid, ds.valid)
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.split, ds.split)


def test_dataset_corrupt_magic_names_file(tmp_path):
    p = tmp_path / "dataset.bin"
    p.write_bytes(b"XXXX-DS1" + b"\0" * 16)
    with pytest.raises(FormatError, match="dataset.bin"):
        Dataset.load(p)


def test_dataset_truncated(tmp_path, rng):
    ds = Dataset(np.zeros((2, *SAMPLE_SHAPE), np.float32), np.ones((2, *SAMPLE_SHAPE), bool),
                 np.array([0, 1]), np.array([0, 0]))
    ds.save(tmp_path / "d.bin")
    (tmp_path / "t.bin").write_bytes((tmp_path / "d.bin").read_bytes()[:-10])
    with pytest.raises(FormatError, match="payload"):
        Dataset.load(tmp_path / "t.bin")


def test_permute_views_moves_both_slices(rng):
    x = rng.random((1, *SAMPLE_SHAPE))
    ds = Dataset(x, np.ones(x.shape, bool), np.array([0]), np.array([0]))
    order = [7, 6, 5, 4, 3, 2, 1, 0]
    p = ds.permute_views(order)
    np.testing.assert_array_equal(p.X[..., 0], x[..., 14])
    np.testing.assert_array_equal(p.X[..., 1], x[..., 15])
