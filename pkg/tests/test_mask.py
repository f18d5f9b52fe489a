import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvvc.errors import FormatError, InsufficientDataError
from mvvc.mask import (
    MASK_LAND, MASK_WATER, UNOBSERVED, ClassifiedPointCloud, GridSpec2D, Mask2D, build_mask,
    fuse, fuse_product, logit, resample_classes, sigmoid, water_iou,
)
from mvvc.rasterio import read_pgm


def test_two_confident_votes():
    # 0.81 / (0.81 + 0.01), evaluated by hand
    assert fuse([0.9, 0.9]) == pytest.approx(0.987805, abs=1e-6)
    assert fuse_product([0.9, 0.9]) == pytest.approx(0.81 / 0.82, abs=1e-15)


def test_neutral_and_single():
    assert fuse([0.5, 0.5, 0.5]) == pytest.approx(0.5)
    assert fuse([0.73]) == pytest.approx(0.73)
    assert fuse([0.2, 0.8]) == pytest.approx(0.5)


def test_random_cases_agree_with_product(rng):
    for _ in range(2000):
        p = rng.uniform(0.01, 0.99, rng.integers(1, 21))
        assert abs(fuse(p) - fuse_product(p)) < 1e-9


def test_long_lists_do_not_underflow():
    p = np.full(2000, 0.9)
    assert fuse(p) == pytest.approx(1.0)
    q = np.concatenate([np.full(1000, 0.9), np.full(1000, 0.1)])
    assert fuse(q) == pytest.approx(0.5)


def test_extremes_are_clipped():
    assert 0.5 < fuse([1.0, 0.6]) <= 1.0
    assert fuse([0.0, 1.0]) == pytest.approx(0.5)


@pytest.mark.parametrize("bad", [[], [1.2], [-0.1], [np.nan]])
def test_fuse_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        fuse(bad)


@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=20), st.integers(0, 2**31 - 1))
def test_fuse_order_independent_and_symmetric(p, seed):
    perm = np.random.default_rng(seed).permutation(len(p))
    assert fuse(np.array(p)[perm]) == fuse(p)
    assert fuse(1 - np.array(p)) == pytest.approx(1 - fuse(p), abs=1e-12)


@given(st.floats(-15, 15))
def test_logit_sigmoid_inverse(z):
    assert logit(sigmoid(z), eps=1e-15) == pytest.approx(z, abs=1e-6)


# -- masks --------------------------------------------------------------------------


def _cloud(xy, z, p):
    xy = np.asarray(xy, dtype=float)
    return ClassifiedPointCloud(np.column_stack([xy, np.full(len(xy), z)]), np.asarray(p, float))


def test_build_mask_votes_per_column():
    grid = GridSpec2D((0.0, 0.0), 1.0, 3, 2)
    clouds = [
        _cloud([[0.5, 0.5], [0.4, 0.6]], 1.0, [0.9, 0.9]),      # cell (0,0): water
        _cloud([[1.5, 0.5], [1.5, 0.5]], 5.0, [0.6, 0.2]),      # cell (0,1): land
        _cloud([[2.5, 1.5]], -3.0, [0.5]),                      # cell (1,2): tie -> land
        _cloud([[9.0, 9.0]], 0.0, [0.9]),                       # outside
    ]
    m = build_mask(clouds, grid)
    assert m.prob[0, 0] == pytest.approx(0.987805, abs=1e-6)
    assert m.label[0, 0] == MASK_WATER
    assert m.label[0, 1] == MASK_LAND
    assert m.label[1, 2] == MASK_LAND
    assert m.label[1, 0] == UNOBSERVED and np.isnan(m.prob[1, 0])
    assert m.count[0, 0] == 2 and m.n_outside == 1


def test_vertical_position_does_not_matter(rng):
    grid = GridSpec2D((0.0, 0.0), 0.5, 8, 8)
    xy = rng.uniform(0, 4, (300, 2))
    p = rng.uniform(0.01, 0.99, 300)
    a = build_mask([_cloud(xy, 0.0, p)], grid)
    pts = np.column_stack([xy, rng.uniform(-50, 50, 300)])
    b = build_mask([ClassifiedPointCloud(pts, p)], grid)
    np.testing.assert_array_equal(a.prob, b.prob)


def test_mask_independent_of_point_order(rng):
    grid = GridSpec2D((0.0, 0.0), 0.5, 6, 6)
    xy = rng.uniform(0, 3, (400, 2))
    p = rng.uniform(0.01, 0.99, 400)
    a = build_mask([_cloud(xy, 0.0, p)], grid)
    perm = rng.permutation(400)
    b = build_mask([_cloud(xy[perm[:150]], 0.0, p[perm[:150]]), _cloud(xy[perm[150:]], 0.0, p[perm[150:]])], grid)
    np.testing.assert_array_equal(a.prob, b.prob)


def test_mask_all_outside_raises():
    with pytest.raises(InsufficientDataError):
        build_mask([_cloud([[10.0, 10.0]], 0.0, [0.5])], GridSpec2D((0, 0), 1.0, 2, 2))


def test_mask_matches_per_cell_product(rng):
    grid = GridSpec2D((0.0, 0.0), 1.0, 4, 4)
    xy = rng.uniform(0, 4, (200, 2))
    p = rng.uniform(0.05, 0.95, 200)
    m = build_mask([_cloud(xy, 0.0, p)], grid)
    ix, iy = np.floor(xy).astype(int).T
    for r in range(4):
        for c in range(4):
            sel = (iy == r) & (ix == c)
            if sel.any():
                assert m.prob[r, c] == pytest.approx(fuse_product(p[sel]), abs=1e-9)


def test_mask_files_roundtrip(tmp_path, rng):
    grid = GridSpec2D((10.0, -5.0), 0.5, 7, 5)
    m = build_mask([_cloud(rng.uniform([10, -5], [13.5, -2.5], (100, 2)), 0.0, rng.random(100))], grid)
    m.save(tmp_path / "mask")
    img = read_pgm(tmp_path / "mask.pgm")
    assert set(np.unique(img)) <= {0, 128, 255}
    assert np.all(img[m.label == UNOBSERVED] == 128)
    back = Mask2D.load(tmp_path / "mask")
    assert back.grid == grid
    np.testing.assert_array_equal(back.label, m.label)
    np.testing.assert_array_equal(back.count, m.count)
    np.testing.assert_allclose(back.prob, m.prob.astype(np.float32))


def test_mask_load_errors(tmp_path):
    with pytest.raises(FormatError):
        Mask2D.load(tmp_path / "missing")


def test_resample_classes_majority():
    fine = np.zeros((4, 4), dtype=np.uint8)
    fine[:2, :2] = 1
    fine[2, 2] = 1  # a quarter of the cell only
    grid = GridSpec2D((0.0, 0.0), 0.5, 2, 2)
    out = resample_classes(fine, 0.25, (0.0, 0.0), grid, 1)
    np.testing.assert_array_equal(out, [[True, False], [False, False]])


def test_water_iou_hand_computed():
    grid = GridSpec2D((0, 0), 1.0, 3, 1)
    m = Mask2D(grid, np.zeros((1, 3)), np.array([[MASK_WATER, MASK_WATER, UNOBSERVED]], np.int8),
               np.ones((1, 3), int))
    assert water_iou(m, np.array([[True, False, True]])) == pytest.approx(1 / 3)
    empty = Mask2D(grid, np.zeros((1, 3)), np.zeros((1, 3), np.int8), np.ones((1, 3), int))
    assert water_iou(empty, np.zeros((1, 3), bool)) == 1.0


def test_grid_covering():
    g = GridSpec2D.covering((0.0, 0.0, 64.0, 63.9), 0.5)
    assert g.shape == (128, 128)
    ix, iy = g.cell_of(63.99, 0.01)
    assert (int(ix), int(iy)) == (127, 0)
