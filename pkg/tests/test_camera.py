import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ropetp import camera as C
from ropetp.camera import DegenerateFitError, WeakPerspectiveCam
from ropetp.hierarchy import PART_COUNTS, default_partition

from oracles import brute_force_mask


def test_project_identity_and_depth_independence(rng):
    X = rng.normal(size=(7, 3))
    cam = WeakPerspectiveCam(1.0, 0.0, 0.0)
    np.testing.assert_array_equal(C.project(X, cam), X[:, :2])
    Y = X.copy()
    Y[:, 2] += 5.0
    np.testing.assert_array_equal(C.project(Y, cam), C.project(X, cam))


def test_project_worked_example():
    out = C.project(np.array([[0.5, 0.5, 3.0]]), WeakPerspectiveCam(2.0, 0.1, -0.2))
    np.testing.assert_allclose(out, [[1.1, 0.8]], atol=1e-15)


def test_camera_rejects_non_positive_scale():
    with pytest.raises(ValueError, match="positive"):
        WeakPerspectiveCam(0.0, 0, 0)


def test_fit_two_point_hand_solution():
    # u = s x + t: (0 -> 0.3), (1 -> 0.8) gives s = 0.5, t = 0.3
    X = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 2.0]])
    uv = np.array([[0.3, -0.1], [0.8, -0.1]])
    cam = C.fit_cam(uv, X)
    assert (cam.s, cam.tx, cam.ty) == pytest.approx((0.5, 0.3, -0.1), abs=1e-15)


def test_fit_coincident_points_rejected():
    X = np.tile([0.2, 0.3, 0.0], (5, 1))
    with pytest.raises(DegenerateFitError, match="spread"):
        C.fit_cam(np.zeros((5, 2)), X)


def test_fit_mirrored_rejected(rng):
    X = rng.normal(size=(6, 3))
    with pytest.raises(DegenerateFitError, match="not positive"):
        C.fit_cam(-X[:, :2], X)


@given(arrays(np.float64, (6, 3), elements=st.floats(-2, 2)),
       st.floats(0.05, 5), st.floats(-1, 1), st.floats(-1, 1))
def test_fit_inverts_project(X, s, tx, ty):
    assume(((X[:, :2] - X[:, :2].mean(0)) ** 2).sum() > 1e-3)
    cam = WeakPerspectiveCam(s, tx, ty)
    back = C.fit_cam(C.project(X, cam), X)
    np.testing.assert_allclose(back.as_array(), cam.as_array(), atol=1e-10)


# ---------------------------------------------------------------- rasterization

def test_outside_points_give_background():
    uv = np.array([[-0.1, 0.5], [1.0, 0.5], [0.5, 1.2]])
    assert not C.rasterize(uv, np.ones(3), np.ones(3, int), 4, 4).any()


def test_nearest_depth_wins():
    uv = np.array([[0.1, 0.1], [0.1, 0.1]])
    assert C.rasterize(uv, np.array([2.0, 1.0]), np.array([5, 7]), 2, 2)[0, 0] == 7


def test_pixel_intervals_are_half_open():
    uv = np.array([[0.5, 0.25]])
    m = C.rasterize(uv, np.zeros(1), np.array([3]), 4, 2)
    assert m[1, 1] == 3 and m.sum() == 3


@given(st.integers(0, 10**6))
def test_rasterize_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, H, W = 40, 5, 6
    uv = rng.uniform(-0.2, 1.2, size=(n, 2))
    depth = rng.integers(0, 4, n).astype(float)  # repeated depths exercise ties
    labels = rng.integers(1, 9, n)
    np.testing.assert_array_equal(C.rasterize(uv, depth, labels, H, W), brute_force_mask(uv, depth, labels, H, W))


@given(st.integers(0, 10**6))
def test_rasterize_independent_of_input_order(seed):
    rng = np.random.default_rng(seed)
    n = 30
    uv = rng.uniform(0, 1, size=(n, 2))
    depth = rng.integers(0, 3, n).astype(float)
    # equal depth and equal pixel means equal label, so order cannot matter
    labels = (np.floor(uv[:, 0] * 4) * 4 + np.floor(uv[:, 1] * 4) + 10 * depth).astype(int) + 1
    perm = rng.permutation(n)
    a = C.rasterize(uv, depth, labels, 4, 4)
    b = C.rasterize(uv[perm], depth[perm], labels[perm], 4, 4)
    np.testing.assert_array_equal(a, b)


def test_tie_goes_to_lower_index():
    uv = np.array([[0.3, 0.3], [0.3, 0.3]])
    assert C.rasterize(uv, np.ones(2), np.array([4, 9]), 2, 2)[0, 0] == 4


def test_part_masks_respect_level_counts(rng):
    table = default_partition()
    n = 300
    uv, depth, vj = rng.uniform(0, 1, (n, 2)), rng.normal(size=n), rng.integers(0, 24, n)
    masks = C.rasterize_part_masks(uv, depth, vj, 8, 8, table)
    for level, m in masks.items():
        assert m.max() <= PART_COUNTS[level] and m.min() >= 0
    # coarser masks are the finer labels pushed through the part map
    fine = masks["Indep"]
    coarse = np.where(fine > 0, table["FulCo"][np.maximum(fine - 1, 0)] + 1, 0)
    np.testing.assert_array_equal(masks["FulCo"], coarse)


# ---------------------------------------------------------------- serialization

@pytest.mark.parametrize("suffix", [".png", ".json"])
def test_mask_round_trip_bit_exact(tmp_path, rng, suffix):
    m = rng.integers(0, 25, size=(9, 7))
    C.save_mask(m, tmp_path / f"m{suffix}")
    back = C.load_mask(tmp_path / f"m{suffix}")
    assert back.dtype == np.int64
    np.testing.assert_array_equal(back, m)


def test_float_grid_json_round_trip(tmp_path, rng):
    g = rng.normal(size=(3, 4))
    C.save_mask(g, tmp_path / "g.json")
    assert C.load_mask(tmp_path / "g.json").tobytes() == g.tobytes()


def test_png_refuses_float_grids(tmp_path):
    with pytest.raises(ValueError, match="integer"):
        C.save_mask(np.zeros((2, 2)), tmp_path / "g.png")
