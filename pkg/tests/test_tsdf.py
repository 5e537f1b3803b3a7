import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import axis_camera
from voxsem.errors import EmptySceneError, ShapeError
from voxsem.grid import GridSpec, Visibility, voxel_to_world, world_to_voxel
from voxsem.tsdf import classify_visibility, surface_from_depth, tsdf_encode, tsdf_from_visibility, tsdf_oracle

F, S, O, X = Visibility.FREE, Visibility.SURFACE, Visibility.OCCLUDED, Visibility.OUTSIDE


def test_surface_all_zero_depth(toy_grid):
    cam = axis_camera((0.8, 0.8, -1.0))
    assert not surface_from_depth(np.zeros((8, 8)), cam, toy_grid).any()


def test_surface_single_principal_pixel():
    grid = GridSpec((16, 16, 16), 0.1)
    # 9x9 image so pixel (4, 4) is the principal point; camera at grid center
    cam = axis_camera((0.8, 0.8, 0.8), size=(9, 9))
    depth = np.zeros((9, 9))
    depth[4, 4] = 0.43
    mask = surface_from_depth(depth, cam, grid)
    assert mask.sum() == 1
    # (0.8, 0.8, 0.8 + 0.43) -> floor(12.3) = 12 along z
    assert mask[8, 8, 12]


def test_surface_adjacent_pixels_same_voxel():
    grid = GridSpec((16, 16, 16), 0.1)
    cam = axis_camera((0.8, 0.8, 0.8), size=(9, 9), f=100.0)
    depth = np.zeros((9, 9))
    depth[4, 4] = depth[4, 5] = 0.43
    assert surface_from_depth(depth, cam, grid).sum() == 1


def test_surface_shape_mismatch(toy_grid):
    with pytest.raises(ShapeError):
        surface_from_depth(np.zeros((5, 5)), axis_camera((0, 0, -1)), toy_grid)


def _column_setup(tau=0.3):
    """1x1x16 column of voxels on the optical axis, wall observed at z = 0.85."""
    grid = GridSpec((1, 1, 16), 0.1, (-0.05, -0.05, 0.0))
    cam = axis_camera((0.0, 0.0, -0.5), size=(1, 1), f=1.0)
    depth = np.full((1, 1), 1.35)
    return grid, cam, depth, classify_visibility(depth, cam, grid, tau)[0, 0]


def test_visibility_bands():
    _, _, _, vis = _column_setup(0.3)
    # voxel k center at z = 0.05 + 0.1 k, camera depth 0.55 + 0.1 k; surface 1.35 +- 0.15
    assert list(vis[:6]) == [F] * 6
    assert list(vis[6:11]) == [F, S, S, S, O]
    assert list(vis[11:]) == [O] * 5


def test_visibility_outside_cases():
    grid = GridSpec((4, 4, 4), 0.1)
    cam = axis_camera((0.2, 0.2, 0.25), size=(4, 4), f=2.0)
    depth = np.ones((4, 4))
    depth[0, 0] = 0.0
    vis = classify_visibility(depth, cam, grid, 0.24)
    # voxels behind the camera plane
    assert np.all(vis[:, :, :2] == X)
    # everything is classified into one of the four codes
    assert set(np.unique(vis)) <= {0, 1, 2, 3}


def test_tsdf_values_hand_example():
    grid = GridSpec((16, 16, 16), 0.1)
    vis = np.full(grid.dims, F, np.uint8)
    vis[8, 8, 8] = S
    vis[8, 8, 10] = O
    vis[0, 0, 0] = X
    t = tsdf_from_visibility(vis, grid, 0.3)
    assert t.values[8, 8, 8] == pytest.approx(1.0)
    assert t.values[8, 8, 10] == pytest.approx(-1.0 / 3.0)
    assert t.values[8, 8, 11] == pytest.approx(0.0)
    assert t.values[0, 0, 0] == 0.0
    assert t.values[8, 9, 9] == pytest.approx(1 - np.sqrt(2) * 0.1 / 0.3)


def test_tsdf_free_at_truncation_is_zero():
    grid = GridSpec((1, 1, 8), 0.1)
    vis = np.full(grid.dims, F, np.uint8)
    vis[0, 0, 0] = S
    t = tsdf_from_visibility(vis, grid, 0.3)
    assert t.values[0, 0, 3] == pytest.approx(0.0, abs=1e-12)
    assert t.values[0, 0, 2] > 0


def test_tsdf_no_surface_raises():
    grid = GridSpec((4, 4, 4), 0.1)
    with pytest.raises(EmptySceneError):
        tsdf_from_visibility(np.zeros(grid.dims, np.uint8), grid, 0.24)
    cam = axis_camera((0.2, 0.2, -1.0), size=(4, 4))
    with pytest.raises(EmptySceneError):
        tsdf_encode(np.zeros((4, 4)), cam, grid)


def test_oracle_single_and_two_sources():
    grid = GridSpec((6, 6, 6), 0.1)
    vis = np.zeros(grid.dims, np.uint8)
    surf = np.zeros(grid.dims, bool)
    surf[1, 2, 3] = True
    t = tsdf_oracle(surf, vis, grid, 10.0)
    d = (1 - t.values) * 10.0
    idx = np.indices(grid.dims).transpose(1, 2, 3, 0)
    d1 = np.linalg.norm((idx - [1, 2, 3]) * 0.1, axis=-1)
    assert np.allclose(d, d1)
    surf[5, 0, 0] = True
    d2 = np.linalg.norm((idx - [5, 0, 0]) * 0.1, axis=-1)
    t = tsdf_oracle(surf, vis, grid, 10.0)
    assert np.allclose((1 - t.values) * 10.0, np.minimum(d1, d2))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([0.1, 0.24, 0.35]))
def test_encode_matches_oracle_random_visibility(seed, tau):
    rng = np.random.default_rng(seed)
    dims = tuple(rng.integers(2, 9, size=3))
    grid = GridSpec(dims, 0.08)
    vis = rng.integers(0, 4, size=dims).astype(np.uint8)
    vis.flat[0] = S
    fast = tsdf_from_visibility(vis, grid, tau)
    slow = tsdf_oracle(vis == S, vis, grid, tau)
    assert np.max(np.abs(fast.values - slow.values)) < 1e-6


def test_encode_matches_oracle_on_scene(scene):
    t = scene.tsdf
    slow = tsdf_oracle(t.visibility == S, t.visibility, t.spec, t.truncation)
    assert np.max(np.abs(t.values - slow.values)) < 1e-6


def test_value_invariants(scenes):
    for s in scenes:
        t = s.tsdf
        v, vis = t.values, t.visibility
        assert np.all(np.abs(v) <= 1)
        assert np.all(v[vis == F] >= 0) and np.all(v[vis == O] <= 0)
        assert np.all(v[vis == X] == 0)
        assert np.all(np.abs(v[vis == S]) >= 1 - t.spec.voxel_size / t.truncation)


def test_monotone_in_distance():
    grid = GridSpec((1, 1, 10), 0.1)
    vis = np.full(grid.dims, O, np.uint8)
    vis[0, 0, 0] = S
    v = tsdf_from_visibility(vis, grid, 0.5).values[0, 0, 1:]
    assert np.all(np.diff(v) >= 0)
