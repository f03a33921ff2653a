from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from conftest import cube_mask, random_mask, uniform_grid
from vcs_phantom.core.errors import DataError, GridMismatchError, NonFiniteError
from vcs_phantom.shapes.voxel import (
    BinaryMask,
    ScalarGrid,
    SdfConfig,
    compose_context,
    occupancy,
    sdf_from_mask,
    signed_distance,
    soft_volume_ml,
    surface_points,
    threshold,
    volume_ml,
)


def _brute_force_sdf(bits: np.ndarray) -> np.ndarray:
    """Distancias entre todos os pares de centros de voxel."""
    idx = np.argwhere(np.ones(bits.shape, dtype=bool)).astype(np.float64)
    flat = bits.reshape(-1)
    fg, bg = idx[flat], idx[~flat]
    out = np.empty(flat.size)
    for i, p in enumerate(idx):
        other = bg if flat[i] else fg
        d = np.sqrt(((other - p) ** 2).sum(axis=1)).min()
        out[i] = d if flat[i] else -d
    return out.reshape(bits.shape)


def test_single_voxel_sdf_values():
    mask = cube_mask((5, 5, 5), (2, 2, 2), 1)
    sdf = sdf_from_mask(mask, SdfConfig(truncation=10.0))
    assert sdf.values[2, 2, 2] == 1.0
    assert sdf.values[2, 2, 3] == -1.0
    assert sdf.values[0, 0, 0] == pytest.approx(-math.sqrt(12), abs=1e-12)


def test_solid_cube_center_is_two():
    sdf = sdf_from_mask(cube_mask((9, 9, 9), (3, 3, 3), 3))
    assert sdf.values[4, 4, 4] == pytest.approx(2.0)


def test_uniform_masks_fill_with_tau():
    cfg = SdfConfig(truncation=10.0)
    empty = sdf_from_mask(BinaryMask.empty((4, 4, 4), 1.0), cfg)
    full = sdf_from_mask(BinaryMask(np.ones((4, 4, 4), dtype=bool), 1.0), cfg)
    assert np.all(empty.values == -10.0)
    assert np.all(full.values == 10.0)


@pytest.mark.parametrize("dims", [(4, 4, 4), (5, 3, 6), (8, 8, 8)])
def test_sdf_matches_brute_force(rng, dims):
    for p in (0.1, 0.5, 0.8):
        mask = random_mask(rng, dims, p)
        if mask.bits.all() or not mask.bits.any():
            continue
        np.testing.assert_allclose(signed_distance(mask), _brute_force_sdf(mask.bits), atol=1e-9)


def test_sdf_matches_brute_force_on_200_random_masks(rng):
    checked = 0
    while checked < 200:
        dims = tuple(int(d) for d in rng.integers(2, 9, size=3))
        mask = random_mask(rng, dims, float(rng.uniform(0.05, 0.95)))
        if mask.bits.all() or not mask.bits.any():
            continue
        np.testing.assert_allclose(signed_distance(mask), _brute_force_sdf(mask.bits), rtol=0, atol=1e-9)
        checked += 1


def test_threshold_round_trip(rng):
    for _ in range(10):
        mask = random_mask(rng, (7, 6, 5), rng.uniform(0.1, 0.9))
        if mask.bits.all() or not mask.bits.any():
            continue
        assert threshold(sdf_from_mask(mask)) == mask


def test_threshold_of_uniform_grids():
    assert threshold(uniform_grid((3, 3, 3), -10.0)).count == 0
    assert threshold(uniform_grid((3, 3, 3), 10.0)).count == 27


def test_occupancy_values():
    cfg = SdfConfig(sharpness=10.0)
    vals = np.array([0.0, 1.0, -0.2]).reshape(3, 1, 1)
    occ = occupancy(ScalarGrid(vals, 1.0), cfg).values.ravel()
    assert occ[0] == 0.5
    assert occ[1] == pytest.approx(0.9999546, abs=1e-7)
    assert occ[2] == pytest.approx(0.1192029, abs=1e-7)


def test_occupancy_monotone_and_symmetric(rng):
    vals = np.sort(rng.uniform(-1.5, 1.5, size=50)).reshape(50, 1, 1)
    occ = occupancy(ScalarGrid(vals, 1.0)).values.ravel()
    neg = occupancy(ScalarGrid(-vals, 1.0)).values.ravel()
    assert np.all(np.diff(occ) > 0)
    np.testing.assert_allclose(neg, 1.0 - occ, atol=1e-12)


def test_compose_context_empty_and_identity():
    cfg = SdfConfig(truncation=10.0)
    empty = compose_context([], cfg, dims=(4, 4, 4), spacing=2.0)
    assert np.all(empty.values == -10.0)
    assert empty.spacing == 2.0

    s = sdf_from_mask(cube_mask((6, 6, 6), (1, 1, 1), 2), cfg)
    assert compose_context([s, uniform_grid((6, 6, 6), -10.0)], cfg) == s


def test_compose_context_is_union():
    cfg = SdfConfig()
    a = cube_mask((7, 7, 7), (1, 1, 1), 1)
    b = cube_mask((7, 7, 7), (5, 4, 2), 1)
    ctx = compose_context([sdf_from_mask(a, cfg), sdf_from_mask(b, cfg)], cfg)
    assert threshold(ctx) == a.union(b)


def test_compose_context_union_random(rng):
    for _ in range(5):
        a = random_mask(rng, (6, 6, 6), 0.2)
        b = random_mask(rng, (6, 6, 6), 0.2)
        ctx = compose_context([sdf_from_mask(a), sdf_from_mask(b)])
        assert threshold(ctx) == a.union(b)


def test_compose_context_mismatch_names_index():
    a = uniform_grid((4, 4, 4), 0.0)
    b = uniform_grid((4, 4, 5), 0.0)
    with pytest.raises(GridMismatchError, match="indice 2"):
        compose_context([a, a, b])


def test_volume_ml():
    assert volume_ml(BinaryMask.empty((3, 3, 3), 10.0)) == 0.0
    assert volume_ml(BinaryMask(np.ones((10, 10, 10), dtype=bool), 10.0)) == 1000.0
    assert volume_ml(cube_mask((3, 3, 3), (0, 0, 0), 1, spacing=1.0)) == pytest.approx(0.001)


def test_soft_volume_ml():
    assert soft_volume_ml(uniform_grid((10, 10, 10), 0.0, 10.0)) == 0.0
    assert soft_volume_ml(uniform_grid((10, 10, 10), 1.0, 10.0)) == pytest.approx(1000.0)
    assert soft_volume_ml(uniform_grid((10, 10, 10), 0.5, 10.0)) == pytest.approx(500.0)


def test_soft_volume_converges_to_hard_volume(rng):
    vals = rng.uniform(0.1, 3.0, size=(8, 8, 8)) * rng.choice([-1.0, 1.0], size=(8, 8, 8))
    sdf = ScalarGrid(vals, 5.0)
    soft = soft_volume_ml(occupancy(sdf, SdfConfig(sharpness=1e3)))
    hard = volume_ml(threshold(sdf))
    assert soft == pytest.approx(hard, rel=0.01)


def test_surface_points_single_voxel():
    pts = surface_points(cube_mask((5, 5, 5), (1, 2, 3), 1, spacing=2.0))
    np.testing.assert_array_equal(pts, [[2.0, 4.0, 6.0]])


def test_surface_points_cubes():
    assert surface_points(cube_mask((9, 9, 9), (3, 3, 3), 3)).shape == (26, 3)
    assert surface_points(cube_mask((9, 9, 9), (3, 3, 3), 2)).shape == (8, 3)


def test_surface_points_grid_border_counts_as_surface():
    full = BinaryMask(np.ones((3, 3, 3), dtype=bool), 1.0)
    assert surface_points(full).shape == (26, 3)


def test_surface_points_empty_rejected():
    with pytest.raises(DataError):
        surface_points(BinaryMask.empty((3, 3, 3), 1.0))


def test_grids_reject_bad_input():
    with pytest.raises(NonFiniteError):
        ScalarGrid(np.full((2, 2, 2), np.nan), 1.0)
    with pytest.raises(GridMismatchError):
        ScalarGrid(np.zeros((2, 2)), 1.0)
    with pytest.raises(GridMismatchError):
        BinaryMask(np.zeros((2, 2, 2), dtype=bool), 0.0)
    with pytest.raises(GridMismatchError):
        ScalarGrid.from_flat(np.zeros(7), (2, 2, 2), 1.0)


def test_flat_order_is_x_fastest():
    vals = np.zeros((2, 3, 4))
    for x, y, z in itertools.product(range(2), range(3), range(4)):
        vals[x, y, z] = x + 2 * y + 6 * z
    np.testing.assert_array_equal(ScalarGrid(vals, 1.0).flat(), np.arange(24.0))


def test_grids_are_immutable():
    g = uniform_grid((2, 2, 2), 1.0)
    with pytest.raises(ValueError):
        g.values[0, 0, 0] = 5.0


def test_mask_set_ops_check_compatibility():
    a = BinaryMask.empty((3, 3, 3), 1.0)
    b = BinaryMask.empty((3, 3, 3), 2.0)
    with pytest.raises(GridMismatchError):
        a.union(b)
