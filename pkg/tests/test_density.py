import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from countshift.density import DensityMap, DensityMapConfig, adaptive_sigmas, build_density_map, count_of
from countshift.errors import InvalidArgumentError


def loop_oracle(points, size, cfg=DensityMapConfig()):
    """Direct per-cell evaluation of the renormalised truncated Gaussians."""
    s = cfg.output_scale
    side = size // s
    grid = [[0.0] * side for _ in range(side)]
    for i, (x, y) in enumerate(points):
        others = [math.dist((x, y), q) for j, q in enumerate(points) if j != i]
        if len(others) < cfg.k_neighbors:
            sigma = cfg.sigma_max
        else:
            nearest = sorted(others)[: cfg.k_neighbors]
            sigma = min(max(cfg.beta * sum(nearest) / len(nearest), cfg.sigma_min), cfg.sigma_max)
        sigma /= s
        radius = cfg.truncation_radius * sigma
        cx, cy = x / s, y / s
        cells = {}
        for r in range(side):
            for c in range(side):
                if abs(c + 0.5 - cx) <= radius and abs(r + 0.5 - cy) <= radius:
                    cells[r, c] = math.exp(-((c + 0.5 - cx) ** 2 + (r + 0.5 - cy) ** 2) / (2 * sigma * sigma))
        total = sum(cells.values())
        for (r, c), v in cells.items():
            grid[r][c] += v / total
    return np.array(grid)


def test_single_center_point():
    assert abs(build_density_map([(64.0, 64.0)], 128).count - 1.0) <= 1e-9


@pytest.mark.parametrize("corner", [(0.0, 0.0), (127.999, 0.0), (0.0, 127.999), (127.999, 127.999)])
def test_corner_point_keeps_unit_mass(corner):
    assert abs(build_density_map([corner], 128).count - 1.0) <= 1e-9


def test_random_points_match_loop_oracle():
    rng = np.random.default_rng(0)
    pts = [tuple(p) for p in rng.uniform(4, 124, (37, 2))]
    dm = build_density_map(pts, 128)
    assert abs(dm.count - 37) <= 1e-6
    np.testing.assert_allclose(dm.grid, loop_oracle(pts, 128), rtol=0, atol=1e-12)


def test_twelve_point_count():
    rng = np.random.default_rng(1)
    assert abs(count_of(build_density_map(rng.uniform(0, 128, (12, 2)), 128)) - 12) <= 1e-6


def test_empty_annotation_is_zero():
    dm = build_density_map([], 128)
    assert dm.grid.shape == (32, 32) and not dm.grid.any() and count_of(dm) == 0


def test_count_of_zero_and_mirror():
    assert count_of(np.zeros((8, 8))) == 0
    dm = build_density_map(np.random.default_rng(2).uniform(0, 128, (9, 2)), 128)
    both = dm.grid + dm.grid[:, ::-1]
    assert abs(count_of(both) - 2 * dm.count) <= 1e-9


def test_grid_nonnegative_and_scaled():
    dm = build_density_map(np.random.default_rng(3).uniform(0, 64, (20, 2)), (64, 64))
    assert isinstance(dm, DensityMap) and dm.scale == 4
    assert dm.grid.shape == (16, 16) and (dm.grid >= 0).all()


def test_out_of_bounds_point_rejected():
    with pytest.raises(InvalidArgumentError):
        build_density_map([(128.0, 5.0)], 128)


def test_sparse_points_use_sigma_max():
    cfg = DensityMapConfig()
    np.testing.assert_array_equal(adaptive_sigmas([(1, 1), (50, 50), (90, 9)], cfg), [cfg.sigma_max] * 3)


@pytest.mark.parametrize("kwargs", [dict(sigma_min=0.0), dict(sigma_min=3, sigma_max=2), dict(k_neighbors=0),
                                    dict(truncation_radius=1.5), dict(output_scale=0)])
def test_config_validation(kwargs):
    with pytest.raises(InvalidArgumentError):
        DensityMapConfig(**kwargs)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 80), st.integers(0, 2**32 - 1))
def test_count_conservation(n, seed):
    pts = np.random.default_rng(seed).uniform(0, 128, (n, 2))
    assert abs(build_density_map(pts, 128).count - n) <= 0.005 * max(1, n)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_count_linearity(scale, seed):
    rng = np.random.default_rng(seed)
    m1 = build_density_map(rng.uniform(0, 128, (10, 2)), 128).grid
    m2 = build_density_map(rng.uniform(0, 128, (5, 2)), 128).grid
    assert abs(count_of(scale * m1 + m2) - (scale * count_of(m1) + count_of(m2))) <= 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(-3, 3), st.integers(-3, 3), st.integers(0, 2**32 - 1))
def test_translation_by_output_stride(dx, dy, seed):
    # interior points stay clear of the border by radius * sigma_max = 32 px
    pts = np.random.default_rng(seed).uniform(48, 80, (6, 2))
    base = build_density_map(pts, 128).grid
    moved = build_density_map(pts + 4 * np.array([dx, dy]), 128).grid
    np.testing.assert_allclose(np.roll(base, (dy, dx), axis=(0, 1)), moved, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(1.0, 4.0), st.integers(0, 2**32 - 1))
def test_sigma_monotone_under_spreading(factor, seed):
    cfg = DensityMapConfig(sigma_min=1e-9, sigma_max=1e9)
    pts = np.random.default_rng(seed).uniform(0, 100, (8, 2))
    assert (adaptive_sigmas(pts * factor, cfg) >= adaptive_sigmas(pts, cfg) * (1 - 1e-12)).all()
