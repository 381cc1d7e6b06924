"""Ground-truth density maps from point annotations.

Each annotated building contributes a truncated, discretised Gaussian whose
in-bounds mass is renormalised to exactly one, so the map total equals the
number of points.  The Gaussian spread follows the geometry-adaptive rule
``sigma = beta * mean distance to the k nearest other points`` clamped to
``[sigma_min, sigma_max]``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .tensor import seq_sum


@dataclass(frozen=True)
class DensityMapConfig:
    k_neighbors: int = 3
    beta: float = 0.3
    sigma_min: float = 1.0  # image pixels
    sigma_max: float = 8.0  # image pixels
    truncation_radius: float = 4.0  # multiples of sigma
    output_scale: int = 4

    def __post_init__(self):
        if not 0 < self.sigma_min <= self.sigma_max:
            raise InvalidArgumentError(f"need 0 < sigma_min <= sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.k_neighbors < 1:
            raise InvalidArgumentError("k_neighbors must be >= 1")
        if self.truncation_radius < 2:
            raise InvalidArgumentError("truncation_radius must be >= 2")
        if self.output_scale < 1 or int(self.output_scale) != self.output_scale:
            raise InvalidArgumentError("output_scale must be a positive integer")


@dataclass
class DensityMap:
    grid: np.ndarray
    scale: int = 4

    @property
    def count(self):
        return count_of(self)


def count_of(density):
    """Total mass of a density map (DensityMap or bare array)."""
    grid = density.grid if isinstance(density, DensityMap) else np.asarray(density, dtype=np.float64)
    return float(seq_sum(grid))


def adaptive_sigmas(points, cfg=DensityMapConfig()):
    """Per-point spread in image pixels."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    sigmas = np.full(n, float(cfg.sigma_max))
    if n <= cfg.k_neighbors:
        return sigmas
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    np.fill_diagonal(dist, np.inf)
    nearest = np.sort(dist, axis=1)[:, : cfg.k_neighbors]
    return np.clip(cfg.beta * nearest.mean(axis=1), cfg.sigma_min, cfg.sigma_max)


def _stamp(grid, cx, cy, sigma, radius):
    """Add a unit-mass truncated Gaussian centred at grid coordinates (cx, cy)."""
    h, w = grid.shape
    # cells whose centres (i + 0.5) lie within `radius` of the point along each axis
    c0 = max(0, int(np.ceil(cx - 0.5 - radius)))
    c1 = min(w - 1, int(np.floor(cx - 0.5 + radius)))
    r0 = max(0, int(np.ceil(cy - 0.5 - radius)))
    r1 = min(h - 1, int(np.floor(cy - 0.5 + radius)))
    if c1 < c0 or r1 < r0:
        kernel = None
    else:
        gx = np.exp(-((np.arange(c0, c1 + 1) + 0.5 - cx) ** 2) / (2 * sigma * sigma))
        gy = np.exp(-((np.arange(r0, r1 + 1) + 0.5 - cy) ** 2) / (2 * sigma * sigma))
        kernel = np.outer(gy, gx)
        total = kernel.sum()
    if kernel is None or not total > 0:
        grid[min(h - 1, int(cy)), min(w - 1, int(cx))] += 1.0
        return
    grid[r0 : r1 + 1, c0 : c1 + 1] += kernel / total


def build_density_map(points, image_size, cfg=DensityMapConfig()):
    """Density map at ``image_size / output_scale`` resolution.

    ``points`` are (x, y) pixel coordinates with the image spanning
    ``[0, W) x [0, H)``; ``image_size`` is an int or (H, W).
    """
    h, w = (image_size, image_size) if np.isscalar(image_size) else tuple(image_size)
    s = int(cfg.output_scale)
    if h % s or w % s:
        raise InvalidArgumentError(f"image size {h}x{w} is not divisible by output_scale={s}")
    grid = np.zeros((h // s, w // s))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return DensityMap(grid, s)
    if np.any(pts < 0) or np.any(pts[:, 0] >= w) or np.any(pts[:, 1] >= h):
        raise InvalidArgumentError("annotation point outside the image bounds")
    sigmas = adaptive_sigmas(pts, cfg) / s
    for (x, y), sg in zip(pts, sigmas):
        _stamp(grid, x / s, y / s, sg, cfg.truncation_radius * sg)
    return DensityMap(grid, s)
