"""Synthetic test volumes.

The head phantom sums the classical ten-ellipsoid table; coordinates are
normalized per axis so the unit sphere of the table maps onto the grid's
physical extents.
"""

from __future__ import annotations

import enum
import math

import numpy as np

from .geometry import VoxelGrid
from .projectors import Volume

__all__ = ["PhantomKind", "phantom", "SHEPP_LOGAN_ELLIPSOIDS"]

CYLINDER_ATTENUATION = 0.02  # 1/mm
CYLINDER_RADIUS_FRACTION = 0.4

# Three-dimensional Shepp-Logan head phantom, after the table in Kak &
# Slaney, "Principles of Computerized Tomographic Imaging" (IEEE Press,
# 1988), with the original Shepp & Logan (1974) gray levels.  Columns:
# additive value, half-axes (a, b, c), center (x0, y0, z0), rotation about
# the z axis in degrees.
SHEPP_LOGAN_ELLIPSOIDS = (
    (2.00, 0.6900, 0.920, 0.810, 0.00, 0.0000, 0.000, 0.0),
    (-0.98, 0.6624, 0.874, 0.780, 0.00, -0.0184, 0.000, 0.0),
    (-0.02, 0.1100, 0.310, 0.220, 0.22, 0.0000, 0.000, -18.0),
    (-0.02, 0.1600, 0.410, 0.280, -0.22, 0.0000, 0.000, 18.0),
    (0.01, 0.2100, 0.250, 0.410, 0.00, 0.3500, -0.150, 0.0),
    (0.01, 0.0460, 0.046, 0.050, 0.00, 0.1000, 0.250, 0.0),
    (0.01, 0.0460, 0.046, 0.050, 0.00, -0.1000, 0.250, 0.0),
    (0.01, 0.0460, 0.023, 0.050, -0.08, -0.6050, 0.000, 0.0),
    (0.01, 0.0230, 0.023, 0.020, 0.00, -0.6060, 0.000, 0.0),
    (0.01, 0.0230, 0.046, 0.020, 0.06, -0.6050, 0.000, 0.0),
)

# Piecewise-constant axial bands (z fraction where the band starts, value).
BLOCK_BANDS = ((0.00, 0.0), (0.25, 1.0), (0.50, 0.3), (0.75, 0.8))


class PhantomKind(enum.Enum):
    SHEPP_LOGAN_3D = "shepplogan3d"
    UNIFORM_CYLINDER = "cylinder"
    BLOCKS = "blocks"


def _normalized_coords(grid: VoxelGrid):
    """Voxel-center coordinates scaled so each axis spans [-1, 1]."""
    ext = grid.extent
    xs = (np.arange(grid.n_x) + 0.5) * grid.voxel_size[0] - 0.5 * ext[0]
    ys = (np.arange(grid.n_y) + 0.5) * grid.voxel_size[1] - 0.5 * ext[1]
    zs = (np.arange(grid.n_z) + 0.5) * grid.voxel_size[2] - 0.5 * ext[2]
    return (xs / (0.5 * ext[0]), ys / (0.5 * ext[1]), zs / (0.5 * ext[2]))


def add_ellipsoids(data: np.ndarray, coords, ellipsoids) -> None:
    """Accumulate ellipsoid indicator values onto data[z, y, x]."""
    qx, qy, qz = coords
    x = qx[None, None, :]
    y = qy[None, :, None]
    z = qz[:, None, None]
    for value, a, b, c, x0, y0, z0, phi_deg in ellipsoids:
        phi = math.radians(phi_deg)
        cp, sp = math.cos(phi), math.sin(phi)
        xr = (x - x0) * cp + (y - y0) * sp
        yr = -(x - x0) * sp + (y - y0) * cp
        inside = (xr / a) ** 2 + (yr / b) ** 2 + ((z - z0) / c) ** 2 <= 1.0
        data[inside] += value


def phantom(kind: PhantomKind, grid: VoxelGrid) -> Volume:
    """Generate a test volume on the given grid."""
    data = np.zeros((grid.n_z, grid.n_y, grid.n_x), np.float64)
    if kind is PhantomKind.SHEPP_LOGAN_3D:
        add_ellipsoids(data, _normalized_coords(grid), SHEPP_LOGAN_ELLIPSOIDS)
    elif kind is PhantomKind.UNIFORM_CYLINDER:
        ext = grid.extent
        radius = CYLINDER_RADIUS_FRACTION * min(ext[0], ext[1])
        xs = (np.arange(grid.n_x) + 0.5) * grid.voxel_size[0] - 0.5 * ext[0]
        ys = (np.arange(grid.n_y) + 0.5) * grid.voxel_size[1] - 0.5 * ext[1]
        rr = xs[None, :] ** 2 + ys[:, None] ** 2
        data[:, rr <= radius * radius] = CYLINDER_ATTENUATION
    elif kind is PhantomKind.BLOCKS:
        for frac, value in BLOCK_BANDS:
            data[int(frac * grid.n_z):] = value
    else:
        raise ValueError(f"unknown phantom kind {kind}")
    return Volume(grid, data.astype(np.float32), (0, grid.n_z))


def blocks_tv(grid: VoxelGrid) -> float:
    """Closed-form TV of the Blocks phantom: interface area times jumps."""
    values = [v for _, v in BLOCK_BANDS]
    jumps = sum(abs(b - a) for a, b in zip(values[:-1], values[1:]))
    return grid.n_x * grid.n_y * jumps
