"""Forward projection and backprojection over a single in-memory slab.

Two forward methods are provided: exact ray/voxel intersection lengths
(Siddon) and fixed-step trilinear sampling (Interpolated).  Backprojection
is voxel-driven with FDK distance weights, or the exact adjoint of the
interpolated forward projector (Matched).  Every operation accepts a
partial axial slab so that larger-than-memory volumes can be processed
piecewise; summing slab projections reproduces the full-volume projection
and slab backprojections are independent of one another.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import DetectorGrid, Ray, ScanGeometry, VoxelGrid

__all__ = [
    "Volume",
    "ProjectionStack",
    "ForwardTileSpec",
    "BackwardTileSpec",
    "WeightMode",
    "ProjectionMethod",
    "siddon_trace",
    "forward_project_slab",
    "backproject_slab",
    "sample_step",
]

DTYPE = np.float32


class WeightMode(enum.Enum):
    """Backprojection weighting: FDK distance weights or the true adjoint
    of the interpolated forward projector."""

    FDK = "fdk"
    MATCHED = "matched"


class ProjectionMethod(enum.Enum):
    SIDDON = "siddon"
    INTERPOLATED = "interpolated"


@dataclass(frozen=True)
class ForwardTileSpec:
    """Detector-tile shape and angles-per-launch for forward projection."""

    tile_u: int = 9
    tile_v: int = 9
    chunk_angles: int = 9

    def __post_init__(self):
        if min(self.tile_u, self.tile_v, self.chunk_angles) < 1:
            raise ValueError("tile sizes must be >= 1")


@dataclass(frozen=True)
class BackwardTileSpec:
    """Voxel-tile shape, angles-per-launch and per-worker z depth for
    backprojection."""

    tile_x: int = 16
    tile_y: int = 32
    chunk_angles: int = 32
    voxels_per_unit: int = 8

    def __post_init__(self):
        if min(self.tile_x, self.tile_y, self.chunk_angles,
               self.voxels_per_unit) < 1:
            raise ValueError("tile sizes must be >= 1")


@dataclass
class Volume:
    """Attenuation samples (1/mm) on an axial slab of a voxel grid.

    ``data[z, y, x]`` is x-fastest in memory; ``slab_range`` gives the
    [z_begin, z_end) range of grid slices this object holds.
    """

    grid: VoxelGrid
    data: np.ndarray
    slab_range: tuple[int, int] | None = None

    def __post_init__(self):
        if self.slab_range is None:
            self.slab_range = (0, self.grid.n_z)
        z0, z1 = self.slab_range
        if not (0 <= z0 < z1 <= self.grid.n_z):
            raise ValueError(f"invalid slab range {self.slab_range}")
        self.data = np.ascontiguousarray(self.data, dtype=DTYPE)
        expect = (z1 - z0, self.grid.n_y, self.grid.n_x)
        if self.data.shape != expect:
            raise ValueError(
                f"volume data shape {self.data.shape} != {expect}")

    @classmethod
    def zeros(cls, grid: VoxelGrid, slab_range=None) -> "Volume":
        z0, z1 = slab_range if slab_range is not None else (0, grid.n_z)
        return cls(grid, np.zeros((z1 - z0, grid.n_y, grid.n_x), DTYPE),
                   (z0, z1))

    @property
    def n_slices(self) -> int:
        return self.slab_range[1] - self.slab_range[0]

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def copy(self) -> "Volume":
        return Volume(self.grid, self.data.copy(), self.slab_range)


@dataclass
class ProjectionStack:
    """Line integrals for a contiguous range of scan angles.

    ``data[angle, v, u]`` is u-fastest in memory; ``angle_range`` is the
    [a_begin, a_end) window into the scan's angle list.
    """

    detector: DetectorGrid
    data: np.ndarray
    angle_range: tuple[int, int] | None = None

    def __post_init__(self):
        if self.angle_range is None:
            self.angle_range = (0, self.data.shape[0])
        a0, a1 = self.angle_range
        if not (0 <= a0 < a1):
            raise ValueError(f"invalid angle range {self.angle_range}")
        self.data = np.ascontiguousarray(self.data, dtype=DTYPE)
        expect = (a1 - a0, self.detector.n_v, self.detector.n_u)
        if self.data.shape != expect:
            raise ValueError(
                f"projection data shape {self.data.shape} != {expect}")

    @classmethod
    def zeros(cls, detector, angle_range) -> "ProjectionStack":
        a0, a1 = angle_range
        return cls(detector,
                   np.zeros((a1 - a0, detector.n_v, detector.n_u), DTYPE),
                   (a0, a1))

    @property
    def n_angles(self) -> int:
        return self.angle_range[1] - self.angle_range[0]

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def copy(self) -> "ProjectionStack":
        return ProjectionStack(self.detector, self.data.copy(), self.angle_range)


def sample_step(grid: VoxelGrid) -> float:
    """Integration step of the interpolated projector: half the smallest
    voxel dimension."""
    return 0.5 * min(grid.voxel_size)


def _flat_geometry(geometry: ScanGeometry, angle_indices) -> tuple:
    """Per-angle source positions, pixel (0,0) centers and pixel steps."""
    det = geometry.detector
    n = len(angle_indices)
    srcs = np.empty((n, 3))
    det00 = np.empty((n, 3))
    ustep = np.empty((n, 3))
    vstep = np.empty((n, 3))
    du, dv = det.pixel_size
    for row, a in enumerate(angle_indices):
        theta = geometry.angles[a]
        axis = np.array([math.cos(theta), math.sin(theta), 0.0])
        u_hat = np.array([-math.sin(theta), math.cos(theta), 0.0])
        v_hat = np.array([0.0, 0.0, 1.0])
        srcs[row] = geometry.dso * axis
        center = (geometry.dso - geometry.dsd) * axis
        off_u, off_v = det.detector_offset
        u0 = (-0.5 * (det.n_u - 1)) * du + off_u
        v0 = (-0.5 * (det.n_v - 1)) * dv + off_v
        det00[row] = center + u0 * u_hat + v0 * v_hat
        ustep[row] = du * u_hat
        vstep[row] = dv * v_hat
    return srcs, det00, ustep, vstep


def _grid_params(grid: VoxelGrid) -> tuple:
    g0 = grid.min_corner()
    vx, vy, vz = grid.voxel_size
    return (float(g0[0]), float(g0[1]), float(g0[2]),
            float(vx), float(vy), float(vz),
            grid.n_x, grid.n_y, grid.n_z)


def siddon_trace(ray: Ray, grid: VoxelGrid) -> list[tuple[tuple[int, int, int], float]]:
    """Ordered (voxel index, intersection length mm) pairs along a ray.

    Lists exactly the voxels crossed between the ray's grid entry and exit;
    segment midpoints decide attribution, so a ray grazing a voxel face
    contributes to the cell above the face and zero-length crossings are
    dropped.  Returns [] when the ray misses the grid.
    """
    if not ray.hits or ray.t_exit - ray.t_entry <= 1e-12:
        return []
    origin = np.asarray(ray.origin)
    direction = np.asarray(ray.direction)
    g0 = grid.min_corner()
    voxel = np.asarray(grid.voxel_size)
    counts = np.asarray(grid.counts)

    # All voxel-boundary crossing parameters inside the clipped segment.
    t0, t1 = ray.t_entry, ray.t_exit
    cuts = [t0, t1]
    for k in range(3):
        d = direction[k]
        if d == 0.0:
            continue
        for i in range(counts[k] + 1):
            t = (g0[k] + i * voxel[k] - origin[k]) / d
            if t0 < t < t1:
                cuts.append(t)
    cuts = sorted(set(cuts))

    out: list[tuple[tuple[int, int, int], float]] = []
    for ta, tb in zip(cuts[:-1], cuts[1:]):
        seg = tb - ta
        if seg <= 1e-12:
            continue
        mid = origin + 0.5 * (ta + tb) * direction
        idx = np.floor((mid - g0) / voxel).astype(int)
        if np.all(idx >= 0) and np.all(idx < counts):
            out.append(((int(idx[0]), int(idx[1]), int(idx[2])), float(seg)))
    return out


def forward_project_slab(volume: Volume, geometry: ScanGeometry,
                         angle_range: tuple[int, int],
                         method: ProjectionMethod = ProjectionMethod.SIDDON,
                         tiles: ForwardTileSpec = ForwardTileSpec()) -> ProjectionStack:
    """Project an axial slab onto the detector for a range of angles.

    Each pixel integrates attenuation over the slab only; rays that miss
    the slab produce zeros, and summing the stacks of a slab partition
    reproduces the full-volume projection.
    """
    if volume.grid != geometry.voxel_grid:
        raise ValueError("volume grid does not match scan geometry")
    a0, a1 = angle_range
    if not (0 <= a0 < a1 <= geometry.n_angles):
        raise ValueError(f"angle range {angle_range} outside scan")
    det = geometry.detector
    z_lo, z_hi = volume.slab_range
    gx0, gy0, gz0, vx, vy, vz, nx, ny, nz = _grid_params(volume.grid)
    out_all = np.empty((a1 - a0, det.n_v, det.n_u), DTYPE)

    chunk = tiles.chunk_angles
    for c0 in range(a0, a1, chunk):
        c1 = min(c0 + chunk, a1)
        srcs, det00, ustep, vstep = _flat_geometry(geometry, range(c0, c1))
        out = out_all[c0 - a0:c1 - a0]
        if method is ProjectionMethod.SIDDON:
            _kernels.siddon_forward_chunk(
                volume.data, srcs, det00, ustep, vstep,
                gx0, gy0, gz0, vx, vy, vz, nx, ny, nz, z_lo, z_hi,
                tiles.tile_u, tiles.tile_v, out)
        elif method is ProjectionMethod.INTERPOLATED:
            _kernels.interp_forward_chunk(
                volume.data, srcs, det00, ustep, vstep,
                gx0, gy0, gz0, vx, vy, vz, nx, ny, nz, z_lo, z_hi,
                sample_step(volume.grid), tiles.tile_u, tiles.tile_v, out)
        else:
            raise ValueError(f"unknown projection method {method}")
    return ProjectionStack(det, out_all, (a0, a1))


def backproject_chunk_into(acc64: np.ndarray, projections: ProjectionStack,
                           geometry: ScanGeometry, slab_range: tuple[int, int],
                           mode: WeightMode, tiles: BackwardTileSpec) -> None:
    """Add one angle chunk's backprojection into a float64 slab accumulator.

    This is the kernel-facing primitive shared by :func:`backproject_slab`
    and the out-of-core executor; the accumulation order per voxel depends
    only on the global angle order, never on chunk boundaries.
    """
    a0, a1 = projections.angle_range
    z_lo, z_hi = slab_range
    gx0, gy0, gz0, vx, vy, vz, nx, ny, nz = _grid_params(geometry.voxel_grid)
    if mode is WeightMode.FDK:
        thetas = np.array(geometry.angles[a0:a1])
        _kernels.fdk_backward_chunk(
            acc64, projections.data, np.cos(thetas), np.sin(thetas),
            geometry.dso, geometry.dsd,
            geometry.detector.pixel_size[0], geometry.detector.pixel_size[1],
            geometry.detector.detector_offset[0],
            geometry.detector.detector_offset[1],
            gx0, gy0, gz0, vx, vy, vz, z_lo,
            tiles.tile_x, tiles.tile_y)
    elif mode is WeightMode.MATCHED:
        srcs, det00, ustep, vstep = _flat_geometry(geometry, range(a0, a1))
        _kernels.matched_backward_chunk(
            acc64, projections.data, srcs, det00, ustep, vstep,
            gx0, gy0, gz0, vx, vy, vz, nx, ny, nz, z_lo, z_hi,
            sample_step(geometry.voxel_grid))
    else:
        raise ValueError(f"unknown weight mode {mode}")


def backproject_slab(projections: ProjectionStack, geometry: ScanGeometry,
                     slab_range: tuple[int, int],
                     mode: WeightMode = WeightMode.FDK,
                     tiles: BackwardTileSpec = BackwardTileSpec(),
                     accumulate_into: Volume | None = None) -> Volume:
    """Backproject a stack of angles into one axial slab.

    Adds onto ``accumulate_into`` (allocated as zeros when omitted); a
    voxel's result depends only on the projections, never on other slabs.
    """
    z0, z1 = slab_range
    grid = geometry.voxel_grid
    if not (0 <= z0 < z1 <= grid.n_z):
        raise ValueError(f"invalid slab range {slab_range}")
    if projections.detector != geometry.detector:
        raise ValueError("projection detector does not match scan geometry")
    if accumulate_into is None:
        accumulate_into = Volume.zeros(grid, slab_range)
    elif accumulate_into.slab_range != (z0, z1):
        raise ValueError("accumulate_into does not cover the slab range")

    acc64 = accumulate_into.data.astype(np.float64)
    a0, a1 = projections.angle_range
    chunk = tiles.chunk_angles
    for c0 in range(a0, a1, chunk):
        c1 = min(c0 + chunk, a1)
        sub = ProjectionStack(projections.detector,
                              projections.data[c0 - a0:c1 - a0], (c0, c1))
        backproject_chunk_into(acc64, sub, geometry, slab_range, mode, tiles)
    accumulate_into.data[:] = acc64.astype(DTYPE)
    return accumulate_into
