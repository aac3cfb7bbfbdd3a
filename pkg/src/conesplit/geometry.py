"""Cone-beam scan geometry and per-pixel ray generation.

Coordinate convention (fixed here, inherited by every other module): the
rotation axis is z, the source sits on the +x axis at angle 0 and rotates
counter-clockwise in the x-y plane, and the detector hangs on the opposite
side of the axis, perpendicular to the source-axis line.  Detector u runs
tangentially (+y at angle 0), detector v runs along +z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "VoxelGrid",
    "DetectorGrid",
    "ScanGeometry",
    "Ray",
    "source_position",
    "pixel_ray",
]

# Volumes are indexed as data[z, y, x]; total element count must stay
# addressable with a signed 64-bit index.
_MAX_VOXELS = 2**63 - 1


@dataclass(frozen=True)
class VoxelGrid:
    """Dense voxel lattice: counts, physical voxel size (mm) and the offset
    of the grid center from the rotation axis (mm)."""

    n_x: int
    n_y: int
    n_z: int
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("n_x", "n_y", "n_z"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if any(s <= 0 for s in self.voxel_size):
            raise ValueError("voxel sizes must be positive")
        if self.n_x * self.n_y * self.n_z > _MAX_VOXELS:
            raise ValueError("voxel count overflows 64-bit indexing")

    @property
    def counts(self) -> tuple[int, int, int]:
        return (self.n_x, self.n_y, self.n_z)

    @property
    def extent(self) -> tuple[float, float, float]:
        """Physical edge lengths of the grid box (mm)."""
        return (
            self.n_x * self.voxel_size[0],
            self.n_y * self.voxel_size[1],
            self.n_z * self.voxel_size[2],
        )

    def min_corner(self) -> np.ndarray:
        """Lower corner of the grid box in world coordinates (mm)."""
        ext = self.extent
        off = self.origin_offset
        return np.array([off[i] - 0.5 * ext[i] for i in range(3)])

    def bounding_radius(self) -> float:
        """Radius of the sphere circumscribing the grid box (mm)."""
        ext = self.extent
        return 0.5 * math.sqrt(ext[0] ** 2 + ext[1] ** 2 + ext[2] ** 2)


@dataclass(frozen=True)
class DetectorGrid:
    """Flat-panel detector: pixel counts (u = width, v = height), pixel
    pitch and in-plane panel offset, all in mm."""

    n_u: int
    n_v: int
    pixel_size: tuple[float, float] = (1.0, 1.0)
    detector_offset: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.n_u < 1 or self.n_v < 1:
            raise ValueError("detector pixel counts must be >= 1")
        if any(s <= 0 for s in self.pixel_size):
            raise ValueError("pixel sizes must be positive")


@dataclass(frozen=True)
class ScanGeometry:
    """Circular cone-beam scan: source-axis distance, source-detector
    distance, per-view rotation angles (radians, any order and spacing),
    the voxel grid and the detector panel."""

    dso: float
    dsd: float
    angles: tuple[float, ...]
    voxel_grid: VoxelGrid
    detector: DetectorGrid

    def __post_init__(self):
        if not (self.dsd > self.dso > 0):
            raise ValueError("require dsd > dso > 0")
        if len(self.angles) == 0:
            raise ValueError("angle list must be non-empty")
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        self._check_clearance()

    def _check_clearance(self):
        # The sphere circumscribing the voxel grid must stay strictly
        # between the source and the detector plane for every view.
        r = self.voxel_grid.bounding_radius()
        center = np.asarray(self.voxel_grid.origin_offset, dtype=float)
        for theta in self.angles:
            axis = np.array([math.cos(theta), math.sin(theta), 0.0])
            source = self.dso * axis
            # distance from the source plane along the beam direction
            depth = float(np.dot(source - center, axis))
            if depth - r <= 0:
                raise ValueError(
                    f"voxel grid reaches the source at angle {theta:.6g} rad"
                )
            if depth + r >= self.dsd:
                raise ValueError(
                    f"voxel grid reaches the detector at angle {theta:.6g} rad"
                )

    @property
    def n_angles(self) -> int:
        return len(self.angles)

    def with_angles(self, angles) -> "ScanGeometry":
        """Same scan restricted/rearranged to the given angle values."""
        return ScanGeometry(self.dso, self.dsd, tuple(angles),
                            self.voxel_grid, self.detector)


@dataclass(frozen=True)
class Ray:
    """Half-line from the source through one detector pixel center.

    ``t_entry``/``t_exit`` parametrize the intersection with the voxel
    grid's bounding box (mm along the unit direction); ``t_entry > t_exit``
    encodes a miss.
    """

    origin: tuple[float, float, float]
    direction: tuple[float, float, float]
    t_entry: float
    t_exit: float

    def __post_init__(self):
        norm = math.sqrt(sum(c * c for c in self.direction))
        if abs(norm - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length")

    @property
    def hits(self) -> bool:
        return self.t_entry <= self.t_exit


def source_position(geometry: ScanGeometry, angle_index: int) -> np.ndarray:
    """Source location (mm) for one view: dso * (cos a, sin a, 0)."""
    if not 0 <= angle_index < geometry.n_angles:
        raise IndexError(f"angle index {angle_index} out of range")
    theta = geometry.angles[angle_index]
    return geometry.dso * np.array([math.cos(theta), math.sin(theta), 0.0])


def detector_basis(geometry: ScanGeometry, angle_index: int):
    """Detector center and in-plane unit axes (u tangential, v axial)."""
    if not 0 <= angle_index < geometry.n_angles:
        raise IndexError(f"angle index {angle_index} out of range")
    theta = geometry.angles[angle_index]
    axis = np.array([math.cos(theta), math.sin(theta), 0.0])
    u_hat = np.array([-math.sin(theta), math.cos(theta), 0.0])
    v_hat = np.array([0.0, 0.0, 1.0])
    center = (geometry.dso - geometry.dsd) * axis
    return center, u_hat, v_hat


def pixel_center(geometry: ScanGeometry, angle_index: int, u: int, v: int) -> np.ndarray:
    """World position (mm) of the center of detector pixel (u, v)."""
    det = geometry.detector
    if not 0 <= u < det.n_u:
        raise IndexError(f"u index {u} out of range")
    if not 0 <= v < det.n_v:
        raise IndexError(f"v index {v} out of range")
    center, u_hat, v_hat = detector_basis(geometry, angle_index)
    du, dv = det.pixel_size
    off_u, off_v = det.detector_offset
    u_pos = (u - 0.5 * (det.n_u - 1)) * du + off_u
    v_pos = (v - 0.5 * (det.n_v - 1)) * dv + off_v
    return center + u_pos * u_hat + v_pos * v_hat


def intersect_box(origin, direction, box_min, box_max) -> tuple[float, float]:
    """Slab-method ray/box intersection.

    Returns (t_entry, t_exit); t_entry > t_exit means the ray misses.
    """
    t0, t1 = -math.inf, math.inf
    for k in range(3):
        o, d = origin[k], direction[k]
        if d != 0.0:
            ta = (box_min[k] - o) / d
            tb = (box_max[k] - o) / d
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
        elif o < box_min[k] or o > box_max[k]:
            return 1.0, -1.0
    if t0 > t1:
        return 1.0, -1.0
    return t0, t1


def pixel_ray(geometry: ScanGeometry, angle_index: int, u: int, v: int) -> Ray:
    """Ray from the source through the center of detector pixel (u, v),
    with its parametric voxel-grid bounding-box intersection."""
    src = source_position(geometry, angle_index)
    target = pixel_center(geometry, angle_index, u, v)
    direction = target - src
    direction = direction / np.linalg.norm(direction)
    grid = geometry.voxel_grid
    box_min = grid.min_corner()
    box_max = box_min + np.asarray(grid.extent)
    t0, t1 = intersect_box(src, direction, box_min, box_max)
    return Ray(tuple(src), tuple(direction), t0, t1)
