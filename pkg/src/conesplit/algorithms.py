"""Reconstruction algorithms: FDK, CGLS and OS-SART.

Every A / A^T application is planned and executed through the device
scheduler, so all three algorithms work unchanged on volumes that need
out-of-core splitting.  CGLS uses the interpolated/matched operator pair
(a true adjoint is required for its recurrences); OS-SART uses the same
pair so its normalization volumes are consistent with the update operator;
FDK filters on the host and backprojects with FDK distance weights.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .execution import execute_backward, execute_forward
from .geometry import ScanGeometry
from .projectors import (
    BackwardTileSpec,
    ForwardTileSpec,
    ProjectionMethod,
    ProjectionStack,
    Volume,
    WeightMode,
)
from .regularization import TvParams, split_minimize
from .scheduler import (
    DEFAULT_USABLE_FRACTION,
    DevicePool,
    plan_backward,
    plan_forward,
)

__all__ = [
    "Algorithm",
    "ReconConfig",
    "CglsResult",
    "ScheduledOperators",
    "fdk",
    "cgls",
    "os_sart",
    "format_residuals",
]

INVERSE_GUARD = 1e-8
CG_BREAKDOWN = 1e-30


class Algorithm(enum.Enum):
    FDK = "fdk"
    CGLS = "cgls"
    OSSART = "ossart"


@dataclass(frozen=True)
class ReconConfig:
    pool: DevicePool
    algorithm: Algorithm = Algorithm.CGLS
    iterations: int = 10
    block_size: int = 1
    relaxation: float = 1.0
    tv: TvParams | None = None
    forward_tiles: ForwardTileSpec = ForwardTileSpec()
    backward_tiles: BackwardTileSpec = BackwardTileSpec()
    usable_fraction: float = DEFAULT_USABLE_FRACTION

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.block_size < 1:
            raise ValueError("block size must be >= 1")
        if not (0.0 < self.relaxation < 2.0):
            raise ValueError("relaxation must lie in (0, 2)")


@dataclass
class CglsResult:
    volume: Volume
    residuals: list[float]
    breakdown: bool = False


class ScheduledOperators:
    """The operator pair A / A^T for one scan, planned once per geometry
    and executed over the device pool on every application."""

    def __init__(self, geometry: ScanGeometry, pool: DevicePool,
                 method: ProjectionMethod, mode: WeightMode,
                 forward_tiles: ForwardTileSpec = ForwardTileSpec(),
                 backward_tiles: BackwardTileSpec = BackwardTileSpec(),
                 usable_fraction: float = DEFAULT_USABLE_FRACTION,
                 trace_sink: list | None = None):
        self.geometry = geometry
        self.pool = pool
        self.method = method
        self.mode = mode
        self.forward_tiles = forward_tiles
        self.backward_tiles = backward_tiles
        self.trace_sink = trace_sink
        self.forward_plan = plan_forward(geometry, pool, forward_tiles,
                                         usable_fraction)
        self.backward_plan = plan_backward(geometry, pool, backward_tiles,
                                           usable_fraction)

    def forward(self, volume: Volume) -> ProjectionStack:
        return execute_forward(volume, self.geometry, self.pool,
                               self.forward_plan, self.method,
                               self.forward_tiles, self.trace_sink)

    def backward(self, projections: ProjectionStack) -> Volume:
        return execute_backward(projections, self.geometry, self.pool,
                                self.backward_plan, self.mode,
                                self.backward_tiles, self.trace_sink)

    def forward_array(self, x: np.ndarray) -> np.ndarray:
        grid = self.geometry.voxel_grid
        vol = Volume(grid, x.astype(np.float32), (0, grid.n_z))
        return self.forward(vol).data.astype(np.float64)

    def backward_array(self, y: np.ndarray) -> np.ndarray:
        stack = ProjectionStack(self.geometry.detector, y.astype(np.float32),
                                (0, self.geometry.n_angles))
        return self.backward(stack).data.astype(np.float64)


def _check_projections(projections: ProjectionStack, geometry: ScanGeometry):
    if projections.data.size == 0:
        raise ValueError("empty projection stack")
    if projections.n_angles != geometry.n_angles:
        raise ValueError("projection stack does not cover the scan angles")
    if projections.detector != geometry.detector:
        raise ValueError("projection detector does not match the scan")


def _mean_angle_step(angles) -> float:
    if len(angles) < 2:
        return 2.0 * math.pi
    diffs = np.diff(np.sort(np.asarray(angles)))
    return float(np.mean(diffs))


def ramp_filter_rows(data: np.ndarray, spacing: float) -> np.ndarray:
    """Ramp-filter along the last axis via FFT of the band-limited kernel.

    Rows are zero-padded to the next power of two at least twice their
    length so the circular convolution is linear.
    """
    n = data.shape[-1]
    pad = 1 << (2 * n - 1).bit_length()
    kernel = np.zeros(pad)
    kernel[0] = 1.0 / (4.0 * spacing * spacing)
    k = np.arange(1, pad // 2 + 1)
    odd = k[k % 2 == 1]
    kernel[odd] = -1.0 / (math.pi * odd * spacing) ** 2
    kernel[pad - odd] = kernel[odd]
    padded = np.zeros(data.shape[:-1] + (pad,))
    padded[..., :n] = data
    filtered = np.fft.irfft(np.fft.rfft(padded) * np.fft.rfft(kernel), pad)
    return filtered[..., :n] * spacing


def fdk(projections: ProjectionStack, geometry: ScanGeometry,
        pool: DevicePool, tiles: BackwardTileSpec = BackwardTileSpec(),
        usable_fraction: float = DEFAULT_USABLE_FRACTION,
        trace_sink: list | None = None) -> Volume:
    """Feldkamp reconstruction: cosine weighting, per-row ramp filtering
    and distance-weighted backprojection through the scheduler.

    The ramp filter runs at the detector pitch rescaled to the rotation
    axis plane, which together with the (dso/U)^2 backprojection weights
    gives attenuation-calibrated output for circular scans.
    """
    _check_projections(projections, geometry)
    angles = geometry.angles
    span = max(angles) - min(angles)
    if span < math.pi and len(angles) > 1:
        warnings.warn("angular span covers less than a short-scan arc; "
                      "FDK output will be distorted", stacklevel=2)

    det = geometry.detector
    du, dv = det.pixel_size
    off_u, off_v = det.detector_offset
    u_pos = (np.arange(det.n_u) - 0.5 * (det.n_u - 1)) * du + off_u
    v_pos = (np.arange(det.n_v) - 0.5 * (det.n_v - 1)) * dv + off_v
    cosw = geometry.dsd / np.sqrt(
        geometry.dsd ** 2 + u_pos[None, :] ** 2 + v_pos[:, None] ** 2)

    weighted = projections.data.astype(np.float64) * cosw[None, :, :]
    iso_spacing = du * geometry.dso / geometry.dsd
    filtered = ramp_filter_rows(weighted, iso_spacing)
    filtered *= 0.5 * _mean_angle_step(angles)

    stack = ProjectionStack(det, filtered.astype(np.float32),
                            projections.angle_range)
    plan = plan_backward(geometry, pool, tiles, usable_fraction)
    return execute_backward(stack, geometry, pool, plan, WeightMode.FDK,
                            tiles, trace_sink)


def cgls(projections: ProjectionStack, geometry: ScanGeometry,
         config: ReconConfig, trace_sink: list | None = None) -> CglsResult:
    """Conjugate gradient on the normal equations from zero initialization.

    Uses the interpolated/matched operator pair; returns the iterate, the
    per-iteration relative residual ||b - A x|| / ||b||, and a breakdown
    flag when a recurrence denominator collapses below 1e-30.
    """
    _check_projections(projections, geometry)
    ops = ScheduledOperators(geometry, config.pool,
                             ProjectionMethod.INTERPOLATED,
                             WeightMode.MATCHED, config.forward_tiles,
                             config.backward_tiles, config.usable_fraction,
                             trace_sink)
    grid = geometry.voxel_grid
    b = projections.data.astype(np.float64)
    b_norm = float(np.linalg.norm(b))
    x = np.zeros((grid.n_z, grid.n_y, grid.n_x))
    residuals: list[float] = []
    if b_norm == 0.0:
        return CglsResult(Volume(grid, x.astype(np.float32)), residuals)

    r = b.copy()
    s = ops.backward_array(r)
    p = s.copy()
    gamma = float(np.vdot(s, s).real)
    breakdown = False
    for _ in range(config.iterations):
        q = ops.forward_array(p)
        delta = float(np.vdot(q, q).real)
        if delta < CG_BREAKDOWN or gamma < CG_BREAKDOWN:
            breakdown = True
            break
        alpha = gamma / delta
        x += alpha * p
        r -= alpha * q
        residuals.append(float(np.linalg.norm(r)) / b_norm)
        s = ops.backward_array(r)
        gamma_new = float(np.vdot(s, s).real)
        beta = gamma_new / gamma
        p = s + beta * p
        gamma = gamma_new
    return CglsResult(Volume(grid, x.astype(np.float32)), residuals, breakdown)


def _angle_blocks(n_angles: int, block_size: int) -> list[tuple[int, int]]:
    return [(b0, min(b0 + block_size, n_angles))
            for b0 in range(0, n_angles, block_size)]


def _guarded_inverse(a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    mask = a >= INVERSE_GUARD
    out[mask] = 1.0 / a[mask]
    return out


def os_sart(projections: ProjectionStack, geometry: ScanGeometry,
            config: ReconConfig, trace_sink: list | None = None) -> Volume:
    """Ordered-subsets SART: per angle block S,
    x += relaxation * V_S o A_S^T W_S (b_S - A_S x),
    with W_S and V_S the guarded inverses of the block's forward-projected
    ones and backprojected ones.  block_size=1 is classic SART; a block of
    all angles is a SIRT-style single update per iteration.
    """
    _check_projections(projections, geometry)
    if config.block_size > geometry.n_angles:
        raise ValueError("block size exceeds the number of angles")
    grid = geometry.voxel_grid
    blocks = _angle_blocks(geometry.n_angles, config.block_size)

    block_ops: list[ScheduledOperators] = []
    weights: list[tuple[np.ndarray, np.ndarray]] = []
    ones_vol = Volume(grid, np.ones((grid.n_z, grid.n_y, grid.n_x), np.float32))
    for b0, b1 in blocks:
        sub = geometry.with_angles(geometry.angles[b0:b1])
        ops = ScheduledOperators(sub, config.pool,
                                 ProjectionMethod.INTERPOLATED,
                                 WeightMode.MATCHED, config.forward_tiles,
                                 config.backward_tiles,
                                 config.usable_fraction, trace_sink)
        block_ops.append(ops)
        row_sums = ops.forward(ones_vol).data.astype(np.float64)
        ones_proj = ProjectionStack(
            sub.detector, np.ones_like(row_sums, dtype=np.float32), (0, b1 - b0))
        col_sums = ops.backward(ones_proj).data.astype(np.float64)
        weights.append((_guarded_inverse(row_sums), _guarded_inverse(col_sums)))

    b = projections.data.astype(np.float64)
    x = np.zeros((grid.n_z, grid.n_y, grid.n_x))
    for _ in range(config.iterations):
        for (b0, b1), ops, (w_s, v_s) in zip(blocks, block_ops, weights):
            residual = b[b0:b1] - ops.forward_array(x)
            update = ops.backward_array(w_s * residual)
            x += config.relaxation * v_s * update
        if config.tv is not None:
            vol = Volume(grid, x.astype(np.float32))
            vol = split_minimize(vol, config.pool, config.tv,
                                 config.usable_fraction)
            x = vol.data.astype(np.float64)
    return Volume(grid, x.astype(np.float32))


def format_residuals(residuals) -> str:
    """Line-delimited `iter=<n> residual=<r>` records."""
    return "\n".join(f"iter={i} residual={r:.9g}"
                     for i, r in enumerate(residuals, start=1))
