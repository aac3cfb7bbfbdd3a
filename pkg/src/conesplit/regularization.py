"""Total-variation regularizers and their halo-split multi-device scheme.

Both minimizers are 6-neighbourhood stencils: one iteration at a voxel
reads only its direct neighbours.  A slab carrying ``d`` ghost slices on
each interior boundary can therefore run ``d`` iterations without talking
to its neighbours before the ghosts must be refreshed, which is what
:func:`split_minimize` exploits: epochs of ``inner_iters`` local
iterations separated by halo exchanges.

The gradient-descent minimizer normalizes its step by the gradient norm.
With ``ExactGlobal`` that norm is reduced across slabs every iteration
(one scalar message, no halo traffic) and the split run reproduces the
monolithic one; ``LocalApprox`` instead extrapolates each slab's local
norm by sqrt(total voxels / slab voxels), trading exactness for zero
synchronization inside an epoch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .projectors import Volume
from .scheduler import SCALAR_BYTES, DevicePool, InfeasiblePlanError

__all__ = [
    "TvMinimizer",
    "NormMode",
    "TvParams",
    "HaloSlab",
    "tv_norm",
    "minimize_tv_gradient",
    "minimize_rof",
    "split_minimize",
]

TV_SMOOTH_EPS = 1e-8
ROF_DUAL_STEP = 1.0 / 12.0  # 1 / operator-norm bound of div(grad) in 3D
_ZERO_NORM = 1e-30


class TvMinimizer(enum.Enum):
    GRADIENT_DESCENT = "gradient_descent"
    ROF = "rof"


class NormMode(enum.Enum):
    EXACT_GLOBAL = "exact_global"
    LOCAL_APPROX = "local_approx"


@dataclass(frozen=True)
class TvParams:
    minimizer: TvMinimizer = TvMinimizer.GRADIENT_DESCENT
    outer_syncs: int = 1
    inner_iters: int = 60
    step: float = 1e-3
    lam: float = 0.1
    norm_mode: NormMode = NormMode.EXACT_GLOBAL
    halo_depth: int | None = None  # defaults to inner_iters when split

    def effective_halo(self) -> int:
        return self.inner_iters if self.halo_depth is None else self.halo_depth


@dataclass
class HaloSlab:
    """One device's working window: owned core plus ghost slices.

    ``core_range`` is the owned [z0, z1); the data window extends up to
    ``halo_depth`` slices beyond each interior boundary.  Ghost slices are
    rebuilt from the neighbours' cores at every synchronization point.
    """

    core_range: tuple[int, int]
    halo_depth: int
    window: tuple[int, int]

    @property
    def core_in_window(self) -> slice:
        z0, z1 = self.core_range
        w0, _ = self.window
        return slice(z0 - w0, z1 - w0)


def _grad(u):
    gz = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx = np.zeros_like(u)
    gz[:-1] = u[1:] - u[:-1]
    gy[:, :-1] = u[:, 1:] - u[:, :-1]
    gx[:, :, :-1] = u[:, :, 1:] - u[:, :, :-1]
    return gz, gy, gx


def _div(pz, py, px):
    """Negative adjoint of :func:`_grad`: <grad u, p> == -<u, div p>."""
    out = np.zeros_like(pz)
    out[0] = pz[0]
    out[1:-1] = pz[1:-1] - pz[:-2]
    out[-1] = -pz[-2]
    out[:, 0] += py[:, 0]
    out[:, 1:-1] += py[:, 1:-1] - py[:, :-2]
    out[:, -1] += -py[:, -2]
    out[:, :, 0] += px[:, :, 0]
    out[:, :, 1:-1] += px[:, :, 1:-1] - px[:, :, :-2]
    out[:, :, -1] += -px[:, :, -2]
    return out


def _require_nondegenerate(volume: Volume):
    nz = volume.n_slices
    if nz < 2 or volume.grid.n_y < 2 or volume.grid.n_x < 2:
        raise ValueError("TV needs at least 2 voxels per axis")


def tv_norm(volume: Volume) -> float:
    """Isotropic total variation: sum of sqrt(dx^2 + dy^2 + dz^2) over
    forward differences, one-sided zero at upper boundaries."""
    _require_nondegenerate(volume)
    gz, gy, gx = _grad(volume.data.astype(np.float64))
    return float(np.sum(np.sqrt(gz * gz + gy * gy + gx * gx)))


def _tv_subgradient(u):
    gz, gy, gx = _grad(u)
    mag = np.sqrt(gz * gz + gy * gy + gx * gx + TV_SMOOTH_EPS)
    return -_div(gz / mag, gy / mag, gx / mag)


def minimize_tv_gradient(volume: Volume, params: TvParams) -> Volume:
    """Normalized-gradient descent on the smoothed TV functional.

    Runs ``inner_iters`` steps of v <- v - step * g / ||g||; a vanishing
    gradient (flat volume) skips the step, making constants fixed points.
    """
    if params.minimizer is not TvMinimizer.GRADIENT_DESCENT:
        raise ValueError("params.minimizer must be GRADIENT_DESCENT")
    if params.step <= 0:
        raise ValueError("step must be positive")
    _require_nondegenerate(volume)
    u = volume.data.astype(np.float64)
    for _ in range(params.inner_iters):
        g = _tv_subgradient(u)
        norm = np.sqrt(np.sum(g * g))
        if norm < _ZERO_NORM:
            break
        u -= params.step * g / norm
    return Volume(volume.grid, u.astype(np.float32), volume.slab_range)


def minimize_rof(volume: Volume, params: TvParams) -> Volume:
    """Dual gradient projection for argmin ||u - f||^2 / 2 + lam * TV(u).

    The dual field p is updated with fixed step tau = 1/12 and projected
    onto the pointwise unit ball every iteration, so it never leaves it.
    """
    if params.minimizer is not TvMinimizer.ROF:
        raise ValueError("params.minimizer must be ROF")
    if params.lam <= 0:
        raise ValueError("lambda must be positive")
    _require_nondegenerate(volume)
    f = volume.data.astype(np.float64)
    shape = (3,) + f.shape
    p = np.zeros(shape)
    for _ in range(params.inner_iters):
        _rof_iterate(f, p, params.lam)
    u = f + params.lam * _div(p[0], p[1], p[2])
    return Volume(volume.grid, u.astype(np.float32), volume.slab_range)


def _rof_iterate(f, p, lam):
    u = f + lam * _div(p[0], p[1], p[2])
    gz, gy, gx = _grad(u)
    p[0] += (ROF_DUAL_STEP / lam) * gz
    p[1] += (ROF_DUAL_STEP / lam) * gy
    p[2] += (ROF_DUAL_STEP / lam) * gx
    mag = np.sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2])
    np.maximum(mag, 1.0, out=mag)
    p /= mag


def make_halo_slabs(n_z: int, n_slabs: int, halo_depth: int) -> list[HaloSlab]:
    """Equal ceil-division cores with halo windows clipped at the volume."""
    size = -(-n_z // n_slabs)
    slabs = []
    for z0 in range(0, n_z, size):
        z1 = min(z0 + size, n_z)
        slabs.append(HaloSlab(
            (z0, z1), halo_depth,
            (max(0, z0 - halo_depth), min(n_z, z1 + halo_depth))))
    return slabs


def _plan_slab_count(volume: Volume, pool: DevicePool, params: TvParams,
                     usable_fraction: float) -> int:
    copies = 5 if params.minimizer is TvMinimizer.ROF else 1
    d = params.effective_halo()
    grid = volume.grid
    plane = grid.n_x * grid.n_y * SCALAR_BYTES * (1 + copies)
    usable = usable_fraction * pool.min_budget
    max_core = int(usable // plane) - 2 * d
    if max_core < 1:
        raise InfeasiblePlanError(
            f"one slice plus {2 * d} halo slices and {copies} working copies "
            f"exceed the usable budget")
    wanted = -(-grid.n_z // max_core)
    return min(grid.n_z, max(len(pool), wanted))


def split_minimize(volume: Volume, pool: DevicePool, params: TvParams,
                   usable_fraction: float = 0.95) -> Volume:
    """Run the configured minimizer over per-device halo slabs.

    Epochs of ``inner_iters`` purely local iterations alternate with halo
    exchanges; when a slab plus the minimizer's working copies exceeds the
    device budget, more slabs than devices are planned and each device
    streams its queue through host storage every epoch.  With ExactGlobal
    the result matches the monolithic minimizer run for
    outer_syncs * inner_iters iterations.
    """
    d = params.effective_halo()
    if params.inner_iters > d:
        raise ValueError(
            f"halo depth {d} cannot cover {params.inner_iters} inner iterations")
    _require_nondegenerate(volume)
    if volume.slab_range != (0, volume.grid.n_z):
        raise ValueError("split minimization needs the full volume")

    n_slabs = _plan_slab_count(volume, pool, params, usable_fraction)
    slabs = make_halo_slabs(volume.grid.n_z, n_slabs, d)
    total_voxels = volume.data.size

    if params.minimizer is TvMinimizer.GRADIENT_DESCENT:
        if params.step <= 0:
            raise ValueError("step must be positive")
        u = volume.data.astype(np.float64)
        for _ in range(params.outer_syncs):
            snapshot = u.copy()  # halo exchange: ghosts become neighbour cores
            local = [snapshot[s.window[0]:s.window[1]].copy() for s in slabs]
            for _ in range(params.inner_iters):
                grads = [_tv_subgradient(w) for w in local]
                if params.norm_mode is NormMode.EXACT_GLOBAL:
                    total = 0.0
                    for s, g in zip(slabs, grads):
                        core = g[s.core_in_window]
                        total += np.sum(core * core)
                    norm = np.sqrt(total)
                    norms = [norm] * len(slabs)
                else:
                    norms = []
                    for s, (w, g) in zip(slabs, zip(local, grads)):
                        local_norm = np.sqrt(np.sum(g * g))
                        norms.append(local_norm
                                     * np.sqrt(total_voxels / w.size))
                for w, g, norm in zip(local, grads, norms):
                    if norm >= _ZERO_NORM:
                        w -= params.step * g / norm
            for s, w in zip(slabs, local):
                u[s.core_range[0]:s.core_range[1]] = w[s.core_in_window]
        return Volume(volume.grid, u.astype(np.float32), volume.slab_range)

    if params.lam <= 0:
        raise ValueError("lambda must be positive")
    f = volume.data.astype(np.float64)
    p = np.zeros((3,) + f.shape)
    for _ in range(params.outer_syncs):
        p_snap = p.copy()
        for s in slabs:
            w0, w1 = s.window
            f_loc = f[w0:w1]
            p_loc = p_snap[:, w0:w1].copy()
            for _ in range(params.inner_iters):
                _rof_iterate(f_loc, p_loc, params.lam)
            core = s.core_in_window
            p[:, s.core_range[0]:s.core_range[1]] = p_loc[:, core]
    u = f + params.lam * _div(p[0], p[1], p[2])
    return Volume(volume.grid, u.astype(np.float32), volume.slab_range)
