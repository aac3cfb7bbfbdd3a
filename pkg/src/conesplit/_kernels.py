"""Numba CPU kernels for the projection operators.

All kernels walk one chunk of angles against one axial slab of the volume.
Stored arrays are float32; every per-ray / per-voxel accumulation runs in
float64 so that results do not depend on how the work was chunked or split:

* forward kernels own disjoint output pixels (parallel over detector tiles),
* the FDK backprojector owns disjoint voxel columns (parallel over x-y
  tiles) and extends each voxel's float64 accumulation chain angle by
  angle, so any chunking of the angle loop reproduces the same bits,
* the matched backprojector is a scatter (the exact adjoint of the
  interpolated forward kernel) and therefore runs single-threaded in a
  fixed ray order.

Geometry arrives flattened: per-angle source positions, the world position
of detector pixel (0, 0) and the pixel step vectors along u and v.
"""

import math

import numpy as np
from numba import njit, prange

# Ray/box clipping below this segment length (mm) is treated as a graze.
_EPS_LEN = 1e-12


@njit(cache=True)
def _clip_box(ox, oy, oz, dx, dy, dz, bx0, by0, bz0, bx1, by1, bz1):
    """Slab-method ray/box clip; returns (t0, t1), miss when t0 > t1."""
    t0 = -1e300
    t1 = 1e300
    if dx != 0.0:
        ta = (bx0 - ox) / dx
        tb = (bx1 - ox) / dx
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    elif ox < bx0 or ox > bx1:
        return 1.0, -1.0
    if dy != 0.0:
        ta = (by0 - oy) / dy
        tb = (by1 - oy) / dy
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    elif oy < by0 or oy > by1:
        return 1.0, -1.0
    if dz != 0.0:
        ta = (bz0 - oz) / dz
        tb = (bz1 - oz) / dz
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    elif oz < bz0 or oz > bz1:
        return 1.0, -1.0
    if t0 > t1:
        return 1.0, -1.0
    return t0, t1


@njit(cache=True)
def _siddon_ray(vol, ox, oy, oz, dx, dy, dz,
                gx0, gy0, gz0, vx, vy, vz, nx, ny, nz, z_lo, z_hi):
    """Exact intersection-length integral of one ray over slab [z_lo, z_hi).

    Segments between consecutive voxel-boundary crossings are attributed to
    the voxel containing the segment midpoint, which realizes half-open
    [low, high) voxel intervals and skips zero-length grazes.
    """
    bz_lo = gz0 + z_lo * vz
    bz_hi = gz0 + z_hi * vz
    t0, t1 = _clip_box(ox, oy, oz, dx, dy, dz,
                       gx0, gy0, bz_lo,
                       gx0 + nx * vx, gy0 + ny * vy, bz_hi)
    if t0 > t1 or t1 - t0 <= _EPS_LEN:
        return 0.0

    # Next boundary-crossing parameter and its increment, per axis.  For a
    # rising axis the next crossing is the upper face of the entry cell,
    # for a falling axis its lower face; an entry point exactly on a face
    # belongs to the cell above it ([low, high) intervals).
    px = ox + t0 * dx
    py = oy + t0 * dy
    pz = oz + t0 * dz
    if dx > 0.0:
        tnx = t0 + ((math.floor((px - gx0) / vx) + 1.0) * vx - (px - gx0)) / dx
        dtx = vx / dx
    elif dx < 0.0:
        tnx = t0 + ((math.ceil((px - gx0) / vx) - 1.0) * vx - (px - gx0)) / dx
        dtx = -vx / dx
    else:
        tnx = 1e300
        dtx = 0.0
    if dy > 0.0:
        tny = t0 + ((math.floor((py - gy0) / vy) + 1.0) * vy - (py - gy0)) / dy
        dty = vy / dy
    elif dy < 0.0:
        tny = t0 + ((math.ceil((py - gy0) / vy) - 1.0) * vy - (py - gy0)) / dy
        dty = -vy / dy
    else:
        tny = 1e300
        dty = 0.0
    if dz > 0.0:
        tnz = t0 + ((math.floor((pz - gz0) / vz) + 1.0) * vz - (pz - gz0)) / dz
        dtz = vz / dz
    elif dz < 0.0:
        tnz = t0 + ((math.ceil((pz - gz0) / vz) - 1.0) * vz - (pz - gz0)) / dz
        dtz = -vz / dz
    else:
        tnz = 1e300
        dtz = 0.0

    acc = 0.0
    t = t0
    while t < t1 - _EPS_LEN:
        tn = tnx
        if tny < tn:
            tn = tny
        if tnz < tn:
            tn = tnz
        if tn > t1:
            tn = t1
        seg = tn - t
        if seg > _EPS_LEN:
            tm = 0.5 * (t + tn)
            ix = int(math.floor((ox + tm * dx - gx0) / vx))
            iy = int(math.floor((oy + tm * dy - gy0) / vy))
            iz = int(math.floor((oz + tm * dz - gz0) / vz))
            if 0 <= ix < nx and 0 <= iy < ny and z_lo <= iz < z_hi:
                acc += seg * vol[iz - z_lo, iy, ix]
        if tn >= t1:
            break
        # advance every axis whose crossing we just consumed
        if tnx <= tn:
            tnx += dtx
        if tny <= tn:
            tny += dty
        if tnz <= tn:
            tnz += dtz
        t = tn
    return acc


@njit(parallel=True, cache=True)
def siddon_forward_chunk(vol, srcs, det00, ustep, vstep,
                         gx0, gy0, gz0, vx, vy, vz, nx, ny, nz, z_lo, z_hi,
                         tile_u, tile_v, out):
    """Siddon forward projection of a slab for one chunk of angles.

    out[a, v, u]; work is dispatched in tile_u x tile_v pixel tiles per
    angle sheet; each pixel is written exactly once.
    """
    n_a, n_v, n_u = out.shape
    tiles_u = (n_u + tile_u - 1) // tile_u
    tiles_v = (n_v + tile_v - 1) // tile_v
    for tidx in prange(tiles_u * tiles_v):
        tv = tidx // tiles_u
        tu = tidx % tiles_u
        u_begin = tu * tile_u
        v_begin = tv * tile_v
        u_end = min(u_begin + tile_u, n_u)
        v_end = min(v_begin + tile_v, n_v)
        for a in range(n_a):
            ox = srcs[a, 0]
            oy = srcs[a, 1]
            oz = srcs[a, 2]
            for v in range(v_begin, v_end):
                for u in range(u_begin, u_end):
                    tx = det00[a, 0] + u * ustep[a, 0] + v * vstep[a, 0]
                    ty = det00[a, 1] + u * ustep[a, 1] + v * vstep[a, 1]
                    tz = det00[a, 2] + u * ustep[a, 2] + v * vstep[a, 2]
                    dx = tx - ox
                    dy = ty - oy
                    dz = tz - oz
                    inv = 1.0 / math.sqrt(dx * dx + dy * dy + dz * dz)
                    dx *= inv
                    dy *= inv
                    dz *= inv
                    out[a, v, u] = _siddon_ray(
                        vol, ox, oy, oz, dx, dy, dz,
                        gx0, gy0, gz0, vx, vy, vz, nx, ny, nz, z_lo, z_hi)


@njit(cache=True)
def _ray_steps(ox, oy, oz, dx, dy, dz, gx0, gy0, gz0,
               vx, vy, vz, nx, ny, nz, step_max):
    """Sample count and per-ray step for the interpolated integral.

    The t-range always comes from the full grid box (not the slab), so the
    sample positions of a ray are identical no matter which slab evaluates
    it; slab restriction happens purely by masking gathered voxels.
    """
    t0, t1 = _clip_box(ox, oy, oz, dx, dy, dz,
                       gx0, gy0, gz0,
                       gx0 + nx * vx, gy0 + ny * vy, gz0 + nz * vz)
    length = t1 - t0
    if t0 > t1 or length <= _EPS_LEN:
        return 0.0, 0.0, 0
    n_steps = int(math.ceil(length / step_max))
    return t0, length / n_steps, n_steps


@njit(parallel=True, cache=True)
def interp_forward_chunk(vol, srcs, det00, ustep, vstep,
                         gx0, gy0, gz0, vx, vy, vz, nx, ny, nz, z_lo, z_hi,
                         step_max, tile_u, tile_v, out):
    """Trilinear-sampled forward projection of a slab for one angle chunk."""
    n_a, n_v, n_u = out.shape
    tiles_u = (n_u + tile_u - 1) // tile_u
    tiles_v = (n_v + tile_v - 1) // tile_v
    for tidx in prange(tiles_u * tiles_v):
        tv = tidx // tiles_u
        tu = tidx % tiles_u
        u_begin = tu * tile_u
        v_begin = tv * tile_v
        u_end = min(u_begin + tile_u, n_u)
        v_end = min(v_begin + tile_v, n_v)
        for a in range(n_a):
            ox = srcs[a, 0]
            oy = srcs[a, 1]
            oz = srcs[a, 2]
            for v in range(v_begin, v_end):
                for u in range(u_begin, u_end):
                    tx = det00[a, 0] + u * ustep[a, 0] + v * vstep[a, 0]
                    ty = det00[a, 1] + u * ustep[a, 1] + v * vstep[a, 1]
                    tz = det00[a, 2] + u * ustep[a, 2] + v * vstep[a, 2]
                    dx = tx - ox
                    dy = ty - oy
                    dz = tz - oz
                    inv = 1.0 / math.sqrt(dx * dx + dy * dy + dz * dz)
                    dx *= inv
                    dy *= inv
                    dz *= inv
                    t0, step, n_steps = _ray_steps(
                        ox, oy, oz, dx, dy, dz, gx0, gy0, gz0,
                        vx, vy, vz, nx, ny, nz, step_max)
                    acc = 0.0
                    for k in range(n_steps):
                        t = t0 + (k + 0.5) * step
                        qx = (ox + t * dx - gx0) / vx - 0.5
                        qy = (oy + t * dy - gy0) / vy - 0.5
                        qz = (oz + t * dz - gz0) / vz - 0.5
                        ix0 = int(math.floor(qx))
                        iy0 = int(math.floor(qy))
                        iz0 = int(math.floor(qz))
                        wx = qx - ix0
                        wy = qy - iy0
                        wz = qz - iz0
                        for cz in range(2):
                            zi = iz0 + cz
                            if zi < z_lo or zi >= z_hi:
                                continue
                            fz = wz if cz == 1 else 1.0 - wz
                            for cy in range(2):
                                yi = iy0 + cy
                                if yi < 0 or yi >= ny:
                                    continue
                                fy = wy if cy == 1 else 1.0 - wy
                                for cx in range(2):
                                    xi = ix0 + cx
                                    if xi < 0 or xi >= nx:
                                        continue
                                    fx = wx if cx == 1 else 1.0 - wx
                                    acc += fz * fy * fx * vol[zi - z_lo, yi, xi]
                    out[a, v, u] = acc * step


@njit(cache=True)
def matched_backward_chunk(vol64, proj, srcs, det00, ustep, vstep,
                           gx0, gy0, gz0, vx, vy, vz, nx, ny, nz,
                           z_lo, z_hi, step_max):
    """Exact adjoint of interp_forward_chunk: scatter into a float64 slab.

    Runs single-threaded so every voxel sees its contributions in the fixed
    (angle, v, u, sample, corner) order regardless of chunking.
    """
    n_a, n_v, n_u = proj.shape
    for a in range(n_a):
        ox = srcs[a, 0]
        oy = srcs[a, 1]
        oz = srcs[a, 2]
        for v in range(n_v):
            for u in range(n_u):
                val = proj[a, v, u]
                if val == 0.0:
                    continue
                tx = det00[a, 0] + u * ustep[a, 0] + v * vstep[a, 0]
                ty = det00[a, 1] + u * ustep[a, 1] + v * vstep[a, 1]
                tz = det00[a, 2] + u * ustep[a, 2] + v * vstep[a, 2]
                dx = tx - ox
                dy = ty - oy
                dz = tz - oz
                inv = 1.0 / math.sqrt(dx * dx + dy * dy + dz * dz)
                dx *= inv
                dy *= inv
                dz *= inv
                t0, step, n_steps = _ray_steps(
                    ox, oy, oz, dx, dy, dz, gx0, gy0, gz0,
                    vx, vy, vz, nx, ny, nz, step_max)
                scaled = val * step
                for k in range(n_steps):
                    t = t0 + (k + 0.5) * step
                    qx = (ox + t * dx - gx0) / vx - 0.5
                    qy = (oy + t * dy - gy0) / vy - 0.5
                    qz = (oz + t * dz - gz0) / vz - 0.5
                    ix0 = int(math.floor(qx))
                    iy0 = int(math.floor(qy))
                    iz0 = int(math.floor(qz))
                    wx = qx - ix0
                    wy = qy - iy0
                    wz = qz - iz0
                    for cz in range(2):
                        zi = iz0 + cz
                        if zi < z_lo or zi >= z_hi:
                            continue
                        fz = wz if cz == 1 else 1.0 - wz
                        for cy in range(2):
                            yi = iy0 + cy
                            if yi < 0 or yi >= ny:
                                continue
                            fy = wy if cy == 1 else 1.0 - wy
                            for cx in range(2):
                                xi = ix0 + cx
                                if xi < 0 or xi >= nx:
                                    continue
                                fx = wx if cx == 1 else 1.0 - wx
                                vol64[zi - z_lo, yi, xi] += scaled * fz * fy * fx


@njit(parallel=True, cache=True)
def fdk_backward_chunk(vol64, proj, coss, sins, dso, dsd,
                       du, dv, off_u, off_v,
                       gx0, gy0, gz0, vx, vy, vz, z_lo,
                       tile_x, tile_y):
    """Voxel-driven backprojection with (dso/U)^2 distance weights.

    vol64 is the slab's float64 accumulator, shape (z_hi - z_lo, ny, nx).
    Parallel over x-y tiles: a voxel column is owned by exactly one tile.
    Each voxel extends its own accumulation chain one angle at a time, so
    results are independent of how the angle loop is chunked.
    """
    n_a, n_v, n_u = proj.shape
    n_slab, ny, nx = vol64.shape
    tiles_x = (nx + tile_x - 1) // tile_x
    tiles_y = (ny + tile_y - 1) // tile_y
    for tidx in prange(tiles_x * tiles_y):
        ty_ = tidx // tiles_x
        tx_ = tidx % tiles_x
        x_begin = tx_ * tile_x
        y_begin = ty_ * tile_y
        x_end = min(x_begin + tile_x, nx)
        y_end = min(y_begin + tile_y, ny)
        for iy in range(y_begin, y_end):
            wy = gy0 + (iy + 0.5) * vy
            for ix in range(x_begin, x_end):
                wx = gx0 + (ix + 0.5) * vx
                for iz in range(n_slab):
                    wz = gz0 + (z_lo + iz + 0.5) * vz
                    acc = vol64[iz, iy, ix]
                    for a in range(n_a):
                        c = coss[a]
                        s = sins[a]
                        big_u = dso - (wx * c + wy * s)
                        if big_u <= 1e-9:
                            continue
                        mag = dsd / big_u
                        uf = ((-wx * s + wy * c) * mag - off_u) / du \
                            + 0.5 * (n_u - 1)
                        vf = (wz * mag - off_v) / dv + 0.5 * (n_v - 1)
                        u0 = int(math.floor(uf))
                        v0 = int(math.floor(vf))
                        fu = uf - u0
                        fv = vf - v0
                        val = 0.0
                        if 0 <= v0 < n_v:
                            if 0 <= u0 < n_u:
                                val += (1.0 - fv) * (1.0 - fu) * proj[a, v0, u0]
                            if 0 <= u0 + 1 < n_u:
                                val += (1.0 - fv) * fu * proj[a, v0, u0 + 1]
                        if 0 <= v0 + 1 < n_v:
                            if 0 <= u0 < n_u:
                                val += fv * (1.0 - fu) * proj[a, v0 + 1, u0]
                            if 0 <= u0 + 1 < n_u:
                                val += fv * fu * proj[a, v0 + 1, u0 + 1]
                        if val != 0.0:
                            w = dso / big_u
                            acc += w * w * val
                    vol64[iz, iy, ix] = acc


def warm_up():
    """Trigger JIT compilation of all kernels on a tiny problem."""
    vol = np.zeros((2, 2, 2), dtype=np.float32)
    vol64 = np.zeros((2, 2, 2), dtype=np.float64)
    proj = np.zeros((1, 2, 2), dtype=np.float32)
    srcs = np.array([[4.0, 0.0, 0.0]])
    det00 = np.array([[-4.0, -0.5, -0.5]])
    ustep = np.array([[0.0, 1.0, 0.0]])
    vstep = np.array([[0.0, 0.0, 1.0]])
    out = np.zeros((1, 2, 2), dtype=np.float32)
    args = (srcs, det00, ustep, vstep,
            -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 2, 2, 2, 0, 2)
    siddon_forward_chunk(vol, *args, 9, 9, out)
    interp_forward_chunk(vol, *args, 0.5, 9, 9, out)
    matched_backward_chunk(vol64, proj, *args, 0.5)
    fdk_backward_chunk(vol64, proj, np.array([1.0]), np.array([0.0]),
                       4.0, 8.0, 1.0, 1.0, 0.0, 0.0,
                       -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 0, 16, 32)
