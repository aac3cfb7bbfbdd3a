"""Command-line frontend.

Subcommands: ``phantom`` (generate test volumes), ``project`` /
``backproject`` (single operator passes over a device pool), ``recon``
(FDK / CGLS / OS-SART), ``plan`` (print a split plan), ``simulate`` (emit
the simulated trace, one event per line) and ``bench`` (scaling table of
simulated makespans).  Any invalid input exits nonzero with a one-line
diagnostic and no partial output files are left behind.
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from . import fileio
from .algorithms import (
    Algorithm,
    ReconConfig,
    cgls,
    fdk,
    format_residuals,
    os_sart,
)
from .execution import execute_backward, execute_forward
from .geometry import DetectorGrid, ScanGeometry, VoxelGrid
from .phantoms import PhantomKind, phantom
from .projectors import (
    BackwardTileSpec,
    ForwardTileSpec,
    ProjectionMethod,
    WeightMode,
)
from .regularization import NormMode, TvMinimizer, TvParams
from .scheduler import (
    DEFAULT_USABLE_FRACTION,
    DevicePool,
    DeviceSpec,
    OpKind,
    plan_backward,
    plan_forward,
)
from .simulation import simulate

_DEVICE_KEYS = {
    "mem": ("memory_budget", int),
    "bwpage": ("bw_pageable", float),
    "bwpin": ("bw_pinned", float),
    "pincost": ("pin_cost_rate", float),
    "ratefwd": ("compute_rate_forward", float),
    "ratebwd": ("compute_rate_backward", float),
}


def _parse_device(text: str) -> DeviceSpec:
    kwargs = {}
    for item in text.split(","):
        if not item:
            continue
        if "=" not in item:
            raise ValueError(f"device field {item!r} is not key=value")
        key, value = item.split("=", 1)
        if key not in _DEVICE_KEYS:
            raise ValueError(f"unknown device field {key!r}")
        name, conv = _DEVICE_KEYS[key]
        kwargs[name] = conv(float(value))
    if "memory_budget" not in kwargs:
        raise ValueError("device needs mem=<bytes>")
    return DeviceSpec(**kwargs)


def _pool(args) -> DevicePool:
    specs = [_parse_device(d) for d in (args.device or [])]
    if not specs:
        specs = [DeviceSpec(memory_budget=11 * 2**30)]
    return DevicePool(tuple(specs))


def _triple(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(float(p) for p in parts)


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(round(v)) for v in _triple(text))


def _add_device_flag(p):
    p.add_argument("--device", action="append", metavar="mem=...,bwpage=...,bwpin=...",
                   help="add a device to the pool (repeatable)")


def _add_geometry_flags(p):
    p.add_argument("--geometry", help="sidecar file carrying a geometry block")
    p.add_argument("--dso", type=float, default=None)
    p.add_argument("--dsd", type=float, default=None)
    p.add_argument("--n-angles", type=int, default=None)
    p.add_argument("--angle-span", type=float, default=2 * math.pi)
    p.add_argument("--grid", type=_int_tuple, default=None, metavar="NX,NY,NZ")
    p.add_argument("--voxel-size", type=_triple, default=(1.0, 1.0, 1.0))
    p.add_argument("--origin-offset", type=_triple, default=(0.0, 0.0, 0.0))
    p.add_argument("--det", type=_int_tuple, default=None, metavar="NU,NV")
    p.add_argument("--pixel-size", type=_triple, default=None)
    p.add_argument("--det-offset", type=_triple, default=(0.0, 0.0))


def _geometry_from(args, grid: VoxelGrid | None = None) -> ScanGeometry:
    if args.geometry:
        return fileio.read_geometry(args.geometry.removesuffix(".meta"))
    if grid is None:
        if args.grid is None:
            raise ValueError("need --grid or --geometry")
        grid = VoxelGrid(*args.grid, voxel_size=args.voxel_size,
                         origin_offset=args.origin_offset)
    if args.dso is None or args.dsd is None or args.n_angles is None:
        raise ValueError("need --dso, --dsd and --n-angles (or --geometry)")
    if args.det is None:
        raise ValueError("need --det NU,NV (or --geometry)")
    if args.pixel_size is None:
        # cover the magnified grid footprint by default
        mag = args.dsd / args.dso
        ext = grid.extent
        diag = math.sqrt(ext[0] ** 2 + ext[1] ** 2)
        px = mag * diag / args.det[0]
        pv = mag * max(diag, ext[2]) / args.det[1]
        pixel = (px, pv)
    else:
        pixel = args.pixel_size
    det = DetectorGrid(args.det[0], args.det[1], pixel, args.det_offset)
    angles = tuple(np.linspace(0.0, args.angle_span, args.n_angles,
                               endpoint=False))
    return ScanGeometry(args.dso, args.dsd, angles, grid, det)


def _cmd_phantom(args) -> int:
    grid = VoxelGrid(*args.grid, voxel_size=args.voxel_size,
                     origin_offset=args.origin_offset)
    vol = phantom(PhantomKind(args.kind), grid)
    if args.noise > 0:
        rng = np.random.default_rng(args.seed)
        noisy = vol.data + rng.normal(0.0, args.noise, vol.data.shape)
        vol.data = noisy.astype(np.float32)
    fileio.write_volume(args.out, vol)
    return 0


def _cmd_project(args) -> int:
    vol = fileio.read_volume(args.volume)
    geometry = _geometry_from(args, vol.grid)
    if geometry.voxel_grid != vol.grid:
        raise ValueError("geometry grid does not match the volume file")
    pool = _pool(args)
    tiles = ForwardTileSpec(chunk_angles=args.chunk_angles)
    plan = plan_forward(geometry, pool, tiles, args.usable_fraction)
    stack = execute_forward(vol, geometry, pool, plan,
                            ProjectionMethod(args.method), tiles)
    fileio.write_projections(args.out, stack, geometry)
    return 0


def _cmd_backproject(args) -> int:
    stack, geometry = fileio.read_projections(args.projections)
    pool = _pool(args)
    tiles = BackwardTileSpec(chunk_angles=args.chunk_angles)
    plan = plan_backward(geometry, pool, tiles, args.usable_fraction)
    vol = execute_backward(stack, geometry, pool, plan,
                           WeightMode(args.mode), tiles)
    fileio.write_volume(args.out, vol)
    return 0


def _tv_params(args) -> TvParams | None:
    if not args.tv:
        return None
    minimizer = (TvMinimizer.ROF if args.tv == "rof"
                 else TvMinimizer.GRADIENT_DESCENT)
    return TvParams(minimizer=minimizer, inner_iters=args.tv_iters,
                    step=args.tv_step, lam=args.tv_lambda,
                    norm_mode=NormMode(args.tv_norm))


def _cmd_recon(args) -> int:
    stack, geometry = fileio.read_projections(args.projections)
    pool = _pool(args)
    algorithm = Algorithm(args.algorithm)
    config = ReconConfig(
        pool=pool, algorithm=algorithm, iterations=args.iterations,
        block_size=args.block_size, relaxation=args.relaxation,
        tv=_tv_params(args),
        forward_tiles=ForwardTileSpec(chunk_angles=args.chunk_angles),
        backward_tiles=BackwardTileSpec(),
        usable_fraction=args.usable_fraction)
    residuals = None
    if algorithm is Algorithm.FDK:
        vol = fdk(stack, geometry, pool,
                  usable_fraction=args.usable_fraction)
    elif algorithm is Algorithm.CGLS:
        result = cgls(stack, geometry, config)
        vol, residuals = result.volume, result.residuals
    else:
        vol = os_sart(stack, geometry, config)
    fileio.write_volume(args.out, vol)
    if args.residuals:
        if residuals is None:
            raise ValueError(f"{algorithm.value} emits no residual history")
        with open(args.residuals, "w", encoding="ascii") as fh:
            fh.write(format_residuals(residuals) + "\n")
    return 0


def _make_plan(args):
    geometry = _geometry_from(args)
    pool = _pool(args)
    if args.op == "forward":
        tiles = ForwardTileSpec(chunk_angles=args.chunk_angles or 9)
        plan = plan_forward(geometry, pool, tiles, args.usable_fraction)
    else:
        tiles = BackwardTileSpec(chunk_angles=args.chunk_angles or 32)
        plan = plan_backward(geometry, pool, tiles, args.usable_fraction)
    return geometry, pool, plan


def _cmd_plan(args) -> int:
    _, _, plan = _make_plan(args)
    print(f"op={plan.op_kind.value}")
    print(f"n_splits={plan.n_splits}")
    print(f"slab_ranges={' '.join(f'{z0}:{z1}' for z0, z1 in plan.slab_ranges)}")
    print(f"chunk_angles={plan.chunk_angles}")
    print(f"buffer_count={plan.buffer_count}")
    print(f"pin_host_image={str(plan.pin_host_image).lower()}")
    print(f"per_device_bytes_peak={plan.per_device_bytes_peak}")
    if plan.op_kind is OpKind.FORWARD:
        ranges = " ".join(f"{a0}:{a1}" for a0, a1 in plan.angle_assignment)
        print(f"device_angles={ranges}")
    return 0


def _cmd_simulate(args) -> int:
    geometry, pool, plan = _make_plan(args)
    trace = simulate(plan, geometry, pool)
    print(trace.format_events())
    print(f"# makespan={trace.makespan:.6f}", file=sys.stderr)
    return 0


def _cmd_bench(args) -> int:
    grid = VoxelGrid(args.size, args.size, args.size)
    det = DetectorGrid(args.size, args.size)
    angles = tuple(np.linspace(0.0, 2 * math.pi, args.size, endpoint=False))
    geometry = ScanGeometry(4.0 * args.size, 8.0 * args.size, angles, grid, det)
    base = _parse_device(args.device[0]) if args.device else DeviceSpec(
        memory_budget=11 * 2**30)
    print(f"{'devices':>7} {'fwd_makespan':>14} {'fwd_ratio':>9} "
          f"{'bwd_makespan':>14} {'bwd_ratio':>9}")
    ref = {}
    for n in range(1, args.devices + 1):
        pool = DevicePool(tuple(base for _ in range(n)))
        row = [f"{n:7d}"]
        for op, planner in ((OpKind.FORWARD, plan_forward),
                            (OpKind.BACKWARD, plan_backward)):
            plan = planner(geometry, pool, usable_fraction=args.usable_fraction)
            span = simulate(plan, geometry, pool).makespan
            ref.setdefault(op, span)
            row.append(f"{span:14.4f} {span / ref[op]:9.4f}")
        print(" ".join(row))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conesplit",
        description="out-of-core cone-beam CT reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a test volume")
    p.add_argument("--kind", required=True,
                   choices=[k.value for k in PhantomKind])
    p.add_argument("--grid", type=_int_tuple, required=True)
    p.add_argument("--voxel-size", type=_triple, default=(1.0, 1.0, 1.0))
    p.add_argument("--origin-offset", type=_triple, default=(0.0, 0.0, 0.0))
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_phantom)

    p = sub.add_parser("project", help="forward-project a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--method", default="siddon",
                   choices=[m.value for m in ProjectionMethod])
    p.add_argument("--chunk-angles", type=int, default=9)
    p.add_argument("--usable-fraction", type=float,
                   default=DEFAULT_USABLE_FRACTION)
    p.add_argument("--out", required=True)
    _add_geometry_flags(p)
    _add_device_flag(p)
    p.set_defaults(fn=_cmd_project)

    p = sub.add_parser("backproject", help="backproject a projection stack")
    p.add_argument("--projections", required=True)
    p.add_argument("--mode", default="fdk",
                   choices=[m.value for m in WeightMode])
    p.add_argument("--chunk-angles", type=int, default=32)
    p.add_argument("--usable-fraction", type=float,
                   default=DEFAULT_USABLE_FRACTION)
    p.add_argument("--out", required=True)
    _add_device_flag(p)
    p.set_defaults(fn=_cmd_backproject)

    p = sub.add_parser("recon", help="reconstruct from projections")
    p.add_argument("--projections", required=True)
    p.add_argument("--algorithm", required=True,
                   choices=[a.value for a in Algorithm])
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--block-size", type=int, default=1)
    p.add_argument("--relaxation", type=float, default=1.0)
    p.add_argument("--tv", choices=["gd", "rof"])
    p.add_argument("--tv-iters", type=int, default=20)
    p.add_argument("--tv-step", type=float, default=1e-3)
    p.add_argument("--tv-lambda", type=float, default=0.1)
    p.add_argument("--tv-norm", default="exact_global",
                   choices=[m.value for m in NormMode])
    p.add_argument("--chunk-angles", type=int, default=9)
    p.add_argument("--usable-fraction", type=float,
                   default=DEFAULT_USABLE_FRACTION)
    p.add_argument("--residuals", help="write iter/residual records here")
    p.add_argument("--out", required=True)
    _add_device_flag(p)
    p.set_defaults(fn=_cmd_recon)

    for name, helptext in (("plan", "print the split plan"),
                           ("simulate", "emit the simulated trace")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--op", required=True, choices=["forward", "backward"])
        p.add_argument("--chunk-angles", type=int, default=None)
        p.add_argument("--usable-fraction", type=float,
                       default=DEFAULT_USABLE_FRACTION)
        _add_geometry_flags(p)
        _add_device_flag(p)
        p.set_defaults(fn=_cmd_plan if name == "plan" else _cmd_simulate)

    p = sub.add_parser("bench", help="simulated scaling table")
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--devices", type=int, default=4)
    p.add_argument("--usable-fraction", type=float,
                   default=DEFAULT_USABLE_FRACTION)
    _add_device_flag(p)
    p.set_defaults(fn=_cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
