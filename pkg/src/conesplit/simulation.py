"""Discrete-event time simulation of planned passes.

Models the cost of a plan without touching data.  Each device owns a
serial compute engine and a serial copy engine; the host orchestration
loop is a third serial resource.  Pinned-memory transfers occupy only the
device's copy engine and therefore overlap kernels; pageable transfers
occupy the host loop and both engines of their device, so nothing else on
that device (and no other pageable transfer anywhere) proceeds while they
run.  Page-locking the host image costs pin_cost_rate per byte on the
host loop, paid again on unpinning.

Durations: kernel = compute_rate x slab voxels x chunk angles; transfer =
bytes / bandwidth (class per the plan's pin flag); the on-device
accumulation of staged partial projections costs 1e-4 of its producing
kernel, which is the measured ratio scale for such gather kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .geometry import ScanGeometry
from .scheduler import (
    HOST,
    SCALAR_BYTES,
    DevicePool,
    ExecutionTrace,
    OpKind,
    SplitPlan,
    TraceEvent,
)

__all__ = ["simulate"]

ACCUMULATE_KERNEL_RATIO = 1e-4


@dataclass
class _Op:
    device: str  # trace device id (devN or host)
    kind: str
    payload: str
    bytes: int
    duration: float
    resources: tuple[str, ...]
    deps: list[int] = field(default_factory=list)


class _OpList:
    def __init__(self):
        self.ops: list[_Op] = []

    def add(self, op: _Op) -> int:
        self.ops.append(op)
        return len(self.ops) - 1


def _run_schedule(ops: list[_Op]) -> list[TraceEvent]:
    """Greedy earliest-start list scheduling over serial resources.

    Ties break on issue order, which realizes FIFO behaviour per engine.
    """
    n = len(ops)
    end = [0.0] * n
    done = [False] * n
    free: dict[str, float] = {}
    events: list[TraceEvent | None] = [None] * n
    remaining = set(range(n))
    while remaining:
        best = None
        best_start = None
        for i in sorted(remaining):
            op = ops[i]
            if any(not done[d] for d in op.deps):
                continue
            ready = max((end[d] for d in op.deps), default=0.0)
            start = max([ready] + [free.get(r, 0.0) for r in op.resources])
            if best_start is None or start < best_start - 1e-15:
                best, best_start = i, start
        if best is None:
            raise RuntimeError("simulation deadlock: cyclic dependencies")
        op = ops[best]
        stop = best_start + op.duration
        for r in op.resources:
            free[r] = stop
        end[best] = stop
        done[best] = True
        events[best] = TraceEvent(op.device, op.kind, op.payload,
                                  best_start, stop, op.bytes)
        remaining.remove(best)
    return sorted(events, key=lambda e: (e.start, e.device, e.payload))


def _transfer_resources(dev: int, pinned: bool) -> tuple[str, ...]:
    if pinned:
        return (f"copy{dev}",)
    return (HOST, f"copy{dev}", f"compute{dev}")


def simulate(plan: SplitPlan, geometry: ScanGeometry,
             pool: DevicePool) -> ExecutionTrace:
    """Simulate one planned pass and return its trace (makespan included)."""
    grid = geometry.voxel_grid
    det = geometry.detector
    plane_voxels = grid.n_x * grid.n_y
    pixel_bytes = det.n_u * det.n_v * SCALAR_BYTES
    image_bytes = grid.n_z * plane_voxels * SCALAR_BYTES
    pinned = plan.pin_host_image

    ol = _OpList()
    pin_id = None
    if pinned:
        rate = max(d.pin_cost_rate for d in pool.devices)
        pin_id = ol.add(_Op(HOST, "Pin", "image", image_bytes,
                            rate * image_bytes, (HOST,)))

    high_water: dict[str, int] = {}
    if plan.op_kind is OpKind.FORWARD:
        _build_forward(ol, plan, pool, plane_voxels, pixel_bytes, pinned,
                       pin_id, high_water)
    else:
        _build_backward(ol, plan, pool, plane_voxels, pixel_bytes, pinned,
                        pin_id, high_water)

    if pinned:
        rate = max(d.pin_cost_rate for d in pool.devices)
        ol.add(_Op(HOST, "Unpin", "image", image_bytes, rate * image_bytes,
                   (HOST,), deps=list(range(len(ol.ops)))))

    events = _run_schedule(ol.ops)
    makespan = max((e.end for e in events), default=0.0)
    return ExecutionTrace(events, high_water, makespan, simulated=True)


def _build_forward(ol: _OpList, plan: SplitPlan, pool: DevicePool,
                   plane_voxels: int, pixel_bytes: int, pinned: bool,
                   pin_id, high_water: dict[str, int]):
    prev_split_ops: list[int] = [] if pin_id is None else [pin_id]
    max_slab = max(z1 - z0 for z0, z1 in plan.slab_ranges) * plane_voxels
    drains: dict[int, list[int]] = {}  # device -> drain op per global chunk
    accums: dict[int, list[int]] = {}
    for dev in range(len(pool)):
        chunks = plan.device_chunks(dev)
        if chunks:
            high_water[f"dev{dev}"] = (
                max_slab * SCALAR_BYTES
                + plan.buffer_count * plan.chunk_angles * pixel_bytes)
        drains[dev] = []
        accums[dev] = []

    for si, (z0, z1) in enumerate(plan.slab_ranges):
        slab_voxels = (z1 - z0) * plane_voxels
        slab_bytes = slab_voxels * SCALAR_BYTES
        split_ops: list[int] = []
        for dev, spec in enumerate(pool.devices):
            chunks = plan.device_chunks(dev)
            if not chunks:
                continue
            bw = spec.bw_pinned if pinned else spec.bw_pageable
            tin_slab = ol.add(_Op(
                f"dev{dev}", "TransferIn", f"slab{si}", slab_bytes,
                slab_bytes / bw, _transfer_resources(dev, pinned),
                deps=list(prev_split_ops)))
            split_ops.append(tin_slab)
            for ci, (c0, c1) in enumerate(chunks):
                tag = f"s{si}.c{ci}"
                gchunk = si * len(chunks) + ci
                cbytes = (c1 - c0) * pixel_bytes
                kdur = spec.compute_rate(OpKind.FORWARD) * slab_voxels * (c1 - c0)
                deps = [tin_slab]
                if gchunk >= 2:
                    deps.append(drains[dev][gchunk - 2])
                kernel = ol.add(_Op(f"dev{dev}", "Kernel", tag, 0, kdur,
                                    (f"compute{dev}",), deps=deps))
                producer = kernel
                if si > 0:
                    pdeps = [tin_slab]
                    if accums[dev]:
                        pdeps.append(accums[dev][-1])
                    tin_part = ol.add(_Op(
                        f"dev{dev}", "TransferIn", "partial." + tag, cbytes,
                        cbytes / bw, _transfer_resources(dev, pinned),
                        deps=pdeps))
                    acc = ol.add(_Op(
                        f"dev{dev}", "Accumulate", tag, cbytes,
                        ACCUMULATE_KERNEL_RATIO * kdur, (f"compute{dev}",),
                        deps=[kernel, tin_part]))
                    accums[dev].append(acc)
                    split_ops.extend([tin_part, acc])
                    producer = acc
                drain = ol.add(_Op(
                    f"dev{dev}", "TransferOut", "out." + tag, cbytes,
                    cbytes / bw, _transfer_resources(dev, pinned),
                    deps=[producer]))
                drains[dev].append(drain)
                split_ops.extend([kernel, drain])
        prev_split_ops = split_ops


def _build_backward(ol: _OpList, plan: SplitPlan, pool: DevicePool,
                    plane_voxels: int, pixel_bytes: int, pinned: bool,
                    pin_id, high_water: dict[str, int]):
    queues = plan.slab_queues(len(pool))
    for dev, spec in enumerate(pool.devices):
        if not queues[dev]:
            continue
        bw = spec.bw_pinned if pinned else spec.bw_pageable
        slab_peak = max(
            plan.slab_ranges[si][1] - plan.slab_ranges[si][0]
            for si in queues[dev]) * plane_voxels * SCALAR_BYTES
        high_water[f"dev{dev}"] = (
            slab_peak + plan.buffer_count * plan.chunk_angles * pixel_bytes)
        kernels: list[int] = []
        prev_drain = pin_id
        for si in queues[dev]:
            z0, z1 = plan.slab_ranges[si]
            slab_voxels = (z1 - z0) * plane_voxels
            slab_bytes = slab_voxels * SCALAR_BYTES
            last_kernel = None
            for ci, (c0, c1) in enumerate(plan.angle_assignment):
                tag = f"s{si}.c{ci}"
                gchunk = len(kernels)
                cbytes = (c1 - c0) * pixel_bytes
                deps = []
                if prev_drain is not None and ci == 0:
                    deps.append(prev_drain)
                if gchunk >= 2:
                    deps.append(kernels[gchunk - 2])
                tin = ol.add(_Op(
                    f"dev{dev}", "TransferIn", "chunk." + tag, cbytes,
                    cbytes / bw, _transfer_resources(dev, pinned), deps=deps))
                kdur = spec.compute_rate(OpKind.BACKWARD) * slab_voxels * (c1 - c0)
                kdeps = [tin]
                if last_kernel is not None:
                    kdeps.append(last_kernel)
                kernel = ol.add(_Op(f"dev{dev}", "Kernel", tag, 0, kdur,
                                    (f"compute{dev}",), deps=kdeps))
                kernels.append(kernel)
                last_kernel = kernel
            prev_drain = ol.add(_Op(
                f"dev{dev}", "TransferOut", f"slab{si}", slab_bytes,
                slab_bytes / bw, _transfer_resources(dev, pinned),
                deps=[last_kernel]))
