"""Out-of-core execution of the projection operators over a device pool.

One orchestrator thread builds per-device command queues (transfer-in,
kernel, accumulate, transfer-out) and one worker thread per device drains
its queue, keeping an allocation ledger against the device budget and
timestamping every command into the pass's trace.  Devices never share
mutable state: a forward pass gives each device a disjoint angle range of
the host accumulator, a backward pass gives it disjoint slabs, and workers
report completion or failure through a message queue.

Stored data is float32; the host-side accumulators are float64 so results
do not depend on the split count (per-voxel and per-ray accumulation
chains are extended in the same order no matter how work was chunked).
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import ScanGeometry
from .projectors import (
    BackwardTileSpec,
    ForwardTileSpec,
    ProjectionMethod,
    ProjectionStack,
    Volume,
    WeightMode,
    backproject_chunk_into,
    forward_project_slab,
)
from .scheduler import (
    HOST,
    SCALAR_BYTES,
    BudgetExceededError,
    DevicePool,
    ExecutionTrace,
    OpKind,
    SplitPlan,
    TraceEvent,
)

__all__ = ["execute_forward", "execute_backward"]


@dataclass
class _Command:
    kind: str
    payload: str
    bytes: int
    fn: Callable[[], None]
    alloc: int = 0
    free: int = 0


class _DeviceWorker(threading.Thread):
    """Drains one device's command queue and keeps its memory ledger."""

    def __init__(self, index: int, budget: int, done: queue.Queue,
                 clock: Callable[[], float]):
        super().__init__(name=f"dev{index}", daemon=True)
        self.device_id = f"dev{index}"
        self.budget = budget
        self.commands: queue.Queue = queue.Queue()
        self.done = done
        self.clock = clock
        self.events: list[TraceEvent] = []
        self.allocated = 0
        self.high_water = 0

    def run(self):
        try:
            while True:
                cmd = self.commands.get()
                if cmd is None:
                    break
                if cmd.free:
                    self.allocated -= cmd.free
                if cmd.alloc:
                    self.allocated += cmd.alloc
                    self.high_water = max(self.high_water, self.allocated)
                    if self.allocated > self.budget:
                        raise BudgetExceededError(
                            f"{self.device_id}: {self.allocated} B allocated "
                            f"exceeds budget {self.budget} B")
                t0 = self.clock()
                cmd.fn()
                self.events.append(TraceEvent(
                    self.device_id, cmd.kind, cmd.payload, t0, self.clock(),
                    cmd.bytes))
            self.done.put((self.device_id, None))
        except BaseException as exc:  # propagate through the message queue
            self.done.put((self.device_id, exc))


class _Pass:
    """Shared scaffolding for one operator pass across the pool."""

    def __init__(self, pool: DevicePool, plan: SplitPlan, host_bytes: int):
        self.pool = pool
        self.plan = plan
        self.t_zero = time.monotonic()
        self.clock = lambda: time.monotonic() - self.t_zero
        self.done: queue.Queue = queue.Queue()
        self.workers = [
            _DeviceWorker(i, spec.memory_budget, self.done, self.clock)
            for i, spec in enumerate(pool.devices)
        ]
        self.host_events: list[TraceEvent] = []
        self.host_bytes = host_bytes

    def pin(self, kind: str):
        # Real-mode pinning is a no-op; the trace still charges the
        # modeled page-locking cost so pin overhead is visible in it.
        rate = max(d.pin_cost_rate for d in self.pool.devices)
        t0 = self.clock()
        self.host_events.append(TraceEvent(
            HOST, kind, "image", t0, t0 + rate * self.host_bytes,
            self.host_bytes))

    def run(self) -> ExecutionTrace:
        if self.plan.pin_host_image:
            self.pin("Pin")
        for w in self.workers:
            w.start()
        for w in self.workers:
            w.commands.put(None)
        failures = []
        for _ in self.workers:
            _, exc = self.done.get()
            if exc is not None:
                failures.append(exc)
        for w in self.workers:
            w.join()
        if failures:
            raise failures[0]
        if self.plan.pin_host_image:
            self.pin("Unpin")
        events = sorted(
            [e for w in self.workers for e in w.events] + self.host_events,
            key=lambda e: (e.start, e.device))
        high = {w.device_id: w.high_water for w in self.workers}
        makespan = (max(e.end for e in events) - min(e.start for e in events)
                    if events else 0.0)
        return ExecutionTrace(events, high, makespan, simulated=False)


def _validate_plan(plan: SplitPlan, op: OpKind, geometry: ScanGeometry,
                   pool: DevicePool):
    if plan.op_kind is not op:
        raise ValueError(f"plan is for {plan.op_kind}, not {op}")
    if plan.n_z != geometry.voxel_grid.n_z:
        raise ValueError("plan slab ranges do not cover the volume")
    if op is OpKind.FORWARD:
        if len(plan.angle_assignment) != len(pool):
            raise ValueError("plan angle assignment does not match the pool")
        covered = sorted(plan.angle_assignment)
        pos = 0
        for a0, a1 in covered:
            if a0 != pos:
                raise ValueError("forward plan angles are not a partition")
            pos = max(pos, a1)
        if pos != geometry.n_angles:
            raise ValueError("forward plan does not cover all angles")
    else:
        if plan.angle_assignment[-1][1] != geometry.n_angles:
            raise ValueError("backward plan does not cover all angles")


def execute_forward(volume: Volume, geometry: ScanGeometry, pool: DevicePool,
                    plan: SplitPlan,
                    method: ProjectionMethod = ProjectionMethod.SIDDON,
                    tiles: ForwardTileSpec = ForwardTileSpec(),
                    trace_sink: list | None = None) -> ProjectionStack:
    """Run a planned forward pass: broadcast each slab to every device,
    stream each device's angle chunks through the rotating buffers, and
    accumulate split contributions in ascending slab order.

    Equals the monolithic slab projection of the full volume; appends the
    pass's :class:`ExecutionTrace` to ``trace_sink`` when given.
    """
    _validate_plan(plan, OpKind.FORWARD, geometry, pool)
    if volume.slab_range != (0, geometry.voxel_grid.n_z):
        raise ValueError("forward execution needs the full host volume")
    det = geometry.detector
    n_angles = geometry.n_angles
    acc = np.zeros((n_angles, det.n_v, det.n_u))

    run = _Pass(pool, plan, volume.nbytes)
    chunk_pixels = plan.chunk_angles * det.n_u * det.n_v
    for dev, worker in enumerate(run.workers):
        chunks = plan.device_chunks(dev)
        if not chunks:
            continue
        worker.allocated += plan.buffer_count * chunk_pixels * SCALAR_BYTES
        worker.high_water = worker.allocated
        prev_slab_bytes = 0
        for si, (z0, z1) in enumerate(plan.slab_ranges):
            slab = Volume(volume.grid, volume.data[z0:z1], (z0, z1))
            slab_bytes = slab.nbytes
            state: dict = {}

            def stage_slab(slab=slab, state=state):
                state["slab"] = slab  # device copy is a view: host-backed

            worker.commands.put(_Command(
                "TransferIn", f"slab{si}", slab_bytes, stage_slab,
                alloc=slab_bytes, free=prev_slab_bytes))
            prev_slab_bytes = slab_bytes
            for ci, (c0, c1) in enumerate(chunks):
                tag = f"s{si}.c{ci}"
                cbytes = (c1 - c0) * det.n_u * det.n_v * SCALAR_BYTES

                def kernel(state=state, c0=c0, c1=c1):
                    state["buffer"] = forward_project_slab(
                        state["slab"], geometry, (c0, c1), method, tiles).data

                worker.commands.put(_Command("Kernel", tag, 0, kernel))
                if si > 0:
                    def stage_partial(state=state, c0=c0, c1=c1):
                        state["partial"] = acc[c0:c1].copy()

                    def accumulate(state=state):
                        state["partial"] += state["buffer"]
                        state["buffer"] = state["partial"]

                    worker.commands.put(_Command(
                        "TransferIn", "partial." + tag, cbytes, stage_partial))
                    worker.commands.put(_Command(
                        "Accumulate", tag, cbytes, accumulate))

                def drain(state=state, c0=c0, c1=c1):
                    acc[c0:c1] = state["buffer"]

                worker.commands.put(_Command(
                    "TransferOut", "out." + tag, cbytes, drain))

    trace = run.run()
    if trace_sink is not None:
        trace_sink.append(trace)
    return ProjectionStack(det, acc.astype(np.float32), (0, n_angles))


def execute_backward(projections: ProjectionStack, geometry: ScanGeometry,
                     pool: DevicePool, plan: SplitPlan,
                     mode: WeightMode = WeightMode.FDK,
                     tiles: BackwardTileSpec = BackwardTileSpec(),
                     trace_sink: list | None = None) -> Volume:
    """Run a planned backward pass: each device streams every angle chunk
    through two buffers into each slab of its round-robin queue, then
    drains the finished slab to the host volume.

    Equals the monolithic slab backprojection; appends the pass's
    :class:`ExecutionTrace` to ``trace_sink`` when given.
    """
    _validate_plan(plan, OpKind.BACKWARD, geometry, pool)
    grid = geometry.voxel_grid
    if projections.angle_range != (0, geometry.n_angles):
        raise ValueError("backward execution needs the full projection set")
    det = projections.detector
    out = np.zeros((grid.n_z, grid.n_y, grid.n_x), np.float32)

    run = _Pass(pool, plan, grid.n_z * grid.n_y * grid.n_x * SCALAR_BYTES)
    chunk_pixels = plan.chunk_angles * det.n_u * det.n_v
    queues = plan.slab_queues(len(pool))
    for dev, worker in enumerate(run.workers):
        if not queues[dev]:
            continue
        worker.allocated += plan.buffer_count * chunk_pixels * SCALAR_BYTES
        worker.high_water = worker.allocated
        prev_slab_bytes = 0
        for si in queues[dev]:
            z0, z1 = plan.slab_ranges[si]
            slab_bytes = (z1 - z0) * grid.n_y * grid.n_x * SCALAR_BYTES
            state = {"acc": None}

            def alloc_slab(state=state, z0=z0, z1=z1):
                state["acc"] = np.zeros((z1 - z0, grid.n_y, grid.n_x))

            # Backprojection starts from a zeroed device slab; the
            # allocation is charged as a zero-byte transfer-in event.
            worker.commands.put(_Command(
                "TransferIn", f"slab{si}", 0, alloc_slab,
                alloc=slab_bytes, free=prev_slab_bytes))
            prev_slab_bytes = slab_bytes
            for ci, (c0, c1) in enumerate(plan.angle_assignment):
                tag = f"s{si}.c{ci}"
                cbytes = (c1 - c0) * det.n_u * det.n_v * SCALAR_BYTES

                def stage_chunk(state=state, c0=c0, c1=c1):
                    state["chunk"] = ProjectionStack(
                        det, projections.data[c0:c1], (c0, c1))

                def kernel(state=state, z0=z0, z1=z1):
                    backproject_chunk_into(
                        state["acc"], state["chunk"], geometry, (z0, z1),
                        mode, tiles)

                worker.commands.put(_Command(
                    "TransferIn", "chunk." + tag, cbytes, stage_chunk))
                worker.commands.put(_Command("Kernel", tag, 0, kernel))

            def drain(state=state, z0=z0, z1=z1):
                out[z0:z1] = state["acc"].astype(np.float32)

            worker.commands.put(_Command(
                "TransferOut", f"slab{si}", slab_bytes, drain))

    trace = run.run()
    if trace_sink is not None:
        trace_sink.append(trace)
    return Volume(grid, out, (0, grid.n_z))
