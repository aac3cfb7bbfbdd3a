"""Split planning for out-of-core execution on memory-budgeted devices.

A plan answers, for one operator pass: how many equal axial slabs the
volume must be cut into so that a slab plus the projection staging buffers
fits each device's usable memory, which angles each device owns (forward)
or which angle chunks it streams (backward), and whether the host image
should be page-locked.  Plans are plain data; they are consumed by the
real executor and by the time simulator.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .geometry import ScanGeometry
from .projectors import BackwardTileSpec, ForwardTileSpec

__all__ = [
    "DeviceSpec",
    "DevicePool",
    "OpKind",
    "SplitPlan",
    "TraceEvent",
    "ExecutionTrace",
    "InfeasiblePlanError",
    "BudgetExceededError",
    "plan_forward",
    "plan_backward",
    "check_trace",
    "SCALAR_BYTES",
    "HOST",
]

SCALAR_BYTES = 4  # stored volumes and projections are float32

# Device id used for host-side events (pinning, unpinning).
HOST = "host"

DEFAULT_USABLE_FRACTION = 0.95


class InfeasiblePlanError(ValueError):
    """No slab split satisfies the device memory budget."""


class BudgetExceededError(RuntimeError):
    """A worker's allocation ledger overran its device budget."""


class OpKind(enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass(frozen=True)
class DeviceSpec:
    """An abstract memory-budgeted worker.

    Bandwidths model host<->device copies for pageable and page-locked
    host memory; ``pin_cost_rate`` is the simulated cost of page-locking
    one byte; the compute rates are seconds per (voxel x angle) work unit,
    one per operator.
    """

    memory_budget: int
    bw_pageable: float = 4e9
    bw_pinned: float = 12e9
    pin_cost_rate: float = 3e-10
    compute_rate_forward: float = 2e-10
    compute_rate_backward: float = 2e-10

    def __post_init__(self):
        if self.memory_budget <= 0:
            raise ValueError("memory budget must be positive")
        if not (self.bw_pinned >= self.bw_pageable > 0):
            raise ValueError("require bw_pinned >= bw_pageable > 0")

    def compute_rate(self, op: OpKind) -> float:
        return (self.compute_rate_forward if op is OpKind.FORWARD
                else self.compute_rate_backward)


@dataclass(frozen=True)
class DevicePool:
    devices: tuple[DeviceSpec, ...]

    def __post_init__(self):
        if len(self.devices) < 1:
            raise ValueError("device pool must not be empty")
        object.__setattr__(self, "devices", tuple(self.devices))

    def __len__(self) -> int:
        return len(self.devices)

    @property
    def min_budget(self) -> int:
        # Heterogeneous pools are planned against the smallest device.
        return min(d.memory_budget for d in self.devices)


@dataclass(frozen=True)
class SplitPlan:
    """Partitioning of one operator pass under the device budgets.

    ``slab_ranges`` are contiguous, ordered, pairwise-disjoint [z0, z1)
    ranges covering the whole volume.  For a forward pass
    ``angle_assignment`` holds one [a0, a1) range per device (disjoint,
    covering all angles); for a backward pass it is the sequence of angle
    chunks every device streams.  Backward slabs go to devices round-robin
    by slab index.
    """

    op_kind: OpKind
    n_splits: int
    slab_ranges: tuple[tuple[int, int], ...]
    angle_assignment: tuple[tuple[int, int], ...]
    chunk_angles: int
    buffer_count: int
    pin_host_image: bool
    per_device_bytes_peak: int

    def __post_init__(self):
        if self.n_splits != len(self.slab_ranges):
            raise ValueError("n_splits inconsistent with slab ranges")
        prev_end = None
        for z0, z1 in self.slab_ranges:
            if z1 <= z0 or (prev_end is not None and z0 != prev_end):
                raise ValueError("slab ranges must be contiguous and ordered")
            prev_end = z1
        if self.slab_ranges and self.slab_ranges[0][0] != 0:
            raise ValueError("slab ranges must start at 0")
        if self.buffer_count not in (2, 3):
            raise ValueError("buffer count must be 2 or 3")
        if self.chunk_angles < 1:
            raise ValueError("chunk_angles must be >= 1")

    @property
    def n_z(self) -> int:
        return self.slab_ranges[-1][1]

    def device_chunks(self, device_index: int) -> list[tuple[int, int]]:
        """Angle chunks one device processes, in ascending angle order."""
        if self.op_kind is OpKind.FORWARD:
            a0, a1 = self.angle_assignment[device_index]
            return [(c0, min(c0 + self.chunk_angles, a1))
                    for c0 in range(a0, a1, self.chunk_angles)]
        return list(self.angle_assignment)

    def slab_queues(self, n_devices: int) -> list[list[int]]:
        """Round-robin assignment of slab indices to device queues."""
        queues: list[list[int]] = [[] for _ in range(n_devices)]
        for i in range(self.n_splits):
            queues[i % n_devices].append(i)
        return queues


def _slab_ranges(n_z: int, n_splits: int) -> tuple[tuple[int, int], ...]:
    """Equal ceil-division slabs; only the last may be smaller."""
    size = -(-n_z // n_splits)
    return tuple((z0, min(z0 + size, n_z)) for z0 in range(0, n_z, size))


def _even_angle_ranges(n_angles: int, n_devices: int) -> tuple[tuple[int, int], ...]:
    bounds = [n_angles * k // n_devices for k in range(n_devices + 1)]
    return tuple((bounds[k], bounds[k + 1]) for k in range(n_devices))


def _plan(op: OpKind, geometry: ScanGeometry, pool: DevicePool,
          chunk_angles: int, usable_fraction: float) -> SplitPlan:
    grid = geometry.voxel_grid
    det = geometry.detector
    n_angles = geometry.n_angles
    chunk = min(chunk_angles, n_angles)
    plane_bytes = grid.n_x * grid.n_y * SCALAR_BYTES
    chunk_bytes = chunk * det.n_u * det.n_v * SCALAR_BYTES
    usable = usable_fraction * pool.min_budget

    if op is OpKind.FORWARD and grid.n_z * plane_bytes + 2 * chunk_bytes <= usable:
        n_splits, buffers = 1, 2
    else:
        buffers = 3 if op is OpKind.FORWARD else 2
        if op is OpKind.BACKWARD and grid.n_z * plane_bytes + 2 * chunk_bytes <= usable:
            n_splits = 1
        else:
            max_slices = int((usable - buffers * chunk_bytes) // plane_bytes)
            if max_slices < 1:
                raise InfeasiblePlanError(
                    f"one slice plus {buffers} projection buffers "
                    f"({plane_bytes + buffers * chunk_bytes} B) exceeds the "
                    f"usable budget ({usable:.0f} B)")
            n_splits = -(-grid.n_z // max_slices)

    ranges = _slab_ranges(grid.n_z, n_splits)
    slab_peak = max(z1 - z0 for z0, z1 in ranges) * plane_bytes
    if op is OpKind.FORWARD:
        assignment = _even_angle_ranges(n_angles, len(pool))
    else:
        assignment = tuple((c0, min(c0 + chunk, n_angles))
                           for c0 in range(0, n_angles, chunk))
    return SplitPlan(
        op_kind=op,
        n_splits=n_splits,
        slab_ranges=ranges,
        angle_assignment=assignment,
        chunk_angles=chunk,
        buffer_count=buffers,
        pin_host_image=(n_splits > 1) or len(pool) > 2,
        per_device_bytes_peak=slab_peak + buffers * chunk_bytes,
    )


def plan_forward(geometry: ScanGeometry, pool: DevicePool,
                 tiles: ForwardTileSpec = ForwardTileSpec(),
                 usable_fraction: float = DEFAULT_USABLE_FRACTION) -> SplitPlan:
    """Split a forward pass: angles spread evenly over devices, the volume
    cut into the fewest slabs that fit beside the projection buffers (two
    when a single slab suffices, three once partial accumulation needs a
    staging buffer)."""
    return _plan(OpKind.FORWARD, geometry, pool, tiles.chunk_angles,
                 usable_fraction)


def plan_backward(geometry: ScanGeometry, pool: DevicePool,
                  tiles: BackwardTileSpec = BackwardTileSpec(),
                  usable_fraction: float = DEFAULT_USABLE_FRACTION) -> SplitPlan:
    """Split a backward pass: every device streams all angle chunks through
    two rotating buffers; slabs are dealt round-robin to device queues."""
    return _plan(OpKind.BACKWARD, geometry, pool, tiles.chunk_angles,
                 usable_fraction)


# ---------------------------------------------------------------------------
# Execution traces


@dataclass(frozen=True)
class TraceEvent:
    device: str
    kind: str  # TransferIn | TransferOut | Kernel | Accumulate | Pin | Unpin
    payload: str
    start: float
    end: float
    bytes: int

    def format(self) -> str:
        return (f"device={self.device} kind={self.kind} "
                f"payload={self.payload} start={self.start:.6f} "
                f"end={self.end:.6f} bytes={self.bytes}")


@dataclass
class ExecutionTrace:
    """Timestamped event log of one pass plus per-device peak allocation."""

    events: list[TraceEvent]
    high_water: dict[str, int]
    makespan: float
    simulated: bool

    def format_events(self) -> str:
        return "\n".join(e.format() for e in self.events)


def check_trace(trace: ExecutionTrace, pool: DevicePool) -> None:
    """Assert the structural trace invariants.

    Budget high-water marks are checked for every trace; kernel overlap and
    accumulate-after-dependency orderings only make sense against modeled
    time and are enforced for simulated traces.
    """
    for dev, peak in trace.high_water.items():
        if dev == HOST:
            continue
        budget = pool.devices[int(dev[3:])].memory_budget
        if peak > budget:
            raise AssertionError(
                f"{dev} peak allocation {peak} exceeds budget {budget}")
    if not trace.simulated:
        return
    by_device: dict[str, list[TraceEvent]] = {}
    for e in trace.events:
        by_device.setdefault(e.device, []).append(e)
    tol = 1e-12
    for dev, events in by_device.items():
        kernels = sorted((e for e in events if e.kind in ("Kernel", "Accumulate")),
                         key=lambda e: e.start)
        for a, b in zip(kernels[:-1], kernels[1:]):
            if b.start < a.end - tol:
                raise AssertionError(
                    f"{dev}: kernels {a.payload} and {b.payload} overlap")
        by_payload = {(e.kind, e.payload): e for e in events}
        for e in events:
            if e.kind != "Accumulate":
                continue
            producer = by_payload.get(("Kernel", e.payload))
            staged = by_payload.get(("TransferIn", "partial." + e.payload))
            if producer is None or staged is None:
                raise AssertionError(
                    f"{dev}: accumulate {e.payload} lacks its dependencies")
            if e.start < producer.end - tol or e.start < staged.end - tol:
                raise AssertionError(
                    f"{dev}: accumulate {e.payload} starts before its inputs")
