"""Out-of-core cone-beam CT reconstruction on memory-budgeted device pools."""

from .algorithms import (
    Algorithm,
    CglsResult,
    ReconConfig,
    ScheduledOperators,
    cgls,
    fdk,
    format_residuals,
    os_sart,
)
from .execution import execute_backward, execute_forward
from .geometry import (
    DetectorGrid,
    Ray,
    ScanGeometry,
    VoxelGrid,
    pixel_ray,
    source_position,
)
from .phantoms import PhantomKind, phantom
from .projectors import (
    BackwardTileSpec,
    ForwardTileSpec,
    ProjectionMethod,
    ProjectionStack,
    Volume,
    WeightMode,
    backproject_slab,
    forward_project_slab,
    siddon_trace,
)
from .regularization import (
    HaloSlab,
    NormMode,
    TvMinimizer,
    TvParams,
    minimize_rof,
    minimize_tv_gradient,
    split_minimize,
    tv_norm,
)
from .scheduler import (
    BudgetExceededError,
    DevicePool,
    DeviceSpec,
    ExecutionTrace,
    InfeasiblePlanError,
    OpKind,
    SplitPlan,
    TraceEvent,
    check_trace,
    plan_backward,
    plan_forward,
)
from .simulation import simulate

__version__ = "0.1.0"

__all__ = [
    "Algorithm",
    "BackwardTileSpec",
    "BudgetExceededError",
    "CglsResult",
    "DetectorGrid",
    "DevicePool",
    "DeviceSpec",
    "ExecutionTrace",
    "ForwardTileSpec",
    "HaloSlab",
    "InfeasiblePlanError",
    "NormMode",
    "OpKind",
    "PhantomKind",
    "ProjectionMethod",
    "ProjectionStack",
    "Ray",
    "ReconConfig",
    "ScanGeometry",
    "ScheduledOperators",
    "SplitPlan",
    "TraceEvent",
    "TvMinimizer",
    "TvParams",
    "Volume",
    "VoxelGrid",
    "WeightMode",
    "backproject_slab",
    "cgls",
    "check_trace",
    "execute_backward",
    "execute_forward",
    "fdk",
    "format_residuals",
    "forward_project_slab",
    "minimize_rof",
    "minimize_tv_gradient",
    "os_sart",
    "phantom",
    "pixel_ray",
    "plan_backward",
    "plan_forward",
    "simulate",
    "siddon_trace",
    "source_position",
    "split_minimize",
    "tv_norm",
]
