"""Cycle-stepped simulator of an FPGA two-phase-locking transaction accelerator."""

from .engine import RunMetrics, SimConfig, run, run_simulation
from .modes import LockMode, LockRequest, LockResponse, compatible, group_join
from .workload import WorkloadSpec, generate

__all__ = [
    "LockMode",
    "LockRequest",
    "LockResponse",
    "RunMetrics",
    "SimConfig",
    "WorkloadSpec",
    "compatible",
    "generate",
    "group_join",
    "run",
    "run_simulation",
]

__version__ = "0.1.0"
