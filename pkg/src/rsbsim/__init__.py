"""rsbsim: a deterministic simulator for return-stack speculation.

A small machine model - toy ISA, two-level caches, a return-stack buffer
with three underflow policies, and a speculative engine with checkpointed
rollback - plus an operating-system model and end-to-end demonstrations of
return-misprediction side channels and their mitigations.
"""

from .core import (CoreConfig, ExecutionError, Machine, RunResult,
                   run_sequential)
from .harden import (apply_fence_after_call, apply_retpoline,
                     verify_equivalence)
from .isa import (AssemblyError, Instruction, Op, Program, RegisterFile,
                  assemble, disassemble)
from .kernel import SchedConfig, System
from .mem import CacheConfig, CacheHierarchy, PhysicalMemory
from .predictor import BranchTargetBuffer, ReturnStackBuffer, RsbVariant
from .sidechannel import ProbeArray, calibrate_threshold

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "AssemblyError",
    "BranchTargetBuffer",
    "CacheConfig",
    "CacheHierarchy",
    "CoreConfig",
    "ExecutionError",
    "Instruction",
    "Machine",
    "Op",
    "PhysicalMemory",
    "ProbeArray",
    "Program",
    "RegisterFile",
    "ReturnStackBuffer",
    "RsbVariant",
    "RunResult",
    "SchedConfig",
    "System",
    "apply_fence_after_call",
    "apply_retpoline",
    "assemble",
    "calibrate_threshold",
    "disassemble",
    "run_sequential",
    "verify_equivalence",
]
