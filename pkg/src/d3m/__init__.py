"""Domain-decomposition direct solver driven by a statically scheduled block task graph."""
from .errors import (AssemblyError, D3MError, FactorizationError, GraphError, InvalidArgumentError,
                     NotCalibratedError, ParseError, SchedulingError, SingularDomainError)
from .pipeline import plan, run_plan, solve
from .problem import SparseSystem, generate_grid_problem, load_system, partition_domains, save_system

__all__ = [
    "AssemblyError", "D3MError", "FactorizationError", "GraphError", "InvalidArgumentError",
    "NotCalibratedError", "ParseError", "SchedulingError", "SingularDomainError",
    "SparseSystem", "generate_grid_problem", "load_system", "partition_domains", "save_system",
    "plan", "run_plan", "solve",
]
