"""End-to-end orchestration: partition, build and weigh the graph, schedule, execute."""
import math
import time
from dataclasses import dataclass

import numpy as np

from .blockmat import BlockLayout, block_pattern, symbolic_block_factorize
from .costmodel import KnnSamples, nominal_tables, weigh_graph
from .executor import ExecState, execute_parallel, execute_sequential
from .primal import DENSE_CROSSOVER
from .problem import partition_domains, split_domain_dofs
from .scheduler import list_schedule
from .taskgraph import PRIMAL, RECOVERY, agglomerate, build_task_graph


@dataclass(frozen=True, eq=False)
class Plan:
    """Everything derived from the problem before any numerical work."""

    system: object
    partition: object
    domains: tuple
    layout: object
    symbolic: object
    graph: object
    state: object


def plan(system, num_domains, partitioner="grid", agglomeration="per_block_column",
         tables=None, samples=None, crossover=DENSE_CROSSOVER, partition=None):
    """Partition, build the agglomerated task graph and weigh it; ``tables=None`` uses flop counts."""
    if partition is None:
        partition = partition_domains(system, num_domains, strategy=partitioner)
    domains = tuple(split_domain_dofs(system, partition))
    layout = BlockLayout.from_domains(list(domains), partition)
    symb = symbolic_block_factorize(block_pattern(domains, layout), layout.num_blocks)
    g = build_task_graph(symb, domains, layout, nrhs=system.nrhs)
    g = agglomerate(g, "none" if agglomeration in (None, "none") else "per_block_column")
    # without calibration, flop counts still give the scheduler sensible relative weights
    g = weigh_graph(g, tables or nominal_tables(), samples=samples, domains=domains)
    state = ExecState(domains, layout, symb, system.n, system.nrhs, crossover)
    return Plan(system, partition, domains, layout, symb, g, state)


@dataclass(frozen=True, eq=False)
class SolveResult:
    x: np.ndarray
    trace: object
    schedule: object
    plan: Plan
    residual: float


def relative_residual(system, x, domains=None):
    """``||b - A x|| / ||b||``; the regularization shift acts on interior DOFs of ``domains``."""
    b = system.rhs
    r = b - system.matrix @ x
    if system.shift and domains:
        interior = np.concatenate([dp.interior for dp in domains])
        r[interior] -= system.shift * x[interior]
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(r) / nb) if nb > 0 else float(np.linalg.norm(r))


def run_plan(p, workers=1, memory_mode="fast", sequential=False, bandwidth=math.inf, latency=0.0,
             jitter_seed=None, timeout=60.0, trace_stream=None):
    sched = list_schedule(p.graph, workers, bandwidth, latency)
    if sequential:
        x, trace = execute_sequential(p.graph, p.state, memory_mode, trace_stream=trace_stream)
    else:
        x, trace = execute_parallel(p.graph, sched, p.state, memory_mode, jitter_seed, timeout, trace_stream)
    return SolveResult(x, trace, sched, p, relative_residual(p.system, x, p.domains))


def solve(system, num_domains, workers=1, partitioner="grid", agglomeration="per_block_column",
          memory_mode="fast", tables=None, samples=None, sequential=False, **kwargs):
    """Plan and execute in one call."""
    return run_plan(plan(system, num_domains, partitioner, agglomeration, tables, samples),
                    workers, memory_mode, sequential, **kwargs)


def measured_samples(result, samples=None):
    """Per-domain task durations of a finished run, as nearest-neighbour samples."""
    samples = samples if samples is not None else {"primal": KnnSamples(), "recover": KnnSamples()}
    g, trace = result.plan.graph, result.trace
    for t in g.tasks:
        head = t.ptasks[0]
        if head.kind not in ("interior_factor", "recover"):
            continue
        s, f = trace.intervals[t.id]
        dp = result.plan.state.domain(head.operands[0])
        kind = "primal" if t.phase == PRIMAL else "recover"
        if t.phase not in (PRIMAL, RECOVERY):
            continue
        samples.setdefault(kind, KnnSamples()).add(dp.features(), max(f - s, 1e-9))
    return samples


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
