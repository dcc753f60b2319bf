import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d3m.blockmat import BlockLayout, block_pattern, symbolic_block_factorize
from d3m.errors import GraphError
from d3m.problem import generate_grid_problem, partition_domains, split_domain_dofs
from d3m.taskgraph import (DUAL, PRIMAL, RECOVERY, Task, TaskGraph, PTask, agglomerate, build_task_graph,
                           critical_path, expected_counts)

from oracles import longest_path


def _chain_symbolic(nb):
    return symbolic_block_factorize({(k, k) for k in range(nb)} | {(k + 1, k) for k in range(nb - 1)})


def _graph(dims, nd, agg="none"):
    s = generate_grid_problem(dims)
    part = partition_domains(s, nd)
    doms = split_domain_dofs(s, part)
    layout = BlockLayout.from_domains(doms, part)
    symb = symbolic_block_factorize(block_pattern(doms, layout), layout.num_blocks)
    return agglomerate(build_task_graph(symb, doms, layout), agg), symb


def _brute_counts(symb):
    """Replay the right-looking loop nest and count each kernel call."""
    counts = {"blk_factorize": 0, "blk_trisolve": 0, "blk_update": 0}
    nb = symb.num_blocks
    filled = np.zeros((nb, nb), bool)
    for i, j in symb.fill_pattern:
        filled[i, j] = True
    for k in range(nb):
        counts["blk_factorize"] += 1
        rows = [i for i in range(k + 1, nb) if filled[i, k]]
        counts["blk_trisolve"] += len(rows)
        counts["blk_update"] += sum(1 for a in rows for b in rows if a >= b)
    return counts


def test_chain_of_four_blocks():
    symb = _chain_symbolic(4)
    g = build_task_graph(symb, [], block_sizes=[3, 3, 3, 3])
    assert (g.count("blk_factorize"), g.count("blk_trisolve"), g.count("blk_update")) == (4, 3, 3)
    merged = agglomerate(g)
    # every update (k+1, k+1, k) joins trisolve (k+1, k)
    assert len([t for t in merged.tasks if t.phase == DUAL]) == len([t for t in g.tasks if t.phase == DUAL]) - 3
    assert sorted(p.id for p in merged.ptasks) == sorted(p.id for p in g.ptasks)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.floats(0.0, 0.7), st.integers(0, 2 ** 31))
def test_counts_match_loop_nest(nb, density, seed):
    rng = np.random.default_rng(seed)
    pattern = {(k, k) for k in range(nb)} | {(i, j) for i in range(nb) for j in range(i) if rng.random() < density}
    symb = symbolic_block_factorize(pattern, nb)
    g = build_task_graph(symb, [], block_sizes=list(rng.integers(1, 5, nb)))
    want = _brute_counts(symb)
    assert want == expected_counts(symb)
    assert all(g.count(k) == v for k, v in want.items())
    for policy in ("none", "per_block_column"):
        _check_dependencies(agglomerate(g, policy))


def _check_dependencies(g):
    """Every reader runs after the last writer of what it reads (RAW), in task order."""
    order = g.topological_order()
    pos = {t: i for i, t in enumerate(order)}
    where = {}
    for t in g.tasks:
        for idx, p in enumerate(t.ptasks):
            where[p.id] = (pos[t.id], idx)
    last = {}
    for p in sorted(g.ptasks, key=lambda p: p.id):
        for key in p.reads:
            assert where[last[key]] < where[p.id], (key, last[key], p.id)
        for key in p.writes:
            last[key] = p.id
    # updates into one block are chained in ascending k
    reach = _reachability(g)
    by_dest = {}
    for p in g.ptasks:
        if p.kind == "blk_update":
            by_dest.setdefault(p.operands[:2], []).append(p)
    for ps in by_dest.values():
        ps.sort(key=lambda p: p.operands[2])
        for a, b in zip(ps, ps[1:]):
            ta, tb = _task_of(g, a.id), _task_of(g, b.id)
            assert ta == tb or tb in reach[ta]


def _task_of(g, pid):
    return next(t.id for t in g.tasks if any(p.id == pid for p in t.ptasks))


def _reachability(g):
    reach = {t: set() for t in range(len(g.tasks))}
    for u in reversed(g.topological_order()):
        for v in g.succs[u]:
            reach[u] |= {v} | reach[v]
    return reach


@pytest.mark.parametrize("dims,nd", [((4, 4), 4), ((12, 12), 9), ((6, 6, 6), 8)])
def test_grid_graphs(dims, nd):
    g, symb = _graph(dims, nd)
    merged, _ = _graph(dims, nd, "per_block_column")
    for graph in (g, merged):
        _check_dependencies(graph)
        phases = [t.phase for t in graph.tasks]
        assert phases.count(PRIMAL) == nd and phases.count(RECOVERY) == nd
        # phases appear in pipeline order along any topological order
        rank = {PRIMAL: 0, DUAL: 1, RECOVERY: 2}
        assert all(rank[graph.tasks[u].phase] <= rank[graph.tasks[v].phase] for u, v in graph.edges)
    assert len(merged.tasks) < len(g.tasks)
    assert all(b > 0 for b in g.edges.values())


def test_four_quadrant_example():
    g, symb = _graph((4, 4), 4)
    # three block rows (domains owning interface DOFs), all coupled
    assert symb.num_blocks == 3 and len(symb.fill_pattern) == 6
    assert (g.count("blk_factorize"), g.count("blk_trisolve"), g.count("blk_update")) == (3, 3, 4)
    assert g.count("fwd_solve_blk") == g.count("bwd_solve_blk") == 3


def test_cycle_detection():
    p = [PTask(i, "blk_factorize", (i,), ("LD", i), DUAL) for i in range(3)]
    tasks = [Task(i, (p[i],), DUAL) for i in range(3)]
    edges = {(0, 1): 8, (1, 2): 8, (2, 1): 8}
    g = TaskGraph(tasks, edges, {e: () for e in edges}, {})
    with pytest.raises(GraphError) as err:
        g.topological_order()
    assert sorted(err.value.cycle) == [1, 2]


def test_critical_path_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 15))
        edges = {(u, v): 8 for u in range(n) for v in range(u + 1, n) if rng.random() < 0.3}
        w = rng.uniform(0.1, 2.0, n)
        tasks = [Task(i, (PTask(i, "blk_factorize", (i,), ("LD", i), DUAL, weight=float(w[i])),), DUAL)
                 for i in range(n)]
        g = TaskGraph(tasks, edges, {e: () for e in edges}, {})
        length, path = critical_path(g)
        assert abs(length - longest_path(list(w), list(edges))) <= 1e-12
        assert abs(sum(w[t] for t in path) - length) <= 1e-12
        assert all((a, b) in edges for a, b in zip(path, path[1:]))


def test_exports():
    g, _ = _graph((6, 6), 4, "per_block_column")
    dot = g.to_dot()
    assert dot.startswith("digraph") and dot.count("->") == len(g.edges)
    obj = json.loads(g.to_json())
    assert len(obj["tasks"]) == len(g.tasks) and len(obj["edges"]) == len(g.edges)


def test_unknown_policy():
    g, _ = _graph((4, 4), 2)
    with pytest.raises(GraphError):
        agglomerate(g, "per_row")
