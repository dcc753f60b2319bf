import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d3m.errors import InvalidArgumentError, SchedulingError
from d3m.scheduler import Schedule, export_gantt, list_schedule, load_gantt, makespan_bounds
from d3m.taskgraph import DUAL, PTask, Task, TaskGraph

from oracles import longest_path, optimal_makespan


def make_graph(weights, edges):
    tasks = [Task(i, (PTask(i, "blk_factorize", (i,), ("LD", i), DUAL, weight=float(w)),), DUAL)
             for i, w in enumerate(weights)]
    edges = dict(edges) if isinstance(edges, dict) else {e: 8 for e in edges}
    return TaskGraph(tasks, edges, {e: () for e in edges}, {})


def random_dag(rng, max_tasks):
    n = int(rng.integers(1, max_tasks + 1))
    w = [float(x) for x in rng.uniform(0.1, 5.0, n)]
    edges = {(u, v): int(rng.integers(1, 10 ** 6)) for u in range(n) for v in range(u + 1, n) if rng.random() < 0.3}
    return make_graph(w, edges)


DIAMOND = make_graph([1, 3, 3, 1], [(0, 1), (0, 2), (1, 3), (2, 3)])


def test_two_independent_tasks():
    assert list_schedule(make_graph([5, 5], []), 2).makespan == 5


def test_diamond():
    assert list_schedule(DIAMOND, 2).makespan == 5
    assert optimal_makespan([1, 3, 3, 1], [(0, 1), (0, 2), (1, 3), (2, 3)], 2) == 5
    assert list_schedule(DIAMOND, 1).makespan == 8
    assert makespan_bounds(DIAMOND, 2) == (5, 8, 5)


def test_bounds_limits():
    assert makespan_bounds(DIAMOND, 4)[0] == 5
    single = make_graph([2.5], [])
    assert makespan_bounds(single, 3)[0] == 2.5
    assert list_schedule(single, 3).makespan == 2.5


def test_invalid_worker_count():
    with pytest.raises(InvalidArgumentError):
        list_schedule(DIAMOND, 0)


def test_communication_delays_remote_successor():
    g = make_graph([1, 1], {(0, 1): 1000})
    s = list_schedule(g, 2, bandwidth=100.0, latency=0.5)
    # moving task 1 would cost 10.5 s of transfer, so both stay on one worker
    assert s.assignment[0] == s.assignment[1] and s.makespan == 2
    g2 = make_graph([1, 1, 4], {(0, 1): 1000, (0, 2): 1000})
    s2 = list_schedule(g2, 2, bandwidth=1e6, latency=0.0)
    assert s2.assignment[1] != s2.assignment[2]
    assert s2.start[[t for t in (1, 2) if s2.assignment[t] != s2.assignment[0]][0]] >= 1 + 1000 / 1e6


def test_insertion_fills_gaps():
    from d3m.scheduler import _earliest_gap
    slots = [(0.0, 1.0, 0), (4.0, 6.0, 1)]
    ends = [1.0, 6.0]
    assert _earliest_gap(slots, ends, 0.0, 3.0) == 1.0
    assert _earliest_gap(slots, ends, 0.0, 3.5) == 6.0
    assert _earliest_gap(slots, ends, 2.0, 2.0) == 2.0
    assert _earliest_gap(slots, ends, 5.0, 1.0) == 6.0
    assert list_schedule(make_graph([1, 10, 1, 1], {(0, 1): 8, (1, 3): 8}), 1).makespan == 13


def test_validate_catches_overlap():
    s = list_schedule(DIAMOND, 2)
    bad = Schedule(2, dict(s.assignment), [[0, 1, 2, 3], []], {0: 0, 1: 1, 2: 1, 3: 4},
                   {0: 1, 1: 4, 2: 4, 3: 5})
    with pytest.raises(SchedulingError):
        bad.validate(DIAMOND)


def test_determinism_and_json_round_trip():
    rng = np.random.default_rng(3)
    g = random_dag(rng, 20)
    a = list_schedule(g, 3, bandwidth=1e8, latency=1e-4)
    b = list_schedule(g, 3, bandwidth=1e8, latency=1e-4)
    assert a.to_json() == b.to_json()
    back = Schedule.from_json(a.to_json())
    assert back.order == a.order and back.assignment == a.assignment and back.validate(g)


def test_gantt_export(tmp_path):
    s = list_schedule(DIAMOND, 2)
    path = tmp_path / "g.csv"
    export_gantt(s, DIAMOND, path)
    assignment, order, rows = load_gantt(path, num_workers=2)
    assert assignment == s.assignment and order == s.order and len(rows) == 4
    start = {int(r["task_id"]): float(r["predicted_start"]) for r in rows}
    finish = {int(r["task_id"]): float(r["predicted_finish"]) for r in rows}
    assert all(start[v] >= finish[u] for u, v in DIAMOND.edges)
    assert all(r["actual_start"] == "" for r in rows)
    empty = make_graph([], [])
    export_gantt(list_schedule(empty, 2), empty, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().strip().split(",")[0] == "worker"
    with pytest.raises(OSError):
        export_gantt(s, DIAMOND, tmp_path / "missing" / "g.csv")


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 6), st.sampled_from([math.inf, 1e6]))
def test_feasible_and_above_bound(seed, p, bw):
    g = random_dag(np.random.default_rng(seed), 20)
    s = list_schedule(g, p, bandwidth=bw, latency=1e-3 if bw != math.inf else 0.0)
    s.validate(g)
    lower, work, cp = makespan_bounds(g, p)
    assert cp == pytest.approx(longest_path([t.weight for t in g.tasks], list(g.edges)))
    assert s.makespan >= lower - 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 3))
def test_within_twice_optimal(seed, p):
    g = random_dag(np.random.default_rng(seed), 8)
    opt = optimal_makespan([t.weight for t in g.tasks], list(g.edges), p)
    assert opt >= makespan_bounds(g, p)[0] - 1e-9
    assert list_schedule(g, p).makespan <= 2 * opt + 1e-9
