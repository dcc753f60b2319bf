"""Static list scheduling of the weighted task graph onto P workers."""
import bisect
import csv
import heapq
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, SchedulingError
from .taskgraph import critical_path


def comm_cost(nbytes, bandwidth, latency):
    if bandwidth is None or math.isinf(bandwidth):
        return float(latency)
    return float(latency) + nbytes / float(bandwidth)


@dataclass(frozen=True)
class CommEvent:
    producer: int
    consumer: int
    nbytes: int
    send: float
    recv: float


@dataclass(eq=False)
class Schedule:
    num_workers: int
    assignment: dict
    order: list
    start: dict
    finish: dict
    comm_events: list = field(default_factory=list)
    bandwidth: float = math.inf
    latency: float = 0.0

    @property
    def makespan(self):
        return max(self.finish.values(), default=0.0)

    def validate(self, g, tol=1e-9):
        """Assert precedence feasibility and per-worker exclusivity."""
        for (u, v), nbytes in g.edges.items():
            c = 0.0 if self.assignment[u] == self.assignment[v] else comm_cost(nbytes, self.bandwidth, self.latency)
            if self.start[v] + tol < self.finish[u] + c:
                raise SchedulingError(f"edge {u}->{v} violated: start {self.start[v]} < {self.finish[u]} + {c}")
        for w, tasks in enumerate(self.order):
            for a, b in zip(tasks, tasks[1:]):
                if self.start[b] + tol < self.finish[a]:
                    raise SchedulingError(f"worker {w} overlaps tasks {a} and {b}")
        scheduled = sorted(t for ts in self.order for t in ts)
        if scheduled != list(range(len(g.tasks))):
            raise SchedulingError("schedule does not cover every task exactly once")
        return True

    def to_json(self):
        return json.dumps({
            "num_workers": self.num_workers,
            "bandwidth": None if math.isinf(self.bandwidth) else self.bandwidth,
            "latency": self.latency,
            "order": self.order,
            "assignment": {str(t): w for t, w in sorted(self.assignment.items())},
            "start": {str(t): s for t, s in sorted(self.start.items())},
            "finish": {str(t): s for t, s in sorted(self.finish.items())},
            "comm_events": [[e.producer, e.consumer, e.nbytes, e.send, e.recv] for e in self.comm_events],
            "makespan": self.makespan,
        })

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        ints = lambda d: {int(k): v for k, v in d.items()}
        bw = obj.get("bandwidth")
        return cls(obj["num_workers"], ints(obj["assignment"]), [list(o) for o in obj["order"]],
                   ints(obj["start"]), ints(obj["finish"]),
                   [CommEvent(*e) for e in obj.get("comm_events", [])],
                   math.inf if bw is None else bw, obj.get("latency", 0.0))


def upward_ranks(g, bandwidth=math.inf, latency=0.0):
    w = [float(x) for x in g.weights()]
    rank = [0.0] * len(g.tasks)
    for u in reversed(g.topological_order()):
        best = 0.0
        for v in g.succs[u]:
            best = max(best, comm_cost(g.edges[(u, v)], bandwidth, latency) + rank[v])
        rank[u] = w[u] + best
    return rank


def list_schedule(g, num_workers, bandwidth=math.inf, latency=0.0):
    """Upward-rank list scheduling with earliest-finish-time insertion placement.

    The ready task with the highest rank (lowest id on ties) is placed on the
    worker where it would finish first, reusing idle gaps when they fit.
    """
    if num_workers < 1:
        raise InvalidArgumentError(f"need at least one worker, got {num_workers}")
    n = len(g.tasks)
    rank = upward_ranks(g, bandwidth, latency)
    w = [float(x) for x in g.weights()]
    indeg = [len(p) for p in g.preds]
    ready = [(-rank[t], t) for t in range(n) if indeg[t] == 0]
    heapq.heapify(ready)
    slots = [[] for _ in range(num_workers)]  # sorted (start, finish, task)
    ends = [[] for _ in range(num_workers)]  # finish times, same order
    assignment, start, finish = {}, {}, {}
    while ready:
        _, t = heapq.heappop(ready)
        best = None
        for p in range(num_workers):
            est = 0.0
            for u in g.preds[t]:
                c = 0.0 if assignment[u] == p else comm_cost(g.edges[(u, t)], bandwidth, latency)
                est = max(est, finish[u] + c)
            s = _earliest_gap(slots[p], ends[p], est, w[t])
            if best is None or s + w[t] < best[0] - 1e-15:
                best = (s + w[t], s, p)
        eft, s, p = best
        assignment[t], start[t], finish[t] = p, s, eft
        pos = bisect.bisect(slots[p], (s, eft, t))
        slots[p].insert(pos, (s, eft, t))
        ends[p].insert(pos, eft)
        for v in g.succs[t]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(ready, (-rank[v], v))
    if len(assignment) != n:
        raise SchedulingError("graph has a cycle; not every task could be scheduled")
    order = [[t for _, _, t in sl] for sl in slots]
    events = []
    for (u, v), nbytes in sorted(g.edges.items()):
        if assignment[u] != assignment[v]:
            events.append(CommEvent(u, v, nbytes, finish[u], finish[u] + comm_cost(nbytes, bandwidth, latency)))
    sched = Schedule(num_workers, assignment, order, start, finish, events, bandwidth, latency)
    sched.validate(g)
    return sched


def _earliest_gap(slots, ends, ready, length):
    """Earliest start >= ``ready`` of an idle interval that fits ``length``."""
    t = ready
    # slots never overlap, so finish times are sorted too; skip those ending before ready
    for s, f, _ in slots[bisect.bisect_right(ends, ready):]:
        if t + length <= s + 1e-15 and (length > 0 or t < s):
            return t
        t = max(t, f)
    return t


def makespan_bounds(g, num_workers, bandwidth=math.inf, latency=0.0):
    """``(lower, work, cp)`` with ``lower = max(cp, work / P)``."""
    cp, _ = critical_path(g)
    work = float(np.sum(g.weights()))
    return max(cp, work / num_workers), work, cp


GANTT_COLUMNS = ("worker", "task_id", "kind", "phase", "predicted_start", "predicted_finish",
                 "actual_start", "actual_finish")


def gantt_rows(sched, g, trace=None):
    rows = []
    for w, tasks in enumerate(sched.order):
        for t in tasks:
            actual = trace.intervals.get(t) if trace is not None else None
            rows.append({
                "worker": w, "task_id": t, "kind": g.tasks[t].kind, "phase": g.tasks[t].phase,
                "predicted_start": repr(sched.start[t]), "predicted_finish": repr(sched.finish[t]),
                "actual_start": repr(actual[0]) if actual else "",
                "actual_finish": repr(actual[1]) if actual else "",
            })
    return rows


def export_gantt(sched, g, path, trace=None):
    path = str(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=GANTT_COLUMNS)
        writer.writeheader()
        writer.writerows(gantt_rows(sched, g, trace))
    os.replace(tmp, path)
    return path


def load_gantt(path, num_workers=None):
    """Parse a Gantt CSV back into ``(assignment, order, rows)``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assignment = {}
    order = {}
    for r in rows:
        w, t = int(r["worker"]), int(r["task_id"])
        assignment[t] = w
        order.setdefault(w, []).append(t)
    width = max(max(order, default=-1) + 1, num_workers or 0)
    return assignment, [order.get(w, []) for w in range(width)], rows
