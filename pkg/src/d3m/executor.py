"""In-process parallel execution of a static schedule with message passing.

Every worker owns a private store of data items.  Items produced for
another worker travel as copies through that worker's mailbox; outgoing
messages are only pushed at task boundaries (manual progression), which is
also where a worker drains its own mailbox.  A task runs once its
dependency counter, one count per incoming graph edge, reaches zero.
"""
import json
import os
import queue
import random
import threading
import time
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import dense
from .blockmat import accumulate_block, accumulate_rhs, matrix_pieces, rhs_pieces
from .errors import InvalidArgumentError, SchedulingError
from .primal import DENSE_CROSSOVER, factor_interior, recover_primal, reduce_rhs, schur_matrix
from .taskgraph import DUAL, PRIMAL, RECOVERY

MEMORY_MODES = ("fast", "compact")
# items counted as reduced-matrix block storage
_METERED = frozenset(("S", "g", "K", "L", "W", "LD", "y", "w", "x"))


def resolve_workers(requested=None):
    """Worker count, with ``D3M_WORKERS`` taking precedence when set."""
    env = os.environ.get("D3M_WORKERS")
    value = env if env not in (None, "") else requested
    try:
        value = int(value if value is not None else 1)
    except ValueError:
        raise InvalidArgumentError(f"worker count must be an integer, got {value!r}") from None
    if value < 1:
        raise InvalidArgumentError(f"worker count must be at least 1, got {value}")
    return value


@dataclass(frozen=True, eq=False)
class ExecState:
    """Read-only inputs shared by all workers."""

    domains: tuple
    layout: object
    symbolic: object
    n: int
    nrhs: int = 1
    crossover: int = DENSE_CROSSOVER

    def domain(self, d):
        table = self.__dict__.get("_by_id")
        if table is None:
            table = {dp.domain_id: dp for dp in self.domains}
            object.__setattr__(self, "_by_id", table)
        return table[d]


@dataclass(frozen=True, eq=False)
class RunTrace:
    num_workers: int
    intervals: dict
    workers: dict
    phase_times: dict
    peak_block_bytes: int
    bytes_communicated: int
    wall_s: float
    memory_mode: str = "fast"

    @property
    def makespan(self):
        return max((f for _, f in self.intervals.values()), default=0.0)

    def durations(self):
        return {t: f - s for t, (s, f) in self.intervals.items()}

    def check(self, g):
        """Every task ran exactly once; intervals on one worker are disjoint."""
        if sorted(self.intervals) != list(range(len(g.tasks))):
            raise SchedulingError("trace does not cover every task exactly once")
        by_worker = defaultdict(list)
        for t, w in self.workers.items():
            by_worker[w].append(self.intervals[t])
        for w, iv in by_worker.items():
            iv.sort()
            for (_, f), (s, _) in zip(iv, iv[1:]):
                if s < f:
                    raise SchedulingError(f"overlapping intervals on worker {w}")
        return True


class _Meter:
    def __init__(self):
        self.lock = threading.Lock()
        self.current = 0
        self.peak = 0
        self.sent = 0

    def add(self, nbytes):
        with self.lock:
            self.current += nbytes
            self.peak = max(self.peak, self.current)

    def communicated(self, nbytes):
        with self.lock:
            self.sent += nbytes


def _nbytes(value):
    if isinstance(value, np.ndarray):
        return value.nbytes
    if isinstance(value, tuple):
        return sum(_nbytes(v) for v in value)
    if isinstance(value, dense.DenseLDL):
        return value.nbytes
    return 0


class _Store:
    """Versioned items of one worker; the newest version of a key wins."""

    def __init__(self, meter):
        self.items = {}
        self.meter = meter

    def put(self, key, version, value):
        old = self.items.get(key)
        if old is not None and old[0] >= version:
            return False
        self._account(key, old, -1)
        self.items[key] = (version, value)
        self._account(key, self.items[key], +1)
        return True

    def get(self, key, version):
        item = self.items.get(key)
        if item is None or item[0] != version:
            have = None if item is None else item[0]
            raise SchedulingError(f"item {key} read at version {have}, expected {version}")
        return item[1]

    def drop(self, key):
        old = self.items.pop(key, None)
        self._account(key, old, -1)

    def _account(self, key, item, sign):
        if item is not None and key[0] in _METERED:
            self.meter.add(sign * _nbytes(item[1]))


def _read_versions(g):
    """Expected version (writer ptask id) of every item each ptask reads."""
    last, out = {}, {}
    for p in sorted(g.ptasks, key=lambda p: p.id):
        out[p.id] = {k: last[k] for k in p.reads}
        for k in p.writes:
            last[k] = p.id
    return out


class _Kernels:
    """Runs one ptask against a worker store."""

    def __init__(self, state, store, versions, fast):
        self.state = state
        self.store = store
        self.versions = versions
        self.fast = fast

    def read(self, p, key):
        return self.store.get(key, self.versions[p.id][key])

    def block(self, p, i, j):
        """Current value of reduced block (i, j); the first toucher assembles it."""
        key = ("K", i, j)
        if not p.assemble:
            return self.read(p, key)
        sizes = self.state.layout.block_sizes
        out = self.store.items.pop(key, (None, None))[1] if self.fast else None
        if out is not None:
            self.store.meter.add(-out.nbytes)
        pieces = [self.read(p, k) for k in p.assemble[1:]]
        return accumulate_block((sizes[i], sizes[j]), pieces, out=out)

    def run(self, p):
        st, s = self.state, self.store
        kind, ops = p.kind, p.operands
        if kind == "interior_factor":
            s.put(("F", ops[0]), p.id, factor_interior(st.domain(ops[0]), st.crossover))
        elif kind == "dtn":
            dp = st.domain(ops[0])
            sm = schur_matrix(dp, self.read(p, ("F", ops[0])))
            for (bi, bj), piece in matrix_pieces(sm, dp.interface, st.layout).items():
                s.put(("S", ops[0], bi, bj), p.id, piece)
        elif kind == "rhs_reduce":
            dp = st.domain(ops[0])
            gv = reduce_rhs(dp, self.read(p, ("F", ops[0])))
            for bi, piece in rhs_pieces(gv, dp.interface, st.layout).items():
                s.put(("g", ops[0], bi), p.id, piece)
        elif kind == "blk_factorize":
            k = ops[0]
            kkk = self.block(p, k, k)
            s.drop(("K", k, k))
            s.put(("LD", k), p.id, dense.kernel_factorize_block(kkk, block=k))
        elif kind == "blk_trisolve":
            i, k = ops
            kik = self.block(p, i, k)
            s.drop(("K", i, k))
            lik, wik = dense.kernel_trisolve_block(kik, self.read(p, ("LD", k)), with_workspace=True)
            s.put(("L", i, k), p.id, lik)
            s.put(("W", i, k), p.id, wik)
        elif kind == "blk_update":
            i, j, k = ops
            kij = self.block(p, i, j)
            s.put(("K", i, j), p.id, dense.kernel_update_block(
                kij, self.read(p, ("L", i, k)), self.read(p, ("W", j, k))))
        elif kind == "fwd_solve_blk":
            k = ops[0]
            rhs = accumulate_rhs((st.layout.block_sizes[k], st.nrhs), [self.read(p, key) for key in p.assemble[1:]])
            terms = [(self.read(p, ("L", k, j)), self.read(p, ("y", j))) for j in st.symbolic.row_cols(k)]
            s.put(("y", k), p.id, dense.fwd_solve_block(rhs, terms, self.read(p, ("LD", k))))
        elif kind == "diag_solve_blk":
            k = ops[0]
            s.put(("w", k), p.id, dense.diag_solve_block(self.read(p, ("y", k)), self.read(p, ("LD", k))))
        elif kind == "bwd_solve_blk":
            k = ops[0]
            terms = [(self.read(p, ("L", i, k)), self.read(p, ("x", i))) for i in st.symbolic.rows_below(k)]
            s.put(("x", k), p.id, dense.bwd_solve_block(self.read(p, ("w", k)), terms, self.read(p, ("LD", k))))
        elif kind == "recover":
            dp = st.domain(ops[0])
            if dp.n_interface:
                blk, loc = st.layout.locate(dp.interface)
                u_b = np.empty((dp.n_interface, st.nrhs))
                for b in np.unique(blk).tolist():
                    sel = blk == b
                    u_b[sel] = self.read(p, ("x", b))[loc[sel]]
            else:
                u_b = np.zeros((0, st.nrhs))
            s.put(("u", ops[0]), p.id, recover_primal(dp, self.read(p, ("F", ops[0])), u_b))
        else:
            raise InvalidArgumentError(f"unknown ptask kind {kind!r}")


class _Run:
    """Shared bookkeeping of one execution."""

    def __init__(self, g, state, order, memory_mode, jitter_seed, timeout, trace_stream):
        if memory_mode not in MEMORY_MODES:
            raise InvalidArgumentError(f"memory mode must be one of {MEMORY_MODES}, got {memory_mode!r}")
        self.g = g
        self.state = state
        self.order = order
        self.fast = memory_mode == "fast"
        self.memory_mode = memory_mode
        self.jitter_seed = jitter_seed
        self.timeout = timeout
        self.stream = trace_stream
        self.stream_lock = threading.Lock()
        self.where = {t: w for w, ts in enumerate(order) for t in ts}
        self.mailboxes = [queue.Queue() for _ in order]
        self.meter = _Meter()
        self.versions = _read_versions(g)
        self.abort = threading.Event()
        self.errors = {}
        self.lock = threading.Lock()
        self.progress = 0
        self.intervals = {}
        self.workers = {}
        self.results = {}
        self.t0 = time.perf_counter()

    def emit(self, event, task, worker):
        if self.stream is None:
            return
        line = json.dumps({"event": event, "task": task, "worker": worker, "t": time.perf_counter() - self.t0})
        with self.stream_lock:
            self.stream.write(line + "\n")

    def fail(self, task, exc):
        with self.lock:
            self.errors[task] = exc
        self.abort.set()

    def bump(self):
        with self.lock:
            self.progress += 1


class _Worker:
    def __init__(self, run, wid):
        self.run = run
        self.wid = wid
        g = run.g
        self.tasks = run.order[wid]
        self.store = _Store(run.meter)
        self.kernels = _Kernels(run.state, self.store, run.versions, run.fast)
        self.counter = {t: len(g.preds[t]) for t in self.tasks}
        self.outbox = []
        self.rng = None if run.jitter_seed is None else random.Random(int(run.jitter_seed) * 7919 + wid)
        self.last_use = self._last_local_use()

    def _last_local_use(self):
        """Position in this worker's list after which each item is no longer needed."""
        last = {}
        for pos, t in enumerate(self.tasks):
            for key in self.run.g.tasks[t].resident_data:
                last[key] = pos
        return last

    def preallocate(self):
        """Fast mode: zero storage for every reduced block this worker assembles."""
        sizes = self.run.state.layout.block_sizes
        for t in self.tasks:
            for p in self.run.g.tasks[t].ptasks:
                if p.assemble and p.assemble[0][0] == "K":
                    _, i, j = p.assemble[0]
                    self.store.put(("K", i, j), -1, np.zeros((sizes[i], sizes[j])))

    # message handling
    def deliver(self, msg):
        producer, keys, consumers = msg
        for key, version, value in keys:
            self.store.put(key, version, value)
        for v in consumers:
            self.counter[v] -= 1

    def drain(self):
        got = False
        while True:
            try:
                msg = self.run.mailboxes[self.wid].get_nowait()
            except queue.Empty:
                return got
            self.deliver(msg)
            got = True

    def flush(self, force=False):
        """Push pending messages; with jitter some are held back to a later boundary."""
        if not self.outbox:
            return
        pending = self.outbox
        if self.rng is not None:
            self.rng.shuffle(pending)
            if not force:
                held = [m for m in pending if self.rng.random() < 0.3]
                pending = [m for m in pending if not any(m is h for h in held)]
                self.outbox = held
            else:
                self.outbox = []
        else:
            self.outbox = []
        for dest, msg in pending:
            if self.rng is not None and self.rng.random() < 0.2:
                time.sleep(self.rng.random() * 2e-4)
            self.run.mailboxes[dest].put(msg)

    def post(self, t):
        """Queue copies of ``t``'s outputs for every remote consumer."""
        g = self.run.g
        by_dest = defaultdict(lambda: (set(), []))
        for v in g.succs[t]:
            dest = self.run.where[v]
            if dest == self.wid:
                self.counter[v] -= 1
                continue
            keys, consumers = by_dest[dest]
            keys.update(g.edge_keys[(t, v)])
            consumers.append(v)
        for dest in sorted(by_dest):
            keys, consumers = by_dest[dest]
            payload = []
            for key in sorted(keys):
                version, value = self.store.items[key]
                payload.append((key, version, _copy(value)))
                self.run.meter.communicated(_nbytes(value))
            self.outbox.append((dest, (t, tuple(payload), tuple(consumers))))

    def release(self, pos):
        if self.run.fast:
            return
        for key in self.run.g.tasks[self.tasks[pos]].resident_data:
            if self.last_use.get(key) == pos and key[0] not in ("x", "u"):
                self.store.drop(key)

    def wait_for(self, t):
        run = self.run
        idle_since, seen = time.perf_counter(), run.progress
        while self.counter[t] > 0:
            if run.abort.is_set():
                return False
            self.flush(force=True)
            try:
                msg = run.mailboxes[self.wid].get(timeout=0.01)
            except queue.Empty:
                if run.progress != seen:
                    idle_since, seen = time.perf_counter(), run.progress
                elif time.perf_counter() - idle_since > run.timeout:
                    raise SchedulingError(
                        f"worker {self.wid} waited {run.timeout:.1f}s for task {t} with no global progress")
                continue
            self.deliver(msg)
        return True

    def main(self):
        run = self.run
        current = None
        try:
            if run.fast:
                self.preallocate()
            for pos, t in enumerate(self.tasks):
                current = t
                if not self.wait_for(t):
                    return
                run.emit("start", t, self.wid)
                start = time.perf_counter()
                for p in run.g.tasks[t].ptasks:
                    self.kernels.run(p)
                finish = time.perf_counter()
                run.intervals[t] = (start - run.t0, finish - run.t0)
                run.workers[t] = self.wid
                run.emit("finish", t, self.wid)
                for key in run.g.tasks[t].resident_data:
                    if key[0] in ("x", "u") and key in self.store.items:
                        run.results[key] = self.store.items[key][1]
                self.post(t)
                self.release(pos)
                run.bump()
                # manual progression at the task boundary
                self.flush()
                self.drain()
                if run.abort.is_set():
                    return
            self.flush(force=True)
        except Exception as exc:  # surfaced by the controller
            run.fail(current if current is not None else -1, exc)


def _copy(value):
    if isinstance(value, np.ndarray):
        return value.copy()
    if isinstance(value, tuple):
        return tuple(_copy(v) for v in value)
    return value


def _run(g, state, order, memory_mode, jitter_seed, timeout, trace_stream, threaded):
    run = _Run(g, state, order, memory_mode, jitter_seed, timeout, trace_stream)
    workers = [_Worker(run, w) for w in range(len(order))]
    with threadpool_limits(limits=1):
        t0 = run.t0 = time.perf_counter()
        if threaded and len(workers) > 1:
            threads = [threading.Thread(target=w.main, name=f"d3m-worker-{w.wid}", daemon=True) for w in workers]
            for th in threads:
                th.start()
            for th in threads:
                th.join()
        else:
            for w in workers:
                w.main()
        wall = time.perf_counter() - t0
    if run.errors:
        first = min(run.errors)
        raise run.errors[first]
    if len(run.intervals) != len(g.tasks):
        raise SchedulingError(f"only {len(run.intervals)} of {len(g.tasks)} tasks ran")
    phase = {PRIMAL: 0.0, DUAL: 0.0, RECOVERY: 0.0}
    for t, (s, f) in run.intervals.items():
        phase[g.tasks[t].phase] += f - s
    trace = RunTrace(len(order), dict(run.intervals), dict(run.workers), phase,
                     run.meter.peak, run.meter.sent, wall, memory_mode)
    return _gather(state, run.results), trace


def _gather(state, results):
    x = np.zeros((state.n, state.nrhs))
    for k, dofs in enumerate(state.layout.block_dofs):
        if ("x", k) in results:
            x[dofs] = results[("x", k)]
    for dp in state.domains:
        if ("u", dp.domain_id) in results:
            x[dp.interior] = results[("u", dp.domain_id)]
    return x


def execute_parallel(g, schedule, state, memory_mode="fast", jitter_seed=None, timeout=60.0, trace_stream=None):
    """Run ``schedule`` on ``schedule.num_workers`` threads; returns ``(solution, RunTrace)``."""
    if sorted(t for ts in schedule.order for t in ts) != list(range(len(g.tasks))):
        raise InvalidArgumentError("schedule does not match the task graph")
    for ts in schedule.order:
        pos = {t: i for i, t in enumerate(ts)}
        for t in ts:
            for u in g.preds[t]:
                if u in pos and pos[u] > pos[t]:
                    raise SchedulingError(f"task {t} is ordered before its predecessor {u} on one worker")
    return _run(g, state, [list(ts) for ts in schedule.order], memory_mode, jitter_seed, timeout,
                trace_stream, threaded=True)


def execute_sequential(g, state, memory_mode="fast", trace_stream=None):
    """Reference run: one worker, ascending task id among ready tasks."""
    return _run(g, state, [g.topological_order()], memory_mode, None, 60.0, trace_stream, threaded=False)


def collect_timeline(trace, schedule, g, t1=None):
    """Gantt rows with actual times and the phase breakdown dictionary."""
    from .scheduler import gantt_rows
    if trace.num_workers != schedule.num_workers or sorted(trace.intervals) != sorted(schedule.assignment):
        raise InvalidArgumentError("trace and schedule describe different runs")
    rows = gantt_rows(schedule, g, trace)
    makespan = trace.wall_s
    breakdown = {
        "primal_reduction_s": trace.phase_times[PRIMAL],
        "dual_factor_solve_s": trace.phase_times[DUAL],
        "recovery_s": trace.phase_times[RECOVERY],
        "peak_block_bytes": int(trace.peak_block_bytes),
        "bytes_communicated": int(trace.bytes_communicated),
        "makespan_actual_s": makespan,
        "makespan_predicted_s": schedule.makespan,
        "num_workers": trace.num_workers,
        "memory_mode": trace.memory_mode,
    }
    if t1 is not None:
        breakdown["parallel_efficiency"] = float(t1) / (trace.num_workers * makespan) if makespan > 0 else 1.0
    return rows, breakdown
