"""Weighted block DAG of the three-phase pipeline.

The graph is produced by replaying the sequential algorithm symbolically:
every primitive task (ptask) declares the data items it reads and writes,
and an edge is emitted from the last writer of each item to its reader.
Data items are tuples such as ``("K", i, j)`` (a block of the reduced
matrix while it is being updated), ``("L", i, k)``/``("W", i, k)`` (a
factor block and its unscaled workspace), ``("LD", k)`` (a diagonal block
factor) or ``("S", d, i, j)`` (domain ``d``'s share of block ``(i, j)``).
"""
import json
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GraphError

PRIMAL, DUAL, RECOVERY = "primal_reduction", "dual", "primal_recovery"

KINDS = ("interior_factor", "dtn", "rhs_reduce", "blk_factorize", "blk_trisolve", "blk_update",
         "fwd_solve_blk", "diag_solve_blk", "bwd_solve_blk", "recover")


@dataclass(frozen=True)
class PTask:
    id: int
    kind: str
    operands: tuple
    output: tuple
    phase: str
    reads: tuple = ()
    writes: tuple = ()
    dims: tuple = ()
    weight: float = 0.0
    # for the first ptask touching a reduced block: ("S"/"g" keys summed, in order)
    assemble: tuple = ()


@dataclass(frozen=True)
class Task:
    id: int
    ptasks: tuple
    phase: str

    @property
    def weight(self):
        return float(sum(p.weight for p in self.ptasks))

    @property
    def kind(self):
        kinds = [p.kind for p in self.ptasks]
        return kinds[0] if len(set(kinds)) == 1 else "+".join(dict.fromkeys(kinds))

    @property
    def resident_data(self):
        keys = []
        for p in self.ptasks:
            keys.extend(p.reads)
            keys.extend(p.writes)
        return frozenset(keys)

    @property
    def label(self):
        head = self.ptasks[0]
        return f"{head.kind}{list(head.operands)}" + (f"+{len(self.ptasks) - 1}" if len(self.ptasks) > 1 else "")


@dataclass(eq=False)
class TaskGraph:
    tasks: list
    edges: dict
    edge_keys: dict
    key_bytes: dict = field(repr=False)
    nrhs: int = 1

    def __post_init__(self):
        self.preds = [[] for _ in self.tasks]
        self.succs = [[] for _ in self.tasks]
        for u, v in sorted(self.edges):
            self.succs[u].append(v)
            self.preds[v].append(u)

    def __len__(self):
        return len(self.tasks)

    @property
    def ptasks(self):
        return [p for t in self.tasks for p in t.ptasks]

    def phase_of(self, tid):
        return self.tasks[tid].phase

    def weights(self):
        return np.array([t.weight for t in self.tasks])

    def count(self, kind):
        return sum(1 for p in self.ptasks if p.kind == kind)

    def topological_order(self):
        """Kahn's algorithm taking the lowest ready id first; raises GraphError on a cycle."""
        import heapq
        indeg = [len(p) for p in self.preds]
        ready = [t for t, d in enumerate(indeg) if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            u = heapq.heappop(ready)
            order.append(u)
            for v in self.succs[u]:
                indeg[v] -= 1
                if indeg[v] == 0:
                    heapq.heappush(ready, v)
        if len(order) != len(self.tasks):
            raise GraphError("task graph has a cycle", cycle=self._find_cycle(indeg))
        return order

    def _find_cycle(self, indeg):
        left = {t for t, d in enumerate(indeg) if d > 0}
        start = min(left)
        seen, path = {}, []
        u = start
        while u not in seen:
            seen[u] = len(path)
            path.append(u)
            u = next(p for p in self.preds[u] if p in left)
        return list(reversed(path[seen[u]:]))

    def with_weights(self, weights_by_ptask):
        tasks = [replace(t, ptasks=tuple(replace(p, weight=float(weights_by_ptask[p.id])) for p in t.ptasks))
                 for t in self.tasks]
        return TaskGraph(tasks, dict(self.edges), dict(self.edge_keys), self.key_bytes, self.nrhs)

    def to_dot(self):
        colors = {PRIMAL: "lightblue", DUAL: "lightsalmon", RECOVERY: "palegreen"}
        lines = ["digraph taskgraph {", "  node [shape=box, style=filled];"]
        for t in self.tasks:
            lines.append(f'  t{t.id} [label="{t.label}\\n{t.weight:.3g}s", fillcolor={colors[t.phase]}];')
        for (u, v), b in sorted(self.edges.items()):
            lines.append(f'  t{u} -> t{v} [label="{b}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def to_json(self):
        return json.dumps({
            "nrhs": self.nrhs,
            "tasks": [{"id": t.id, "phase": t.phase, "weight": t.weight,
                       "ptasks": [{"id": p.id, "kind": p.kind, "operands": list(p.operands),
                                   "weight": p.weight, "dims": list(p.dims)} for p in t.ptasks]}
                      for t in self.tasks],
            "edges": [{"from": u, "to": v, "bytes": b} for (u, v), b in sorted(self.edges.items())],
        })


def _key_bytes(key, sizes, domains, nrhs, piece_shape):
    tag = key[0]
    if tag in ("K", "L", "W"):
        return 8 * sizes[key[1]] * sizes[key[2]]
    if tag == "LD":
        return 8 * sizes[key[1]] * (sizes[key[1]] + 4)
    if tag in ("y", "w", "x"):
        return 8 * sizes[key[1]] * nrhs
    if tag in ("S", "g"):
        return piece_shape[key]
    if tag == "F":
        n = domains[key[1]].n_interior
        return 8 * n * min(n, 256)
    if tag == "u":
        return 8 * domains[key[1]].n_interior * nrhs
    raise KeyError(key)


def build_task_graph(symb, domains, layout=None, nrhs=1, block_sizes=None):
    """Symbolically replay the pipeline and emit the (unagglomerated) task graph."""
    domains = list(domains or [])
    if block_sizes is None:
        block_sizes = layout.block_sizes if layout is not None else [1] * symb.num_blocks
    sizes = list(block_sizes)
    if len(sizes) != symb.num_blocks:
        raise GraphError(f"symbolic factorization has {symb.num_blocks} blocks, layout has {len(sizes)}")

    # which blocks each domain's interface touches
    touched = {}
    piece_shape = {}
    for dp in domains:
        if dp.n_interface and layout is not None:
            blk, _ = layout.locate(dp.interface)
            counts = {b: int(np.sum(blk == b)) for b in np.unique(blk).tolist()}
        else:
            counts = {}
        touched[dp.domain_id] = counts
        for bi, ci in counts.items():
            piece_shape[("g", dp.domain_id, bi)] = 8 * ci * nrhs
            for bj, cj in counts.items():
                if bi >= bj:
                    if (bi, bj) not in symb.fill_pattern:
                        raise GraphError(f"domain {dp.domain_id} touches block {(bi, bj)} missing from the symbolic pattern")
                    piece_shape[("S", dp.domain_id, bi, bj)] = 8 * ci * cj
    contributors = defaultdict(list)
    rhs_contributors = defaultdict(list)
    for d in sorted(touched):
        for bi in touched[d]:
            rhs_contributors[bi].append(("g", d, bi))
            for bj in touched[d]:
                if bi >= bj:
                    contributors[(bi, bj)].append(("S", d, bi, bj))

    ptasks = []
    groups = []  # list of (phase, [ptask ids]) in canonical order

    def emit(kind, operands, output, phase, reads=(), writes=(), dims=(), assemble=()):
        p = PTask(len(ptasks), kind, tuple(operands), tuple(output), phase, tuple(reads), tuple(writes),
                  tuple(int(x) for x in dims), 0.0, tuple(assemble))
        ptasks.append(p)
        return p.id

    by_id = {dp.domain_id: dp for dp in domains}
    for d in sorted(by_id):
        dp = by_id[d]
        nb, ni = dp.n_interface, dp.n_interior
        s_keys = [("S", d, bi, bj) for bi in touched[d] for bj in touched[d] if bi >= bj]
        g_keys = [("g", d, bi) for bi in touched[d]]
        ids = [emit("interior_factor", (d,), ("F", d), PRIMAL, (), (("F", d),), (ni,)),
               emit("dtn", (d,), ("S", d), PRIMAL, (("F", d),), s_keys, (ni, nb)),
               emit("rhs_reduce", (d,), ("g", d), PRIMAL, (("F", d),), g_keys, (ni, nb, nrhs))]
        groups.append((PRIMAL, ids))

    touched_blocks = set()

    def block_read(i, j):
        """Reads for the next writer of block (i, j); the first one assembles it."""
        if (i, j) in touched_blocks:
            return (("K", i, j),), ()
        touched_blocks.add((i, j))
        keys = tuple(contributors.get((i, j), ()))
        return keys, (("K", i, j),) + keys

    for k in range(symb.num_blocks):
        reads, asm = block_read(k, k)
        groups.append((DUAL, [emit("blk_factorize", (k,), ("LD", k), DUAL, reads, (("LD", k),),
                                   (sizes[k],), asm)]))
        rows = symb.rows_below(k)
        for i in rows:
            reads, asm = block_read(i, k)
            groups.append((DUAL, [emit("blk_trisolve", (i, k), ("L", i, k), DUAL, (("LD", k),) + reads,
                                       (("L", i, k), ("W", i, k)), (sizes[i], sizes[k]), asm)]))
        for a, j in enumerate(rows):
            for i in rows[a:]:
                reads, asm = block_read(i, j)
                groups.append((DUAL, [emit("blk_update", (i, j, k), ("K", i, j), DUAL,
                                           (("L", i, k), ("W", j, k)) + reads, (("K", i, j),),
                                           (sizes[i], sizes[j], sizes[k]), asm)]))
    for k in range(symb.num_blocks):
        g_keys = tuple(rhs_contributors.get(k, ()))
        reads = (("LD", k),) + tuple(x for j in symb.row_cols(k) for x in (("L", k, j), ("y", j))) + g_keys
        groups.append((DUAL, [emit("fwd_solve_blk", (k,), ("y", k), DUAL, reads, (("y", k),),
                                   (sizes[k], nrhs), (("g", k),) + g_keys)]))
        groups.append((DUAL, [emit("diag_solve_blk", (k,), ("w", k), DUAL, (("LD", k), ("y", k)),
                                   (("w", k),), (sizes[k], nrhs))]))
    for k in range(symb.num_blocks - 1, -1, -1):
        reads = (("LD", k), ("w", k)) + tuple(x for i in symb.rows_below(k) for x in (("L", i, k), ("x", i)))
        groups.append((DUAL, [emit("bwd_solve_blk", (k,), ("x", k), DUAL, reads, (("x", k),),
                                   (sizes[k], nrhs))]))
    for d in sorted(by_id):
        reads = (("F", d),) + tuple(("x", b) for b in sorted(touched[d]))
        groups.append((RECOVERY, [emit("recover", (d,), ("u", d), RECOVERY, reads, (("u", d),),
                                       (by_id[d].n_interior, by_id[d].n_interface, nrhs))]))

    key_bytes = {}
    for p in ptasks:
        for key in p.reads + p.writes:
            if key not in key_bytes:
                key_bytes[key] = _key_bytes(key, sizes, by_id, nrhs, piece_shape)
    return _link(ptasks, groups, key_bytes, nrhs)


def _link(ptasks, groups, key_bytes, nrhs):
    """Number tasks by their first ptask and derive edges from last-writer analysis."""
    groups = sorted(groups, key=lambda g: min(g[1]))
    owner = {}
    tasks = []
    for tid, (phase, ids) in enumerate(groups):
        for pid in ids:
            owner[pid] = tid
        tasks.append(Task(tid, tuple(ptasks[pid] for pid in ids), phase))
    edge_keys = defaultdict(set)
    last_writer = {}
    for p in ptasks:  # canonical order
        for key in p.reads:
            if key not in last_writer:
                raise GraphError(f"ptask {p.id} ({p.kind}) reads {key} before it is produced")
            u, v = owner[last_writer[key]], owner[p.id]
            if u != v:
                edge_keys[(u, v)].add(key)
        for key in p.writes:
            last_writer[key] = p.id
    edge_keys = {e: tuple(sorted(ks)) for e, ks in edge_keys.items()}
    edges = {e: int(sum(key_bytes[k] for k in ks)) for e, ks in edge_keys.items()}
    g = TaskGraph(tasks, edges, edge_keys, key_bytes, nrhs)
    g.topological_order()
    return g


def agglomerate(g, policy="per_block_column"):
    """Merge ptasks into tasks sharing local data.

    ``per_block_column`` folds every update ``(i, j, k)`` with ``j <= i`` into
    the task of ``trisolve(i, k)``: that trisolve is the last of the two it
    needs to become runnable, and both write into block column ``k``'s
    products.  ``none`` returns the graph unchanged.
    """
    if policy in (None, "none"):
        return g
    if policy not in ("per_block_column", "column"):
        raise GraphError(f"unknown agglomeration policy {policy!r}")
    ptasks = g.ptasks
    ptasks.sort(key=lambda p: p.id)
    trisolve_group = {}
    groups = []
    pending = defaultdict(list)
    for t in g.tasks:
        head = t.ptasks[0]
        if len(t.ptasks) == 1 and head.kind == "blk_update":
            i, _, k = head.operands
            pending[(i, k)].append(head.id)
            continue
        groups.append([t.phase, [p.id for p in t.ptasks]])
        if len(t.ptasks) == 1 and head.kind == "blk_trisolve":
            trisolve_group[head.operands] = groups[-1]
    for key, ids in pending.items():
        if key in trisolve_group:
            trisolve_group[key][1].extend(sorted(ids))
        else:
            groups.extend([DUAL, [pid]] for pid in ids)
    groups = [(phase, ids) for phase, ids in groups]
    return _link(ptasks, groups, g.key_bytes, g.nrhs)


def critical_path(g):
    """Longest weighted path (computation only); ties go to the lower task id."""
    order = g.topological_order()
    w = g.weights()
    dist = np.zeros(len(g.tasks))
    prev = [-1] * len(g.tasks)
    for v in order:
        best, arg = 0.0, -1
        for u in sorted(g.preds[v]):
            if arg == -1 or dist[u] > best:
                best, arg = dist[u], u
        dist[v] = best + w[v]
        prev[v] = arg
    if not g.tasks:
        return 0.0, []
    end = max(range(len(g.tasks)), key=lambda t: (dist[t], -t))
    path = [end]
    while prev[path[-1]] != -1:
        path.append(prev[path[-1]])
    return float(dist[end]), path[::-1]


def expected_counts(symb):
    """Closed-form dual ptask counts for a symbolic factorization."""
    c = [len(symb.rows_below(k)) for k in range(symb.num_blocks)]
    return {
        "blk_factorize": symb.num_blocks,
        "blk_trisolve": len(symb.fill_pattern) - symb.num_blocks,
        "blk_update": sum(ck * (ck + 1) // 2 for ck in c),
    }
