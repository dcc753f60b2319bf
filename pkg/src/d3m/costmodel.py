"""Task weights: timed dense-kernel tables and nearest-neighbour estimates for domain tasks."""
import bisect
import hashlib
import json
import logging
import math
import os
import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import dense
from .errors import InvalidArgumentError, NotCalibratedError

log = logging.getLogger(__name__)

KERNELS = ("factorize", "trisolve", "update")
DEFAULT_SIZES = (8, 16, 32, 64, 128, 256, 512)


@dataclass(frozen=True)
class KernelTable:
    """Median seconds of one dense kernel on square n x n operands."""

    kind: str
    sizes: tuple
    times: tuple
    fingerprint: str = ""

    def __post_init__(self):
        if len(self.sizes) != len(self.times):
            raise InvalidArgumentError("sizes and times differ in length")
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise InvalidArgumentError("kernel table sizes must be strictly increasing")
        if any(not (t > 0 and math.isfinite(t)) for t in self.times):
            raise InvalidArgumentError("kernel table times must be positive and finite")

    def scaled(self, factor):
        return KernelTable(self.kind, self.sizes, tuple(t * factor for t in self.times), self.fingerprint)

    def at(self, x):
        """Log-log interpolation; the end intervals' slopes extend beyond the grid."""
        sizes, times = self.sizes, self.times
        if not sizes:
            raise NotCalibratedError(f"no calibration data for {self.kind}")
        if x <= 0:
            return 0.0
        if len(sizes) == 1:
            return times[0] * (x / sizes[0]) ** 3 if x != sizes[0] else times[0]
        hi = bisect.bisect_left(sizes, x)
        if hi < len(sizes) and sizes[hi] == x:
            return times[hi]
        hi = min(max(hi, 1), len(sizes) - 1)
        lo = hi - 1
        frac = (math.log(x) - math.log(sizes[lo])) / (math.log(sizes[hi]) - math.log(sizes[lo]))
        return times[lo] * (times[hi] / times[lo]) ** frac


def machine_fingerprint():
    parts = [platform.machine(), platform.processor(), platform.python_version(),
             np.__version__, str(os.cpu_count())]
    return hashlib.sha1("|".join(parts).encode()).hexdigest()[:16]


def _operands(kind, n, rng):
    a = rng.standard_normal((n, n))
    spd = a @ a.T / n + np.eye(n) * 2.0
    if kind == "factorize":
        return (spd,)
    fac = dense.ldl_factor(spd)
    if kind == "trisolve":
        return (a, fac)
    lik, wjk = dense.kernel_trisolve_block(a, fac, with_workspace=True)
    return (spd, lik, wjk)


def _run(kind, ops):
    if kind == "factorize":
        dense.kernel_factorize_block(*ops)
    elif kind == "trisolve":
        dense.kernel_trisolve_block(ops[0], ops[1], with_workspace=True)
    else:
        dense.kernel_update_block(*ops)


def calibrate_kernels(sizes=DEFAULT_SIZES, repetitions=5, seed=0):
    """Time each kernel at every size; returns ``{kind: KernelTable}``.

    When one call is shorter than ten clock ticks the calls are batched and
    the per-call mean of a batch is used as the sample.
    """
    sizes = tuple(sorted(set(int(s) for s in sizes)))
    if not sizes or sizes[0] < 1:
        raise InvalidArgumentError("need at least one positive calibration size")
    if repetitions < 3:
        raise InvalidArgumentError("need at least 3 repetitions")
    rng = np.random.default_rng(seed)
    tick = time.get_clock_info("perf_counter").resolution
    fp = machine_fingerprint()
    tables = {}
    for kind in KERNELS:
        times = []
        for n in sizes:
            ops = _operands(kind, n, rng)
            _run(kind, ops)
            batch = 1
            while True:
                t0 = time.perf_counter()
                for _ in range(batch):
                    _run(kind, ops)
                dt = time.perf_counter() - t0
                if dt >= 10 * tick and dt > 2e-5:
                    break
                batch *= 4
            if batch > 1:
                log.warning("%s at n=%d below timer resolution; batching %d calls", kind, n, batch)
            samples = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                for _ in range(batch):
                    _run(kind, ops)
                samples.append((time.perf_counter() - t0) / batch)
            times.append(max(statistics.median(samples), 1e-9))
        tables[kind] = KernelTable(kind, sizes, tuple(times), fp)
    return tables


def save_calibration(tables, path):
    doc = {
        "fingerprint": next(iter(tables.values())).fingerprint if tables else machine_fingerprint(),
        "timestamp": time.time(),
        "kernels": {k: {"sizes": list(t.sizes), "times": list(t.times)} for k, t in tables.items()},
    }
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1)
    os.replace(tmp, path)


def load_calibration(path):
    with open(path) as fh:
        doc = json.load(fh)
    fp = doc.get("fingerprint", "")
    if fp != machine_fingerprint():
        log.warning("calibration %s was recorded on another machine (%s)", path, fp)
    return {k: KernelTable(k, tuple(v["sizes"]), tuple(v["times"]), fp) for k, v in doc["kernels"].items()}


def effective_size(kind, dims):
    """Cube root of the flop-equivalent work, mapped onto the square table axis."""
    dims = tuple(dims)
    if not dims or any(d <= 0 for d in dims):
        return 0.0
    if kind == "factorize":
        return float(dims[0])
    if kind == "trisolve":
        m, k = dims[0], dims[1]
        return (m * k * k) ** (1.0 / 3.0)
    if kind == "update":
        m, n, k = dims
        return (m * n * k) ** (1.0 / 3.0)
    raise InvalidArgumentError(f"unknown kernel kind {kind!r}")


NOMINAL_FLOPS = 1e9
_FLOP_FACTOR = {"factorize": 1.0 / 3.0, "trisolve": 1.0, "update": 2.0}


def nominal_tables(flops=NOMINAL_FLOPS, sizes=DEFAULT_SIZES):
    """Uncalibrated tables from flop counts at a fixed rate; only relative weights matter."""
    return {kind: KernelTable(kind, tuple(sizes), tuple(f * n ** 3 / flops for n in sizes), "nominal")
            for kind, f in _FLOP_FACTOR.items()}


def estimate_dense_cost(tables, kind, dims):
    if not tables or kind not in tables:
        raise NotCalibratedError(f"no kernel table for {kind!r}")
    if isinstance(dims, (int, float)):
        dims = (dims,) * {"factorize": 1, "trisolve": 2, "update": 3}[kind]
    x = effective_size(kind, dims)
    if x == 0.0:
        return 0.0
    return tables[kind].at(x)


@dataclass
class KnnSamples:
    """Measured (features, seconds) pairs for domain-level tasks."""

    features: list = field(default_factory=list)
    times: list = field(default_factory=list)

    def add(self, feats, seconds):
        feats = [float(f) for f in feats]
        if any(f < 0 for f in feats) or not seconds > 0:
            raise InvalidArgumentError("features must be nonnegative and times positive")
        self.features.append(feats)
        self.times.append(float(seconds))

    def __len__(self):
        return len(self.times)


def knn_estimate(samples, query, k=3):
    """Inverse-distance weighted mean of the ``k`` nearest samples.

    Distances are Euclidean on features standardized by the sample mean and
    standard deviation; an exact match returns the matching time.
    """
    if len(samples) == 0:
        raise InvalidArgumentError("knn_estimate needs at least one sample")
    x = np.asarray(samples.features, dtype=float)
    t = np.asarray(samples.times, dtype=float)
    q = np.asarray(query, dtype=float).reshape(1, -1)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    dist = np.linalg.norm((x - mu) / sd - (q - mu) / sd, axis=1)
    k = min(k, len(t))
    nearest = np.argsort(dist, kind="stable")[:k]
    d = dist[nearest]
    if np.any(d == 0):
        return float(np.mean(t[nearest[d == 0]]))
    w = 1.0 / d
    return float(np.sum(w * t[nearest]) / np.sum(w))


def save_samples(samples_by_kind, path, append=True):
    """Append samples as JSON lines ``{"task", "features", "seconds"}``."""
    with open(path, "a" if append else "w") as fh:
        for kind, s in samples_by_kind.items():
            for f, t in zip(s.features, s.times):
                fh.write(json.dumps({"task": kind, "features": f, "seconds": t}) + "\n")


def load_samples(path):
    out = {}
    if not os.path.exists(path):
        return out
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.setdefault(rec["task"], KnnSamples()).add(rec["features"], rec["seconds"])
    return out


def _ptask_cost(p, tables):
    dims = p.dims
    if p.kind == "blk_factorize":
        return estimate_dense_cost(tables, "factorize", dims)
    if p.kind == "blk_trisolve":
        return estimate_dense_cost(tables, "trisolve", dims)
    if p.kind == "blk_update":
        return estimate_dense_cost(tables, "update", dims)
    if p.kind in ("fwd_solve_blk", "bwd_solve_blk", "diag_solve_blk"):
        n, m = dims
        return estimate_dense_cost(tables, "trisolve", (m, n)) if n and m else 0.0
    if p.kind == "interior_factor":
        return estimate_dense_cost(tables, "factorize", dims)
    if p.kind in ("dtn", "rhs_reduce"):
        ni, nb = dims[0], dims[1]
        cols = nb if p.kind == "dtn" else dims[2]
        return estimate_dense_cost(tables, "trisolve", (cols, ni)) if ni and cols else 0.0
    if p.kind == "recover":
        ni, _, m = dims
        return estimate_dense_cost(tables, "trisolve", (m, ni)) if ni else 0.0
    raise InvalidArgumentError(f"unknown ptask kind {p.kind!r}")


def weigh_graph(g, tables, samples=None, domains=None, k=3):
    """Return a copy of ``g`` with every ptask weight filled in.

    Dense ptasks use the kernel tables.  Domain tasks use nearest neighbours
    over earlier measurements of the same task kind (``samples`` maps
    ``"primal"``/``"recover"`` to ``KnnSamples``); without samples they fall
    back to the kernel estimate of their dominant operation.
    """
    if not tables:
        raise NotCalibratedError("kernel tables are empty")
    samples = samples or {}
    by_id = {dp.domain_id: dp for dp in (domains or [])}
    weights = {}
    for t in g.tasks:
        for p in t.ptasks:
            weights[p.id] = _ptask_cost(p, tables)
        head = t.ptasks[0]
        if head.kind == "interior_factor" and len(samples.get("primal", ())) and head.operands[0] in by_id:
            est = knn_estimate(samples["primal"], by_id[head.operands[0]].features(), k)
            _spread(t, est, weights)
        elif head.kind == "recover" and len(samples.get("recover", ())) and head.operands[0] in by_id:
            weights[head.id] = knn_estimate(samples["recover"], by_id[head.operands[0]].features(), k)
    return g.with_weights(weights)


def _spread(task, total, weights):
    """Distribute a task-level estimate over its ptasks in proportion to the table estimates."""
    base = sum(weights[p.id] for p in task.ptasks)
    for p in task.ptasks:
        weights[p.id] = total * (weights[p.id] / base if base > 0 else 1.0 / len(task.ptasks))


def graph_digest(g):
    """Stable hash of task weights and edges."""
    h = hashlib.sha256()
    for t in g.tasks:
        for p in t.ptasks:
            h.update(f"{p.id}:{p.kind}:{p.weight!r};".encode())
    for (u, v), b in sorted(g.edges.items()):
        h.update(f"{u}>{v}:{b};".encode())
    return h.hexdigest()
