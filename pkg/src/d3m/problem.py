"""Sparse symmetric systems, domain partitions and interior/interface splitting."""
import itertools
import math
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError, ParseError

IMBALANCE_TOL = 0.25


@dataclass(frozen=True, eq=False)
class SparseSystem:
    """Symmetric sparse matrix (lower triangle kept canonically) plus right-hand sides.

    ``rhs`` has shape ``(n, nrhs)``.  ``grid_shape`` is set for generated
    lattice problems so the box partitioner can see the geometry.
    """

    lower: sp.csr_matrix
    rhs: np.ndarray
    shift: float = 0.0
    grid_shape: tuple = None

    def __post_init__(self):
        n = self.lower.shape[0]
        if n < 1 or self.lower.shape != (n, n):
            raise InvalidArgumentError(f"matrix must be square with n >= 1, got {self.lower.shape}")
        if self.rhs.ndim != 2 or self.rhs.shape[0] != n:
            raise InvalidArgumentError(f"rhs of shape {self.rhs.shape} does not match n={n}")

    @classmethod
    def from_matrix(cls, a, rhs=None, shift=0.0, grid_shape=None):
        """Build from any symmetric matrix; only the lower triangle is kept.

        Missing diagonal entries are stored as explicit zeros.
        """
        a = sp.coo_matrix(a)
        n = a.shape[0]
        keep = a.row >= a.col
        rows = np.concatenate([a.row[keep], np.arange(n)])
        cols = np.concatenate([a.col[keep], np.arange(n)])
        vals = np.concatenate([a.data[keep].astype(float), np.zeros(n)])
        lower = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        lower.sum_duplicates()
        lower.sort_indices()
        if rhs is None:
            rhs = np.ones((n, 1))
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 1:
            rhs = rhs[:, None]
        return cls(lower, rhs, float(shift), tuple(grid_shape) if grid_shape else None)

    @property
    def n(self):
        return self.lower.shape[0]

    @property
    def nrhs(self):
        return self.rhs.shape[1]

    @property
    def matrix(self):
        """Full symmetric CSR storage (diagonal entries kept even when zero)."""
        cached = self.__dict__.get("_full")
        if cached is None:
            strict = sp.tril(self.lower, -1, format="csr")
            cached = (self.lower + strict.T).tocsr()
            cached.sort_indices()
            object.__setattr__(self, "_full", cached)
        return cached

    def same_as(self, other):
        a, b = self.lower, other.lower
        return (self.n == other.n and a.nnz == b.nnz
                and np.array_equal(a.indptr, b.indptr) and np.array_equal(a.indices, b.indices)
                and np.array_equal(a.data, b.data) and np.array_equal(self.rhs, other.rhs)
                and self.shift == other.shift)


def generate_grid_problem(dims, stencil="laplacian", k=0.0, seed=0, rhs="ones", shift=0.0):
    """Finite-difference operator on a 1/2/3-D lattice with Dirichlet boundary eliminated.

    ``stencil`` is ``"laplacian"`` or ``"helmholtz"`` (diagonal shifted by
    ``-k**2``).  ``rhs="random"`` draws a normal right-hand side from ``seed``.
    """
    if isinstance(dims, int):
        dims = (dims,)
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= 3:
        raise InvalidArgumentError("grid must have 1, 2 or 3 dimensions")
    if any(d < 2 for d in dims):
        raise InvalidArgumentError(f"every grid dimension must be >= 2, got {dims}")
    if stencil not in ("laplacian", "helmholtz"):
        raise InvalidArgumentError(f"unknown stencil {stencil!r}")
    n = math.prod(dims)
    a = sp.csr_matrix((n, n))
    for axis, m in enumerate(dims):
        t = sp.diags([-np.ones(m - 1), 2.0 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1])
        ops = [sp.identity(d) for d in dims]
        ops[axis] = t
        term = ops[0]
        for op in ops[1:]:
            term = sp.kron(term, op)
        a = a + term
    if stencil == "helmholtz":
        a = a - (k * k) * sp.identity(n)
    if rhs == "ones":
        b = np.ones((n, 1))
    elif rhs == "random":
        b = np.random.default_rng(seed).standard_normal((n, 1))
    else:
        raise InvalidArgumentError(f"unknown rhs kind {rhs!r}")
    return SparseSystem.from_matrix(a, b, shift=shift, grid_shape=dims)


def save_system(sys, path):
    """Write the matrix in Matrix Market symmetric coordinate format.

    The first right-hand side goes to a sibling ``<path>.rhs`` file so a
    round trip reproduces the system.
    """
    low = sp.coo_matrix(sys.lower)
    order = np.lexsort((low.row, low.col))
    lines = ["%%MatrixMarket matrix coordinate real symmetric",
             f"{sys.n} {sys.n} {low.nnz}"]
    lines += [f"{r + 1} {c + 1} {float(v)!r}" for r, c, v in zip(low.row[order], low.col[order], low.data[order])]
    _atomic_write(path, "\n".join(lines) + "\n")
    rhs_lines = ["%%MatrixMarket matrix array real general", f"{sys.n} {sys.nrhs}"]
    rhs_lines += [repr(float(v)) for v in sys.rhs.T.ravel()]
    _atomic_write(str(path) + ".rhs", "\n".join(rhs_lines) + "\n")


def load_system(path, shift=0.0):
    """Parse a Matrix Market ``coordinate real symmetric`` file.

    Repeated coordinates are summed.  An entry given in both triangles is a
    duplicate after folding and is rejected.
    """
    with open(path) as fh:
        text = fh.read().splitlines()
    if not text:
        raise ParseError("empty file", 1)
    header = text[0].split()
    if len(header) != 5 or header[0].lower() != "%%matrixmarket":
        raise ParseError("malformed Matrix Market header", 1)
    obj, fmt, field_, sym = (h.lower() for h in header[1:])
    if obj != "matrix" or fmt != "coordinate":
        raise ParseError(f"expected 'matrix coordinate', got '{obj} {fmt}'", 1)
    if field_ not in ("real", "integer"):
        raise ParseError(f"unsupported field '{field_}'", 1)
    if sym != "symmetric":
        raise ParseError(f"expected symmetric qualifier, got '{sym}'", 1)
    lineno = 1
    size_line = None
    for lineno in range(2, len(text) + 1):
        line = text[lineno - 1].strip()
        if line and not line.startswith("%"):
            size_line = line
            break
    if size_line is None:
        raise ParseError("missing size line", lineno)
    try:
        nrows, ncols, nnz = (int(t) for t in size_line.split())
    except ValueError:
        raise ParseError("malformed size line", lineno) from None
    if nrows != ncols or nrows < 1:
        raise ParseError("symmetric matrix must be square with n >= 1", lineno)
    entries = {}
    folded_from = {}
    count = 0
    for ln in range(lineno + 1, len(text) + 1):
        line = text[ln - 1].strip()
        if not line or line.startswith("%"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError("expected 'row col value'", ln)
        try:
            i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise ParseError("malformed entry", ln) from None
        if not (1 <= i <= nrows and 1 <= j <= ncols):
            raise ParseError(f"index ({i}, {j}) out of range for n={nrows}", ln)
        upper = j > i
        key = (j - 1, i - 1) if upper else (i - 1, j - 1)
        if key in entries and folded_from[key] != upper:
            raise ParseError(f"entry ({i}, {j}) duplicates its transpose", ln)
        entries[key] = entries.get(key, 0.0) + v
        folded_from[key] = upper
        count += 1
    if count != nnz:
        raise ParseError(f"header announces {nnz} entries, found {count}", len(text))
    rows = np.fromiter((k[0] for k in entries), dtype=np.intp, count=len(entries))
    cols = np.fromiter((k[1] for k in entries), dtype=np.intp, count=len(entries))
    vals = np.fromiter(entries.values(), dtype=float, count=len(entries))
    a = sp.coo_matrix((vals, (rows, cols)), shape=(nrows, nrows))
    rhs = None
    rhs_path = str(path) + ".rhs"
    if os.path.exists(rhs_path):
        rhs = _load_dense(rhs_path, nrows)
    return SparseSystem.from_matrix(a, rhs, shift=shift)


def _load_dense(path, n):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("%")]
    rows, cols = (int(t) for t in lines[0].split())
    if rows != n:
        raise ParseError(f"rhs has {rows} rows, matrix has {n}", 2)
    vals = np.array([float(v) for v in lines[1:]])
    return vals.reshape(cols, rows).T.copy()


def _atomic_write(path, text, mode="w"):
    path = str(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, mode) as fh:
        fh.write(text)
    os.replace(tmp, path)


@dataclass(frozen=True)
class Partition:
    num_domains: int
    owner: np.ndarray

    def __post_init__(self):
        owner = np.asarray(self.owner)
        if self.num_domains < 1:
            raise InvalidArgumentError("num_domains must be positive")
        if owner.size and (owner.min() < 0 or owner.max() >= self.num_domains):
            raise InvalidArgumentError("domain id out of range")
        counts = np.bincount(owner, minlength=self.num_domains)
        if np.any(counts == 0):
            raise InvalidArgumentError(f"domain {int(np.argmin(counts))} owns no DOF")

    def sizes(self):
        return np.bincount(self.owner, minlength=self.num_domains)


def save_partition(part, path):
    _atomic_write(path, "".join(f"{int(d)}\n" for d in part.owner))


def load_partition(path, num_domains=None):
    with open(path) as fh:
        owner = np.array([int(line) for line in fh if line.strip()], dtype=np.intp)
    return Partition(int(num_domains or owner.max() + 1), owner)


def partition_domains(sys, num_domains, strategy="grid", imbalance_tol=IMBALANCE_TOL):
    n = sys.n
    if not 1 <= num_domains <= n:
        raise InvalidArgumentError(f"need 1 <= num_domains <= n={n}, got {num_domains}")
    if strategy == "grid":
        owner = _grid_partition(sys, num_domains)
    elif strategy in ("greedy_bfs", "bfs"):
        owner = _bfs_partition(sys.matrix, num_domains)
    else:
        raise InvalidArgumentError(f"unknown partition strategy {strategy!r}")
    part = Partition(num_domains, owner)
    limit = math.ceil(n / num_domains) * (1 + imbalance_tol)
    if part.sizes().max() > limit:
        raise InvalidArgumentError(
            f"{strategy} partition too unbalanced: largest domain {part.sizes().max()} > {limit:g}")
    return part


def _grid_partition(sys, num_domains):
    if sys.grid_shape is None:
        raise InvalidArgumentError("grid partitioning needs a generated lattice problem")
    dims = sys.grid_shape
    best = None
    for counts in _factorizations(num_domains, len(dims)):
        if any(c > d for c, d in zip(counts, dims)):
            continue
        # interface area of the slicing; lexicographic counts break ties
        cut = sum((c - 1) * (sys.n // d) for c, d in zip(counts, dims))
        if best is None or cut < best[0]:
            best = (cut, counts)
    if best is None:
        raise InvalidArgumentError(f"cannot slice grid {dims} into {num_domains} boxes")
    counts = best[1]
    coords = np.unravel_index(np.arange(sys.n), dims)
    box = [c * k // d for c, k, d in zip(coords, counts, dims)]
    return np.ravel_multi_index(box, counts).astype(np.intp)


def _factorizations(n, parts):
    if parts == 1:
        yield (n,)
        return
    for f in range(1, n + 1):
        if n % f == 0:
            for rest in _factorizations(n // f, parts - 1):
                yield (f,) + rest


def _bfs_partition(a, num_domains):
    n = a.shape[0]
    base, extra = divmod(n, num_domains)
    targets = [base + (1 if d < extra else 0) for d in range(num_domains)]
    owner = np.full(n, -1, dtype=np.intp)
    indptr, indices = a.indptr, a.indices
    next_seed = 0
    frontier = deque()
    for d, target in enumerate(targets):
        size = 0
        # continue growing from vertices adjacent to earlier domains
        queue = deque(v for v in frontier if owner[v] < 0)
        frontier = deque()
        while size < target:
            if not queue:
                while owner[next_seed] >= 0:
                    next_seed += 1
                queue.append(next_seed)
            v = queue.popleft()
            if owner[v] >= 0:
                continue
            owner[v] = d
            size += 1
            for u in indices[indptr[v]:indptr[v + 1]]:
                if owner[u] < 0:
                    queue.append(u)
        frontier = queue
    return owner


@dataclass(frozen=True, eq=False)
class DomainProblem:
    """One domain: owned interior DOFs plus the interface DOFs it touches.

    ``a_bb`` holds this domain's weighted share of the interface block and
    ``f_b`` the matching share of the right-hand side.
    """

    domain_id: int
    interior: np.ndarray
    interface: np.ndarray
    a_ii: sp.csr_matrix
    a_ib: sp.csr_matrix
    a_bb: sp.csr_matrix
    f_i: np.ndarray
    f_b: np.ndarray
    neighbor_ids: frozenset = field(default_factory=frozenset)

    @property
    def n_interior(self):
        return len(self.interior)

    @property
    def n_interface(self):
        return len(self.interface)

    def features(self):
        """Cost-model features: interior DOFs, interior nonzeros, interface size."""
        return (float(self.n_interior), float(self.a_ii.nnz), float(self.n_interface))


def interface_mask(sys, part):
    """DOFs coupled to a DOF owned by a higher-numbered domain."""
    a = sp.coo_matrix(sys.matrix)
    owner = part.owner
    mask = np.zeros(sys.n, dtype=bool)
    mask[a.row[owner[a.col] > owner[a.row]]] = True
    return mask


def split_domain_dofs(sys, part):
    a = sys.matrix
    owner = np.asarray(part.owner)
    iface = interface_mask(sys, part)
    coo = sp.coo_matrix(a)

    # interface set of each domain: interface DOFs it owns or couples to
    sel = iface[coo.col]
    pairs = np.unique(np.stack([owner[coo.row[sel]], coo.col[sel]]), axis=1)
    members = [np.zeros(0, dtype=np.intp)] * part.num_domains
    if pairs.size:
        split = np.searchsorted(pairs[0], np.arange(part.num_domains + 1))
        members = [pairs[1, split[d]:split[d + 1]] for d in range(part.num_domains)]

    # weight of an interface-interface entry = number of domains seeing both ends
    ifc = np.flatnonzero(iface)
    local = np.full(sys.n, -1, dtype=np.intp)
    local[ifc] = np.arange(len(ifc))
    inc_rows = np.concatenate([np.full(len(m), d) for d, m in enumerate(members)]) if ifc.size else np.zeros(0)
    inc_cols = np.concatenate([local[m] for m in members]) if ifc.size else np.zeros(0)
    incidence = sp.csr_matrix((np.ones(len(inc_rows)), (inc_rows, inc_cols)),
                              shape=(part.num_domains, len(ifc)))
    a_gg = a[ifc][:, ifc].tocsr()
    shared = (incidence.T @ incidence).tocsr()
    pattern = a_gg.copy()
    pattern.data = np.ones_like(pattern.data)
    counts = pattern.multiply(shared).tocsr()
    counts.sort_indices()
    a_gg.sort_indices()
    weighted = a_gg.copy()
    weighted.data = a_gg.data / _aligned(counts, a_gg)
    dcount = np.asarray(shared.diagonal()).ravel()

    rhs = sys.rhs
    neighbors = _neighbor_sets(members, part.num_domains)
    domains = []
    for d in range(part.num_domains):
        owned = np.flatnonzero(owner == d)
        interior = owned[~iface[owned]]
        interface = members[d]
        a_ii = a[interior][:, interior].tocsr()
        if sys.shift:
            a_ii = (a_ii + sys.shift * sp.identity(len(interior), format="csr")).tocsr()
        li = local[interface]
        domains.append(DomainProblem(
            domain_id=d,
            interior=interior,
            interface=interface,
            a_ii=a_ii,
            a_ib=a[interior][:, interface].tocsr(),
            a_bb=weighted[li][:, li].tocsr(),
            f_i=rhs[interior],
            f_b=rhs[interface] / dcount[li][:, None],
            neighbor_ids=frozenset(neighbors[d]),
        ))
    return domains


def _aligned(counts, ref):
    """Values of ``counts`` laid out on the sparsity of ``ref`` (same pattern)."""
    if counts.nnz != ref.nnz or not np.array_equal(counts.indices, ref.indices):
        raise AssertionError("interface weight pattern mismatch")
    return counts.data


def _neighbor_sets(members, num_domains):
    seen = {}
    for d, m in enumerate(members):
        for v in m.tolist():
            seen.setdefault(v, []).append(d)
    out = [set() for _ in range(num_domains)]
    for ds in seen.values():
        for x, y in itertools.permutations(ds, 2):
            out[x].add(y)
    return out


def scatter_interface(domains, n):
    """Sum of every domain's ``a_bb`` scattered to global indices (n x n)."""
    total = sp.csr_matrix((n, n))
    for dp in domains:
        if dp.n_interface:
            blk = sp.coo_matrix(dp.a_bb)
            total = total + sp.csr_matrix(
                (blk.data, (dp.interface[blk.row], dp.interface[blk.col])), shape=(n, n))
    return total.tocsr()
