"""Multifrontal sparse LDL^T with Bunch-Kaufman pivoting inside supernodes.

Pivoting is confined to the fully summed block of each front (no delayed
pivots), so a front whose pivot block is singular raises even when a pivot
from a later front would have rescued it.
"""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dense import kernel_trisolve_block, kernel_update_block, ldl_factor
from .errors import FactorizationError
from .ordering import minimum_degree


def elimination_tree(a):
    """Parent array of the elimination tree of a symmetric CSC pattern."""
    a = sp.csc_matrix(a)
    n = a.shape[0]
    parent = np.full(n, -1, dtype=np.intp)
    ancestor = np.full(n, -1, dtype=np.intp)
    indptr, indices = a.indptr, a.indices
    for j in range(n):
        for i in indices[indptr[j]:indptr[j + 1]]:
            while i != -1 and i < j:
                nxt = ancestor[i]
                ancestor[i] = j
                if nxt == -1:
                    parent[i] = j
                i = nxt
    return parent


def postorder(parent):
    n = len(parent)
    children = [[] for _ in range(n)]
    roots = []
    for v in range(n):
        (children[parent[v]] if parent[v] >= 0 else roots).append(v)
    order = []
    for r in roots:
        stack = [(r, 0)]
        while stack:
            v, k = stack.pop()
            if k < len(children[v]):
                stack.append((v, k + 1))
                stack.append((children[v][k], 0))
            else:
                order.append(v)
    return np.asarray(order, dtype=np.intp)


def column_structures(a, parent):
    """Row structure (strictly below the diagonal) of every column of L."""
    a = sp.csc_matrix(a)
    n = a.shape[0]
    struct = [None] * n
    pending = [[] for _ in range(n)]
    for j in range(n):
        rows = a.indices[a.indptr[j]:a.indptr[j + 1]]
        s = set(rows[rows > j].tolist())
        for c in pending[j]:
            s |= struct[c]
        s.discard(j)
        struct[j] = s
        if parent[j] >= 0:
            pending[parent[j]].append(j)
    return struct


@dataclass
class Supernode:
    start: int
    end: int  # exclusive
    rows: np.ndarray
    parent: int = -1


def find_supernodes(parent, struct, relax_cols=8, relax_fraction=0.05):
    """Fundamental supernodes of a postordered tree, then relaxed amalgamation."""
    n = len(parent)
    nchild = np.zeros(n, dtype=np.intp)
    for v in range(n):
        if parent[v] >= 0:
            nchild[parent[v]] += 1
    starts = []
    for j in range(n):
        if j == 0 or not (parent[j - 1] == j and nchild[j] == 1
                          and len(struct[j - 1]) == len(struct[j]) + 1):
            starts.append(j)
    starts.append(n)
    nodes = [Supernode(starts[s], starts[s + 1], np.asarray(sorted(struct[starts[s + 1] - 1]), dtype=np.intp))
             for s in range(len(starts) - 1)]
    col_to_node = np.empty(n, dtype=np.intp)
    for s, node in enumerate(nodes):
        col_to_node[node.start:node.end] = s
    for s, node in enumerate(nodes):
        p = parent[node.end - 1]
        node.parent = int(col_to_node[p]) if p >= 0 else -1

    # Merge a child into its parent when the child's columns immediately
    # precede the parent's and few explicit zeros are introduced.
    kids = [[] for _ in nodes]
    for s, node in enumerate(nodes):
        if node.parent >= 0:
            kids[node.parent].append(s)
    real = [_trapezoid(node.end - node.start, len(node.rows)) for node in nodes]
    alive = [True] * len(nodes)
    for s, node in enumerate(nodes):
        c = s - 1
        while c >= 0 and nodes[c].parent == s and nodes[c].end == node.start:
            child = nodes[c]
            nc, npar = child.end - child.start, node.end - node.start
            merged = _trapezoid(nc + npar, len(node.rows))
            zeros = merged - real[s] - real[c]
            if nc + npar > relax_cols and zeros > relax_fraction * merged:
                break
            alive[c] = False
            node.start = child.start
            real[s] += real[c]
            for g in kids[c]:
                nodes[g].parent = s
            kids[s].extend(kids[c])
            c -= 1
            while c >= 0 and not alive[c]:
                c -= 1
    keep = [s for s in range(len(nodes)) if alive[s]]
    renum = {s: t for t, s in enumerate(keep)}
    out = []
    for s in keep:
        node = nodes[s]
        out.append(Supernode(node.start, node.end, node.rows, renum[node.parent] if node.parent >= 0 else -1))
    return out


def _trapezoid(ncols, nrows):
    return ncols * (ncols + 1) // 2 + ncols * nrows


class MultifrontalLDL:
    """Sparse ``P A P^T = L D L^T`` factor of a symmetric matrix.

    ``order`` is the fill-reducing permutation (computed when omitted);
    the stored permutation additionally includes the elimination-tree
    postorder and the pivoting done inside each supernode.
    """

    def __init__(self, a, order=None, label=None):
        a = sp.csc_matrix(a, dtype=float)
        n = a.shape[0]
        self.n = n
        self.label = label
        if order is None:
            order = minimum_degree(a)
        order = np.asarray(order, dtype=np.intp)
        b = a[order][:, order].tocsc()
        parent = elimination_tree(b)
        post = postorder(parent)
        self.order = order[post]
        b = a[self.order][:, self.order].tocsc()
        b.sort_indices()
        parent = elimination_tree(b)
        struct = column_structures(b, parent)
        self.nodes = find_supernodes(parent, struct)
        self._factor(b)

    def _factor(self, b):
        n = self.n
        mark = np.full(n, -1, dtype=np.intp)
        updates = {}
        children = [[] for _ in self.nodes]
        for s, node in enumerate(self.nodes):
            if node.parent >= 0:
                children[node.parent].append(s)
        self.pivots = []
        self.l21 = []
        indptr, indices, data = b.indptr, b.indices, b.data
        for s, node in enumerate(self.nodes):
            cols = np.arange(node.start, node.end)
            idx = np.concatenate([cols, node.rows])
            mark[idx] = np.arange(len(idx))
            ns = len(cols)
            front = np.zeros((len(idx), len(idx)))
            lo, hi = indptr[node.start], indptr[node.end]
            rows = indices[lo:hi]
            colj = np.repeat(cols, np.diff(indptr[node.start:node.end + 1]))
            vals = data[lo:hi]
            keep = rows >= colj
            r, c, v = mark[rows[keep]], mark[colj[keep]], vals[keep]
            front[r, c] = v
            front[c, r] = v
            for ch in children[s]:
                u, urows = updates.pop(ch)
                m = mark[urows]
                front[np.ix_(m, m)] += u
            try:
                fac = ldl_factor(front[:ns, :ns], block=s)
            except FactorizationError as exc:
                raise FactorizationError(self.label, int(self.order[node.start + exc.pivot])) from None
            l21, w21 = kernel_trisolve_block(front[ns:, :ns], fac, with_workspace=True)
            if len(node.rows):
                updates[s] = (kernel_update_block(front[ns:, ns:], l21, w21), node.rows)
            self.pivots.append(fac)
            self.l21.append(l21)
            mark[idx] = -1

    @property
    def nnz(self):
        return sum(f.n * (f.n + 1) // 2 + l.size for f, l in zip(self.pivots, self.l21))

    @property
    def nbytes(self):
        return sum(f.nbytes + l.nbytes for f, l in zip(self.pivots, self.l21))

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        vec = rhs.ndim == 1
        x = (rhs[:, None] if vec else rhs)[self.order].copy()
        ys = []
        for node, fac, l21 in zip(self.nodes, self.pivots, self.l21):
            y = fac.forward(x[node.start:node.end])
            if len(node.rows):
                x[node.rows] -= l21 @ y
            ys.append(fac.apply_dinv(y))
        for s in range(len(self.nodes) - 1, -1, -1):
            node, fac, l21 = self.nodes[s], self.pivots[s], self.l21[s]
            t = ys[s]
            if len(node.rows):
                t = t - l21.T @ x[node.rows]
            x[node.start:node.end] = fac.backward(t)
        out = np.empty_like(x)
        out[self.order] = x
        return out[:, 0] if vec else out

    def permutation(self):
        """Global pivot order ``q`` such that ``A[q][:, q] = L D L^T``."""
        q = np.empty(self.n, dtype=np.intp)
        for node, fac in zip(self.nodes, self.pivots):
            q[node.start:node.end] = node.start + fac.perm
        return self.order[q]

    def factors(self):
        """Explicit sparse ``(L, D)`` in the order returned by ``permutation``."""
        n = self.n
        pos = np.empty(n, dtype=np.intp)
        for node, fac in zip(self.nodes, self.pivots):
            pos[node.start + fac.perm] = node.start + np.arange(fac.n)
        rows, cols, vals = [], [], []
        drows, dcols, dvals = [], [], []
        for node, fac, l21 in zip(self.nodes, self.pivots, self.l21):
            base = node.start
            lr, lc = np.nonzero(np.tril(fac.lower))
            rows.append(base + lr)
            cols.append(base + lc)
            vals.append(fac.lower[lr, lc])
            if l21.size:
                rr, cc = np.nonzero(l21)
                rows.append(pos[node.rows[rr]])
                cols.append(base + cc)
                vals.append(l21[rr, cc])
            k = np.arange(fac.n)
            drows.append(base + k)
            dcols.append(base + k)
            dvals.append(fac.d)
            two = np.flatnonzero(fac.e)
            drows += [base + two, base + two + 1]
            dcols += [base + two + 1, base + two]
            dvals += [fac.e[two], fac.e[two]]
        cat = lambda parts, dt=np.intp: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dtype=dt)
        L = sp.csr_matrix((cat(vals, float), (cat(rows), cat(cols))), shape=(n, n))
        D = sp.csr_matrix((cat(dvals, float), (cat(drows), cat(dcols))), shape=(n, n))
        return L, D

