"""Fill-reducing ordering: approximate minimum degree on a quotient graph."""
import heapq

import numpy as np
import scipy.sparse as sp


def minimum_degree(a):
    """Return an approximate-minimum-degree elimination order of ``a``.

    Only the sparsity pattern of the symmetric matrix is used.  Eliminated
    pivots become elements; variable degrees are updated with the usual AMD
    upper bound ``|A_i| + |L_p \\ i| + sum_e |L_e \\ L_p|`` and elements whose
    variables are all covered by the new element are absorbed.  Ties are
    broken by variable index, so the order is deterministic.
    """
    a = sp.csr_matrix(a)
    n = a.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.intp)
    indptr, indices = a.indptr, a.indices
    adj = [set(indices[indptr[i]:indptr[i + 1]].tolist()) for i in range(n)]
    for i in range(n):
        adj[i].discard(i)
    elems = [set() for _ in range(n)]
    evars = {}
    degree = [len(s) for s in adj]
    heap = [(degree[i], i) for i in range(n)]
    heapq.heapify(heap)
    done = np.zeros(n, dtype=bool)
    order = []

    while heap:
        deg, p = heapq.heappop(heap)
        if done[p] or deg != degree[p]:
            continue
        done[p] = True
        order.append(p)
        absorbed = elems[p]
        lp = set(adj[p])
        for e in absorbed:
            lp |= evars.pop(e)
        lp.discard(p)
        evars[p] = lp
        elems[p] = set()
        adj[p] = set()

        # w[e] = |L_e \ L_p| for every element touching L_p
        w = {}
        for i in lp:
            adj[i].discard(p)
            adj[i] -= lp
            elems[i] -= absorbed
            for e in elems[i]:
                if e in w:
                    w[e] -= 1
                else:
                    w[e] = len(evars[e]) - 1
            elems[i].add(p)

        covered = [e for e, we in w.items() if we == 0]
        for e in covered:
            for i in evars.pop(e):
                elems[i].discard(e)

        remaining = n - len(order)
        size = len(lp)
        for i in lp:
            ext = len(adj[i]) + size - 1
            for e in elems[i]:
                if e != p:
                    ext += w.get(e, len(evars[e]))
            new = min(remaining - 1, degree[i] + size - 1, ext)
            if new != degree[i]:
                degree[i] = new
                heapq.heappush(heap, (new, i))
    return np.asarray(order, dtype=np.intp)


def inverse_permutation(perm):
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv
