"""Block-sparse reduced matrix, block fill analysis and the reference block LDL^T."""
import json
from dataclasses import dataclass, field

import numpy as np

from . import dense
from .errors import AssemblyError, InvalidArgumentError


@dataclass(frozen=True, eq=False)
class BlockLayout:
    """Row blocks of the reduced system: one per domain owning interface DOFs."""

    block_domains: tuple
    block_dofs: tuple
    n: int

    @classmethod
    def from_domains(cls, domains, part):
        iface = np.unique(np.concatenate([dp.interface for dp in domains])) if domains else np.zeros(0, int)
        iface = iface.astype(np.intp)
        owners = np.asarray(part.owner)[iface]
        block_domains, block_dofs = [], []
        for d in range(part.num_domains):
            dofs = iface[owners == d]
            if dofs.size:
                block_domains.append(d)
                block_dofs.append(dofs)
        return cls(tuple(block_domains), tuple(block_dofs), len(part.owner))

    @property
    def num_blocks(self):
        return len(self.block_dofs)

    @property
    def block_sizes(self):
        return [len(d) for d in self.block_dofs]

    @property
    def interface_dofs(self):
        return np.concatenate(self.block_dofs) if self.block_dofs else np.zeros(0, dtype=np.intp)

    def locate(self, dofs):
        """Block index and position within the block for each global DOF."""
        table = self.__dict__.get("_table")
        if table is None:
            blk = np.full(self.n, -1, dtype=np.intp)
            loc = np.full(self.n, -1, dtype=np.intp)
            for k, d in enumerate(self.block_dofs):
                blk[d] = k
                loc[d] = np.arange(len(d))
            table = (blk, loc)
            object.__setattr__(self, "_table", table)
        dofs = np.asarray(dofs, dtype=np.intp)
        blk, loc = table[0][dofs], table[1][dofs]
        if np.any(blk < 0):
            raise AssemblyError("DOF outside the interface layout")
        return blk, loc


def contribution_pieces(contrib, layout):
    """Split a domain's Schur contribution along the block layout.

    Returns ``(matrix_pieces, rhs_pieces)``: ``{(bi, bj): (li, lj, sub)}``
    for ``bi >= bj`` and ``{bi: (li, rows)}``.
    """
    s, g = contrib.s_local, contrib.g_local
    nb = len(contrib.interface)
    if s.shape != (nb, nb) or g.shape[0] != nb:
        raise AssemblyError(
            f"domain {contrib.domain_id}: S{s.shape}/g{g.shape} inconsistent with {nb} interface DOFs")
    return matrix_pieces(s, contrib.interface, layout), rhs_pieces(g, contrib.interface, layout)


def _groups(interface, layout):
    if len(interface) == 0:
        return {}, None
    blk, loc = layout.locate(interface)
    return {b: np.flatnonzero(blk == b) for b in np.unique(blk).tolist()}, loc


def matrix_pieces(s, interface, layout):
    groups, loc = _groups(interface, layout)
    return {(bi, bj): (loc[ri], loc[rj], s[np.ix_(ri, rj)])
            for bi, ri in groups.items() for bj, rj in groups.items() if bi >= bj}


def rhs_pieces(g, interface, layout):
    groups, loc = _groups(interface, layout)
    return {bi: (loc[ri], g[ri]) for bi, ri in groups.items()}


def accumulate_block(shape, pieces, out=None):
    """Zero block plus every ``(li, lj, sub)`` piece, added in the given order.

    ``out`` may be a preallocated zero block that is filled in place.
    """
    out = np.zeros(shape) if out is None else out
    for li, lj, sub in pieces:
        out[np.ix_(li, lj)] += sub
    return out


def accumulate_rhs(shape, pieces):
    out = np.zeros(shape)
    for li, rows in pieces:
        out[li] += rows
    return out


@dataclass(eq=False)
class BlockMatrix:
    layout: BlockLayout
    blocks: dict
    rhs_blocks: list

    @property
    def num_blocks(self):
        return self.layout.num_blocks

    @property
    def block_sizes(self):
        return self.layout.block_sizes

    def pattern(self):
        return set(self.blocks)

    def to_dense(self):
        sizes = self.block_sizes
        off = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        out = np.zeros((off[-1], off[-1]))
        for (i, j), b in self.blocks.items():
            out[off[i]:off[i + 1], off[j]:off[j + 1]] = b
            if i != j:
                out[off[j]:off[j + 1], off[i]:off[i + 1]] = b.T
        return out

    def dense_rhs(self):
        if not self.rhs_blocks:
            return np.zeros((0, 1))
        return np.concatenate(self.rhs_blocks, axis=0)

    def to_json(self):
        return json.dumps({
            "block_sizes": self.block_sizes,
            "block_domains": list(self.layout.block_domains),
            "blocks": [{"row": i, "col": j, "data": b.ravel().tolist()}
                       for (i, j), b in sorted(self.blocks.items())],
            "rhs": [r.tolist() for r in self.rhs_blocks],
        })

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        sizes = obj["block_sizes"]
        offs = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        dofs = tuple(np.arange(offs[k], offs[k + 1]) for k in range(len(sizes)))
        layout = BlockLayout(tuple(obj.get("block_domains", range(len(sizes)))), dofs, int(offs[-1]))
        blocks = {(b["row"], b["col"]): np.array(b["data"], dtype=float).reshape(sizes[b["row"]], sizes[b["col"]])
                  for b in obj["blocks"]}
        rhs = [np.array(r, dtype=float).reshape(sizes[k], -1) for k, r in enumerate(obj["rhs"])]
        return cls(layout, blocks, rhs)


def assemble_dual_matrix(contribs, part, layout=None, domains=None):
    """Scatter-add every domain's ``S`` and ``g`` into the block layout.

    Contributions are summed in ascending domain order; the executor uses
    the same order so both paths produce identical blocks.
    """
    if layout is None:
        if domains is None:
            raise InvalidArgumentError("need the domain list or a layout")
        layout = BlockLayout.from_domains(domains, part)
    if len(contribs) != part.num_domains:
        raise AssemblyError(f"expected {part.num_domains} contributions, got {len(contribs)}")
    nrhs = max((c.g_local.shape[1] for c in contribs if c.g_local.ndim == 2), default=1)
    mat_pieces, rhs_pieces = {}, {}
    for c in sorted(contribs, key=lambda c: c.domain_id):
        mats, rhs = contribution_pieces(c, layout)
        for key, piece in mats.items():
            mat_pieces.setdefault(key, []).append(piece)
        for key, piece in rhs.items():
            rhs_pieces.setdefault(key, []).append(piece)
    sizes = layout.block_sizes
    blocks = {(i, j): accumulate_block((sizes[i], sizes[j]), p) for (i, j), p in mat_pieces.items()}
    rhs = [accumulate_rhs((sizes[k], nrhs), rhs_pieces.get(k, [])) for k in range(layout.num_blocks)]
    return BlockMatrix(layout, blocks, rhs)


def block_pattern(domains, layout):
    """Lower-triangle block pattern implied by which blocks each domain touches."""
    pattern = {(k, k) for k in range(layout.num_blocks)}
    for dp in domains:
        if dp.n_interface:
            blocks = np.unique(layout.locate(dp.interface)[0]).tolist()
            pattern.update((i, j) for i in blocks for j in blocks if i >= j)
    return pattern


@dataclass(frozen=True, eq=False)
class SymbolicFactorization:
    num_blocks: int
    pattern: frozenset
    fill_pattern: frozenset
    col_rows: tuple = field(repr=False)
    update_steps: dict = field(repr=False)
    parent: tuple = ()

    def rows_below(self, k):
        """Block rows ``i > k`` of column ``k`` of L, ascending."""
        return self.col_rows[k]

    def row_cols(self, i):
        """Block columns ``j < i`` of row ``i`` of L, ascending."""
        cache = self.__dict__.get("_rows")
        if cache is None:
            cache = [[] for _ in range(self.num_blocks)]
            for k in range(self.num_blocks):
                for r in self.col_rows[k]:
                    cache[r].append(k)
            object.__setattr__(self, "_rows", cache)
        return cache[i]

    @property
    def fill_in(self):
        return self.fill_pattern - self.pattern


def symbolic_block_factorize(pattern, num_blocks=None):
    """Smallest superset of ``pattern`` closed under block elimination.

    Eliminating block column ``k`` couples every pair of rows below it:
    ``(i, k)`` and ``(j, k)`` with ``i >= j > k`` create ``(i, j)``.
    """
    pattern = {(int(i), int(j)) for i, j in pattern}
    if num_blocks is None:
        num_blocks = 1 + max((i for i, _ in pattern), default=-1)
    for i, j in pattern:
        if i < j:
            raise InvalidArgumentError(f"pattern entry ({i}, {j}) is not in the lower triangle")
        if i >= num_blocks:
            raise InvalidArgumentError(f"pattern entry ({i}, {j}) outside {num_blocks} blocks")
    missing = [k for k in range(num_blocks) if (k, k) not in pattern]
    if missing:
        raise InvalidArgumentError(f"missing diagonal blocks {missing}")
    cols = [set() for _ in range(num_blocks)]
    for i, j in pattern:
        if i > j:
            cols[j].add(i)
    updates = {}
    parent = [-1] * num_blocks
    col_rows = []
    for k in range(num_blocks):
        rows = sorted(cols[k])
        col_rows.append(tuple(rows))
        if rows:
            parent[k] = rows[0]
        for a, j in enumerate(rows):
            for i in rows[a:]:
                updates.setdefault((i, j), []).append(k)
                if i > j:
                    cols[j].add(i)
    fill = {(k, k) for k in range(num_blocks)}
    for k, rows in enumerate(col_rows):
        fill.update((i, k) for i in rows)
    return SymbolicFactorization(num_blocks, frozenset(pattern), frozenset(fill), tuple(col_rows),
                                 updates, tuple(parent))


@dataclass(eq=False)
class BlockFactor:
    layout: BlockLayout
    symbolic: SymbolicFactorization
    diag: list
    lower: dict

    def pivot_sizes(self, k):
        return self.diag[k].pivot_sizes


def sequential_block_ldlt(k_mat, symbolic=None):
    """Right-looking block LDL^T in block order ``0..D-1``.

    For each ``k``: factorize ``(k, k)``, triangular-solve every ``(i, k)``,
    then apply the updates ``(i, j, k)``; each destination therefore sees its
    updates in ascending ``k``.  Fill blocks start as zeros.
    """
    if symbolic is None:
        symbolic = symbolic_block_factorize(k_mat.pattern(), k_mat.num_blocks)
    sizes = k_mat.block_sizes
    work = {key: np.array(b, dtype=float, copy=True) for key, b in k_mat.blocks.items()}
    for key in symbolic.fill_pattern:
        if key not in work:
            work[key] = np.zeros((sizes[key[0]], sizes[key[1]]))
    diag, lower = [], {}
    for k in range(symbolic.num_blocks):
        fac = dense.kernel_factorize_block(work.pop((k, k)), block=k)
        diag.append(fac)
        rows = symbolic.rows_below(k)
        wsp = {}
        for i in rows:
            lower[(i, k)], wsp[i] = dense.kernel_trisolve_block(work.pop((i, k)), fac, with_workspace=True)
        for a, j in enumerate(rows):
            for i in rows[a:]:
                work[(i, j)] = dense.kernel_update_block(work[(i, j)], lower[(i, k)], wsp[j])
    return BlockFactor(k_mat.layout, symbolic, diag, lower)


def block_solve(factor, rhs_blocks):
    """Forward substitution, block pivot solve, backward substitution."""
    sym = factor.symbolic
    nb = sym.num_blocks
    if len(rhs_blocks) != nb:
        raise InvalidArgumentError(f"expected {nb} rhs blocks, got {len(rhs_blocks)}")
    for k, b in enumerate(rhs_blocks):
        if np.asarray(b).shape[0] != factor.diag[k].n:
            raise InvalidArgumentError(f"rhs block {k} has {np.asarray(b).shape[0]} rows, expected {factor.diag[k].n}")
    y = []
    for k in range(nb):
        terms = [(factor.lower[(k, j)], y[j]) for j in sym.row_cols(k)]
        y.append(dense.fwd_solve_block(rhs_blocks[k], terms, factor.diag[k]))
    w = [dense.diag_solve_block(y[k], factor.diag[k]) for k in range(nb)]
    x = [None] * nb
    for k in range(nb - 1, -1, -1):
        terms = [(factor.lower[(i, k)], x[i]) for i in sym.rows_below(k)]
        x[k] = dense.bwd_solve_block(w[k], terms, factor.diag[k])
    return x


def reconstruct(factor):
    """Assemble ``L D L^T`` back into a dense matrix (test helper)."""
    sizes = factor.layout.block_sizes
    off = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    n = off[-1]
    L = np.zeros((n, n))
    D = np.zeros((n, n))
    for k, fac in enumerate(factor.diag):
        sl = slice(off[k], off[k + 1])
        p = np.zeros((fac.n, fac.n))
        p[fac.perm, np.arange(fac.n)] = 1.0
        # column space of block k lives in pivot order: L_kk = P^T lower
        L[sl, sl] = p @ fac.lower
        D[sl, sl] = fac.D()
    for (i, k), lik in factor.lower.items():
        L[off[i]:off[i + 1], off[k]:off[k + 1]] = lik
    return L @ D @ L.T
