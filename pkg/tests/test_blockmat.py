import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d3m.blockmat import (BlockLayout, BlockMatrix, assemble_dual_matrix, block_pattern, block_solve,
                          reconstruct, sequential_block_ldlt, symbolic_block_factorize)
from d3m.errors import InvalidArgumentError
from d3m.primal import compute_dtn, factor_interior
from d3m.problem import Partition, generate_grid_problem, partition_domains, split_domain_dofs

from oracles import brute_force_fill, reference_solve, schur


def _reduce(s, part):
    doms = split_domain_dofs(s, part)
    contribs = [compute_dtn(dp, factor_interior(dp)) for dp in doms]
    return doms, assemble_dual_matrix(contribs, part, domains=doms)


def test_chain_reduced_system():
    s = generate_grid_problem((5,))
    doms, k = _reduce(s, Partition(2, np.array([0, 0, 0, 1, 1])))
    assert k.num_blocks == 1 and k.layout.block_domains == (0,)
    assert abs(k.blocks[(0, 0)][0, 0] - 2 / 3) <= 1e-15
    assert abs(k.rhs_blocks[0][0, 0] - 3.0) <= 1e-15
    x = block_solve(sequential_block_ldlt(k), k.rhs_blocks)
    assert abs(x[0][0, 0] - 4.5) <= 1e-14


@pytest.mark.parametrize("dims,nd,k", [((12, 12), 4, 0.0), ((16, 10), 8, 0.9), ((6, 6, 6), 8, 1.1)])
def test_reduced_matrix_is_global_schur(dims, nd, k):
    s = generate_grid_problem(dims, "helmholtz", k=k, rhs="random", seed=1)
    part = partition_domains(s, nd)
    doms, kmat = _reduce(s, part)
    iface = kmat.layout.interface_dofs
    interior = np.setdiff1d(np.arange(s.n), iface)
    a = s.matrix
    s_ref, g_ref = schur(a[interior][:, interior], a[interior][:, iface], a[iface][:, iface],
                         s.rhs[interior], s.rhs[iface])
    assert np.allclose(kmat.to_dense(), s_ref, atol=1e-11 * np.abs(s_ref).max())
    assert np.allclose(kmat.dense_rhs(), g_ref, atol=1e-11 * np.abs(g_ref).max())
    assert set(kmat.pattern()) <= block_pattern(doms, kmat.layout)


@pytest.mark.parametrize("dims,nd,k", [((20, 20), 16, 0.7), ((9, 9, 9), 27, 1.3), ((60,), 6, 0.2)])
def test_block_ldlt_solves_reduced_system(dims, nd, k):
    s = generate_grid_problem(dims, "helmholtz", k=k, rhs="random", seed=4)
    doms, kmat = _reduce(s, partition_domains(s, nd))
    fac = sequential_block_ldlt(kmat)
    dense = kmat.to_dense()
    assert np.linalg.norm(reconstruct(fac) - dense) <= 1e-12 * np.linalg.norm(dense) * 10
    x = np.concatenate(block_solve(fac, kmat.rhs_blocks))
    assert np.allclose(x, reference_solve(dense, kmat.dense_rhs()), atol=1e-10 * np.abs(x).max())


def test_json_round_trip():
    s = generate_grid_problem((8, 8), rhs="random", seed=2)
    _, kmat = _reduce(s, partition_domains(s, 4))
    back = BlockMatrix.from_json(kmat.to_json())
    assert back.pattern() == kmat.pattern()
    assert np.array_equal(back.to_dense(), kmat.to_dense())
    assert np.array_equal(back.dense_rhs(), kmat.dense_rhs())
    json.loads(kmat.to_json())


def test_symbolic_chain_and_arrow():
    chain = {(0, 0), (1, 1), (2, 2), (3, 3), (1, 0), (2, 1), (3, 2)}
    assert symbolic_block_factorize(chain).fill_in == frozenset()
    arrow = {(k, k) for k in range(4)} | {(1, 0), (2, 0), (3, 0)}
    symb = symbolic_block_factorize(arrow)
    assert symb.fill_in == {(2, 1), (3, 1), (3, 2)}
    assert symb.rows_below(0) == (1, 2, 3) and symb.row_cols(3) == [0, 1, 2]


def test_symbolic_errors():
    with pytest.raises(InvalidArgumentError):
        symbolic_block_factorize({(0, 0), (0, 1), (1, 1)})
    with pytest.raises(InvalidArgumentError):
        symbolic_block_factorize({(0, 0), (1, 0)})


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.floats(0.0, 0.6), st.integers(0, 2 ** 31))
def test_symbolic_matches_brute_force(nb, density, seed):
    rng = np.random.default_rng(seed)
    pattern = {(k, k) for k in range(nb)}
    pattern |= {(i, j) for i in range(nb) for j in range(i) if rng.random() < density}
    symb = symbolic_block_factorize(pattern, nb)
    assert set(symb.fill_pattern) == brute_force_fill(pattern, nb)


def test_layout_locate():
    s = generate_grid_problem((4, 4))
    part = partition_domains(s, 4)
    doms = split_domain_dofs(s, part)
    layout = BlockLayout.from_domains(doms, part)
    # the top-right quadrant's shared DOFs belong to the lower-numbered owner rows
    assert layout.block_domains == (0, 1, 2)
    blk, loc = layout.locate(layout.interface_dofs)
    assert np.array_equal(np.concatenate([layout.block_dofs[b][[l]] for b, l in zip(blk, loc)]),
                          layout.interface_dofs)
