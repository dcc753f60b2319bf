import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from d3m.errors import InvalidArgumentError, SingularDomainError
from d3m.primal import compute_dtn, dense_schur, factor_interior, recover_primal
from d3m.problem import DomainProblem, Partition, generate_grid_problem, partition_domains, split_domain_dofs

from oracles import schur


def _chain_domains():
    s = generate_grid_problem((5,))
    return split_domain_dofs(s, Partition(2, np.array([0, 0, 0, 1, 1])))


def test_chain_dtn_worked_example():
    # interior [[2,-1],[-1,2]], coupling -1 to the shared DOF, share of the diagonal = 1
    for dp in _chain_domains():
        c = compute_dtn(dp, factor_interior(dp))
        assert abs(c.s_local[0, 0] - 1 / 3) <= 1e-15
        # g = 0.5 + [1 1] A_II^{-1} e = 0.5 + 1
        assert abs(c.g_local[0, 0] - 1.5) <= 1e-15


def _random_domain(rng, ni, nb, shift, sparse_path):
    m = sp.random(ni, ni, density=min(1.0, 4.0 / max(ni, 1)), random_state=rng.integers(2 ** 31))
    a_ii = (m + m.T + sp.diags(rng.uniform(1, 2, ni)) * shift).tocsr()
    a_ib = sp.random(ni, nb, density=0.3, random_state=rng.integers(2 ** 31)).tocsr()
    bb = rng.standard_normal((nb, nb))
    return DomainProblem(0, np.arange(ni), np.arange(ni, ni + nb), a_ii, a_ib, sp.csr_matrix(bb + bb.T),
                         rng.standard_normal((ni, 1)), rng.standard_normal((nb, 1)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.integers(0, 20), st.sampled_from([4.0, -1.5, 0.7]), st.integers(0, 2 ** 31),
       st.sampled_from([0, 256]))
def test_dtn_matches_dense_oracle(ni, nb, shift, seed, crossover):
    rng = np.random.default_rng(seed)
    dp = _random_domain(rng, ni, nb, shift, crossover)
    a = dp.a_ii.toarray()
    if np.min(np.abs(np.linalg.eigvalsh(a))) < 1e-3:
        return
    try:
        f = factor_interior(dp, crossover=crossover)
    except SingularDomainError:
        assert crossover == 0  # only the supernode-confined sparse path may give up
        return
    c = compute_dtn(dp, f)
    s_ref, g_ref = schur(dp.a_ii, dp.a_ib, dp.a_bb, dp.f_i, dp.f_b)
    scale = max(np.linalg.norm(s_ref), 1.0) * np.linalg.cond(a)
    assert np.linalg.norm(c.s_local - s_ref) <= 1e-11 * scale
    assert np.linalg.norm(c.g_local - g_ref) <= 1e-11 * max(np.linalg.norm(g_ref), 1.0) * np.linalg.cond(a)
    assert np.allclose(dense_schur(dp), s_ref, atol=1e-9 * scale)


def test_recover_interior_solves_local_equation():
    s = generate_grid_problem((12, 10), "helmholtz", k=0.8, rhs="random", seed=2)
    part = partition_domains(s, 4)
    x_ref = np.linalg.solve(s.matrix.toarray(), s.rhs)
    for dp in split_domain_dofs(s, part):
        u = recover_primal(dp, factor_interior(dp), x_ref[dp.interface])
        assert np.allclose(u, x_ref[dp.interior], rtol=0, atol=1e-11 * np.abs(x_ref).max())
        u1 = recover_primal(dp, factor_interior(dp), x_ref[dp.interface, 0])
        assert u1.ndim == 1


def test_recover_rejects_wrong_length():
    dp = _chain_domains()[0]
    with pytest.raises(InvalidArgumentError):
        recover_primal(dp, factor_interior(dp), np.zeros(3))


def test_singular_domain_names_domain_and_dof():
    s = generate_grid_problem((6,), "helmholtz", k=0.0)
    a = s.matrix.tolil()
    a[4, 4] = 0.0
    a[4, 3] = a[3, 4] = a[4, 5] = a[5, 4] = 0.0
    from d3m.problem import SparseSystem
    bad = SparseSystem.from_matrix(a.tocsr())
    doms = split_domain_dofs(bad, Partition(2, np.array([0, 0, 0, 1, 1, 1])))
    with pytest.raises(SingularDomainError) as err:
        factor_interior(doms[1])
    assert err.value.domain_id == 1 and err.value.pivot == 4


def test_sparse_and_dense_paths_agree():
    s = generate_grid_problem((20, 20), "helmholtz", k=0.6)
    dp = split_domain_dofs(s, partition_domains(s, 2))[0]
    assert dp.n_interior > 100
    c_dense = compute_dtn(dp, factor_interior(dp, crossover=10 ** 6))
    c_sparse = compute_dtn(dp, factor_interior(dp, crossover=0))
    assert factor_interior(dp, crossover=0).sparse
    assert np.allclose(c_dense.s_local, c_sparse.s_local, atol=1e-11 * np.abs(c_dense.s_local).max())
