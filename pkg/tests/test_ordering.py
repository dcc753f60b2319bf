import numpy as np
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from d3m.ordering import inverse_permutation, minimum_degree

from oracles import laplacian


def _fill(a, order):
    """Nonzeros of the Cholesky factor of a permuted SPD matrix (dense oracle)."""
    b = a[order][:, order].toarray()
    b = b + np.eye(b.shape[0]) * (np.abs(b).sum(axis=1).max() + 1)
    return int(np.count_nonzero(np.abs(np.linalg.cholesky(b)) > 1e-300))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.floats(0.02, 0.3), st.integers(0, 2 ** 31))
def test_is_permutation(n, density, seed):
    m = sp.random(n, n, density=density, random_state=seed)
    a = (m + m.T + sp.identity(n)).tocsr()
    order = minimum_degree(a)
    assert sorted(order.tolist()) == list(range(n))
    assert np.array_equal(inverse_permutation(order)[order], np.arange(n))


def test_deterministic():
    a = laplacian((9, 9))
    assert np.array_equal(minimum_degree(a), minimum_degree(a))


def test_reduces_fill_on_grid():
    a = laplacian((20, 20))
    natural = _fill(a, np.arange(a.shape[0]))
    assert _fill(a, minimum_degree(a)) < 0.7 * natural


def test_arrow_matrix_hub_last():
    n = 12
    a = sp.lil_matrix((n, n))
    a.setdiag(4.0)
    a[0, 1:] = 1.0
    a[1:, 0] = 1.0
    order = minimum_degree(a.tocsr())
    # eliminating the hub first would fill the whole matrix
    assert order[-1] == 0 or _fill(a.tocsr(), order) == 2 * n - 1
