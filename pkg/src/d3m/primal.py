"""Per-domain interior factorization, Schur (DtN) reduction and interior recovery."""
from dataclasses import dataclass

import numpy as np

from .dense import ldl_factor
from .errors import FactorizationError, InvalidArgumentError, SingularDomainError
from .sparse_ldl import MultifrontalLDL

DENSE_CROSSOVER = 256


@dataclass(frozen=True, eq=False)
class InteriorFactor:
    """LDL^T factor of a domain's interior block.

    ``impl`` is a ``DenseLDL`` below the dense crossover and a
    ``MultifrontalLDL`` above it; both expose ``solve``.
    """

    domain_id: int
    impl: object

    @property
    def n(self):
        return self.impl.n

    @property
    def sparse(self):
        return isinstance(self.impl, MultifrontalLDL)

    @property
    def perm(self):
        return self.impl.permutation() if self.sparse else self.impl.perm

    @property
    def nbytes(self):
        return self.impl.nbytes

    def factors(self):
        """``(L, D)`` with ``A[perm][:, perm] == L @ D @ L.T``."""
        if self.sparse:
            return self.impl.factors()
        return self.impl.lower, self.impl.D()

    def solve(self, b):
        if self.n == 0:
            return np.array(b, dtype=float, copy=True)
        return self.impl.solve(b)


@dataclass(frozen=True, eq=False)
class DtnContribution:
    domain_id: int
    s_local: np.ndarray
    g_local: np.ndarray
    interface: np.ndarray


def factor_interior(dp, crossover=DENSE_CROSSOVER):
    n = dp.n_interior
    try:
        if n <= crossover:
            impl = ldl_factor(dp.a_ii.toarray() if n else np.zeros((0, 0)), block=dp.domain_id)
        else:
            impl = MultifrontalLDL(dp.a_ii, label=dp.domain_id)
    except FactorizationError as exc:
        pivot = int(dp.interior[exc.pivot]) if exc.pivot is not None else None
        raise SingularDomainError(dp.domain_id, pivot) from None
    return InteriorFactor(dp.domain_id, impl)


def compute_dtn(dp, factor):
    """Schur complement of the interior block onto the domain interface.

    ``S = A_BB - A_IB^T A_II^{-1} A_IB`` and ``g = f_B - A_IB^T A_II^{-1} f_I``.
    """
    return DtnContribution(dp.domain_id, schur_matrix(dp, factor), reduce_rhs(dp, factor), dp.interface)


def schur_matrix(dp, factor):
    if factor.domain_id != dp.domain_id:
        raise InvalidArgumentError("factor belongs to another domain")
    s = dp.a_bb.toarray()
    if dp.n_interface and dp.n_interior:
        a_ib = dp.a_ib.toarray()
        if factor.sparse:
            s -= a_ib.T @ factor.solve(a_ib)
        else:
            # half solve: A_IB^T A_II^{-1} A_IB = W^T D^{-1} W with W = L^{-1} P A_IB
            w = factor.impl.forward(a_ib)
            s -= w.T @ factor.impl.apply_dinv(w)
    return 0.5 * (s + s.T)


def reduce_rhs(dp, factor, f_i=None, f_b=None):
    f_i = dp.f_i if f_i is None else np.asarray(f_i, dtype=float)
    g = np.array(dp.f_b if f_b is None else f_b, dtype=float, copy=True)
    if dp.n_interface and dp.n_interior:
        g -= dp.a_ib.T @ factor.solve(f_i)
    return g


def recover_primal(dp, factor, u_interface, f_i=None):
    """Interior unknowns ``A_II^{-1} (f_I - A_IB u_B)``."""
    f_i = dp.f_i if f_i is None else np.asarray(f_i, dtype=float)
    u_b = np.asarray(u_interface, dtype=float)
    vec = u_b.ndim == 1
    if vec:
        u_b = u_b[:, None]
    if f_i.ndim == 1:
        f_i = f_i[:, None]
    if u_b.shape[0] != dp.n_interface or f_i.shape[0] != dp.n_interior:
        raise InvalidArgumentError(
            f"expected {dp.n_interface} interface and {dp.n_interior} interior values, "
            f"got {u_b.shape[0]} and {f_i.shape[0]}")
    if dp.n_interior == 0:
        out = np.zeros((0, u_b.shape[1]))
    else:
        r = f_i - dp.a_ib @ u_b if dp.n_interface else f_i
        out = factor.solve(np.asarray(r))
    return out[:, 0] if vec else out


def dense_schur(dp):
    """Schur complement by dense elimination; an independent check of ``compute_dtn``."""
    a_ii = dp.a_ii.toarray()
    a_ib = dp.a_ib.toarray()
    s = dp.a_bb.toarray()
    if dp.n_interior and dp.n_interface:
        s = s - a_ib.T @ np.linalg.solve(a_ii, a_ib)
    return s

