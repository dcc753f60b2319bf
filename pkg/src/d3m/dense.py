"""Dense symmetric indefinite LDL^T and the three block kernels.

The factorization wraps LAPACK ``dsytrf`` (Bunch-Kaufman 1x1/2x2 pivoting)
and converts its implicit interchange representation into an explicit
permutation, so that ``A[perm][:, perm] == L @ D @ L.T`` with ``L`` unit lower
triangular and ``D`` block diagonal.  Every block operation of the reduced
solve is expressed through the helpers in this module, which is what makes
sequential and parallel runs produce identical bits.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import blas, lapack

from .errors import FactorizationError, InvalidArgumentError

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class DenseLDL:
    """Pivoted factorization ``A[perm][:, perm] = lower @ D @ lower.T``.

    ``d`` holds the diagonal of D and ``e`` its first subdiagonal; ``e[k] != 0``
    marks a 2x2 pivot occupying rows ``k`` and ``k + 1``.
    """

    lower: np.ndarray
    perm: np.ndarray
    d: np.ndarray
    e: np.ndarray
    inv_d: np.ndarray
    inv_e: np.ndarray

    @property
    def n(self):
        return self.lower.shape[0]

    @property
    def nbytes(self):
        return sum(a.nbytes for a in (self.lower, self.perm, self.d, self.e, self.inv_d, self.inv_e))

    @property
    def pivot_sizes(self):
        sizes = []
        k = 0
        while k < self.n:
            step = 2 if k + 1 < self.n and self.e[k] != 0.0 else 1
            sizes.append(step)
            k += step
        return sizes

    def D(self):
        out = np.diag(self.d)
        if self.n > 1:
            idx = np.arange(self.n - 1)
            out[idx + 1, idx] = self.e
            out[idx, idx + 1] = self.e
        return out

    def reconstruct(self):
        """Return the original (unpermuted) matrix."""
        pa = self.lower @ self.D() @ self.lower.T
        out = np.empty_like(pa)
        out[np.ix_(self.perm, self.perm)] = pa
        return out

    def apply_dinv(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.apply_dinv(x[:, None])[:, 0]
        y = self.inv_d[:, None] * x
        if self.n > 1:
            y[:-1] += self.inv_e[:, None] * x[1:]
            y[1:] += self.inv_e[:, None] * x[:-1]
        return y

    def apply_d(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.apply_d(x[:, None])[:, 0]
        y = self.d[:, None] * x
        if self.n > 1:
            y[:-1] += self.e[:, None] * x[1:]
            y[1:] += self.e[:, None] * x[:-1]
        return y

    def forward(self, b):
        """``lower^{-1} b[perm]``: the result lives in pivot order."""
        return _trsm(self.lower, np.asarray(b, dtype=float)[self.perm], trans=False)

    def backward(self, z):
        """Inverse of ``forward`` composed with ``lower^{-T}``; returns natural order."""
        t = _trsm(self.lower, z, trans=True)
        out = np.empty_like(t)
        out[self.perm] = t
        return out

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if self.n == 0:
            return b.copy()
        return self.backward(self.apply_dinv(self.forward(b)))


def _trsm(lower, b, trans):
    if b.size == 0:
        return np.array(b, dtype=float, copy=True)
    if b.ndim == 1:
        return _trsm(lower, b[:, None], trans)[:, 0]
    return blas.dtrsm(1.0, lower, b, side=0, lower=1, trans_a=1 if trans else 0, diag=1)


def ldl_factor(a, block=None):
    """Bunch-Kaufman LDL^T of a dense symmetric matrix (lower triangle is read).

    Raises FactorizationError on a zero pivot; ``block`` is carried in the
    error so callers can name the failing block or domain.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidArgumentError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if n == 0:
        z = np.zeros(0)
        return DenseLDL(np.zeros((0, 0)), np.zeros(0, dtype=np.intp), z, z, z, z)
    if not np.all(np.isfinite(a)):
        raise FactorizationError(block, 0, f"non-finite entries in block {block}")
    lu, ipiv, info = lapack.dsytrf(a, lower=1, lwork=max(1, 64 * n))
    if info < 0:
        raise InvalidArgumentError(f"dsytrf argument {-info} invalid")

    lower = np.tril(lu, -1)
    lower[np.diag_indices(n)] = 1.0
    d = np.diag(lu).copy()
    e = np.zeros(max(n - 1, 0))
    perm = np.arange(n)
    scale = np.max(np.abs(np.tril(a))) if n else 0.0
    tol = n * _EPS * scale

    k = 0
    while k < n:
        if ipiv[k] > 0:
            kp = ipiv[k] - 1
            kk = k
            step = 1
            if abs(d[k]) <= tol or d[k] == 0.0:
                raise FactorizationError(block, int(k))
        else:
            kp = -ipiv[k] - 1
            kk = k + 1
            step = 2
            e[k] = lu[k + 1, k]
            lower[k + 1, k] = 0.0
            if d[k] * d[k + 1] - e[k] * e[k] == 0.0:
                raise FactorizationError(block, int(k))
        if kp != kk:
            lower[[kk, kp], :k] = lower[[kp, kk], :k]
            perm[[kk, kp]] = perm[[kp, kk]]
        k += step

    inv_d = np.zeros(n)
    inv_e = np.zeros(max(n - 1, 0))
    one = np.ones(n, dtype=bool)
    two = np.flatnonzero(e != 0.0)
    one[two] = False
    one[two + 1] = False
    inv_d[one] = 1.0 / d[one]
    if two.size:
        p, q, r = d[two], e[two], d[two + 1]
        det = p * r - q * q
        inv_d[two] = r / det
        inv_d[two + 1] = p / det
        inv_e[two] = -q / det
    return DenseLDL(lower, perm, d, e, inv_d, inv_e)


def kernel_factorize_block(kii, block=None):
    return ldl_factor(kii, block=block)


def kernel_trisolve_block(kik, factor, with_workspace=False):
    """Return ``Lik = Kik[:, perm] @ lower^{-T} @ D^{-1}``.

    Columns of ``Lik`` follow the pivot order of ``factor``, so that
    ``Lik @ D @ lower.T == Kik[:, perm]``.  With ``with_workspace`` the
    unscaled product ``Wik = Lik @ D`` is returned too; updates consume it.
    """
    kik = np.asarray(kik, dtype=float)
    if kik.ndim != 2 or kik.shape[1] != factor.n:
        raise InvalidArgumentError(f"block of shape {kik.shape} does not match pivot block of order {factor.n}")
    if kik.size == 0:
        lik = np.zeros(kik.shape)
        return (lik, lik.copy()) if with_workspace else lik
    # W lower^T = Kik[:, perm]  <=>  lower W^T = Kik[:, perm]^T
    wik = _trsm(factor.lower, np.ascontiguousarray(kik[:, factor.perm].T), trans=False).T
    lik = factor.apply_dinv(wik.T).T
    wik = np.ascontiguousarray(wik)
    lik = np.ascontiguousarray(lik)
    return (lik, wik) if with_workspace else lik


def kernel_update_block(kij, lik, wjk):
    """Return ``Kij - Lik @ Wjk.T`` where ``Wjk = Ljk @ D``."""
    kij = np.asarray(kij, dtype=float)
    if lik.shape[0] != kij.shape[0] or wjk.shape[0] != kij.shape[1] or lik.shape[1] != wjk.shape[1]:
        raise InvalidArgumentError(
            f"update shapes do not conform: K{kij.shape}, L{lik.shape}, W{wjk.shape}")
    if kij.size == 0 or lik.shape[1] == 0:
        return kij.copy()
    return kij - lik @ wjk.T


def scale_by_pivots(ljk, factor):
    """``Ljk @ D`` for callers that hold L and D separately."""
    return factor.apply_d(np.asarray(ljk, dtype=float).T).T


def update_with_factors(kij, lik, dkk, ljk):
    """The textbook form ``Kij - Lik @ Dkk @ Ljk.T`` with an explicit D matrix."""
    return np.asarray(kij, dtype=float) - lik @ np.asarray(dkk, dtype=float) @ ljk.T


def fwd_solve_block(rhs, terms, factor):
    """Forward substitution for one block row.

    ``terms`` is a sequence of ``(Lkj, yj)`` pairs already ordered by
    ascending ``j``; the result is in the pivot order of ``factor``.
    """
    r = np.array(rhs, dtype=float, copy=True)
    for lkj, yj in terms:
        if lkj.size:
            r -= lkj @ yj
    return factor.forward(r)


def diag_solve_block(y, factor):
    return factor.apply_dinv(y)


def bwd_solve_block(w, terms, factor):
    """Backward substitution; ``terms`` holds ``(Lik, xi)`` for ascending ``i``."""
    t = np.array(w, dtype=float, copy=True)
    for lik, xi in terms:
        if lik.size:
            t -= lik.T @ xi
    return factor.backward(t)
