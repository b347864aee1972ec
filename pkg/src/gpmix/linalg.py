"""Structured solvers for ``C = sigma2 * I_{nD} + J_n (x) A`` with ``A`` symmetric Toeplitz.

The Woodbury identity reduces the ``nD x nD`` problem to the ``D x D``
Toeplitz matrix ``Q = I_D + (n / sigma2) A``.  ``Q`` is inverted with the
Trench recursion (driven by Durbin's algorithm), which costs ``O(D^2)``
and yields ``log det Q`` as a by-product.  With ``Z = Q^{-1}``::

    C^{-1}     = sigma2^{-1} I - (n sigma2)^{-1} J_n (x) (I - Z)
    log det C  = n D log(sigma2) + log det Q

Data matrices are ``D x n`` (one column per replicate), so that
``vec(X)`` stacks replicate profiles in the order used by ``C``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import toeplitz

__all__ = [
    "NotPositiveDefiniteError",
    "ToeplitzSpec",
    "StructuredCovariance",
    "StructuredInverse",
    "durbin",
    "vector_inverse",
    "trench_inverse",
    "quadratic_form",
    "apply_inverse",
    "row_sums",
    "dense_oracle",
    "DENSE_LIMIT",
]

DENSE_LIMIT = 2048


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a Toeplitz recursion meets a non-positive pivot."""


@dataclass(frozen=True)
class ToeplitzSpec:
    """Symmetric Toeplitz matrix stored as its first row."""

    first_row: np.ndarray

    def __post_init__(self):
        row = np.asarray(self.first_row, dtype=np.float64)
        if row.ndim != 1 or row.size == 0:
            raise ValueError("first_row must be a non-empty 1-d array")
        object.__setattr__(self, "first_row", row)

    @property
    def D(self) -> int:
        return self.first_row.size

    def dense(self) -> np.ndarray:
        return toeplitz(self.first_row)


@dataclass(frozen=True)
class StructuredCovariance:
    """The implicit matrix ``sigma2 * I_{nD} + J_n (x) A``."""

    a: ToeplitzSpec
    sigma2: float
    n: int

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2!r}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n!r}")

    @property
    def D(self) -> int:
        return self.a.D

    def q_row(self) -> np.ndarray:
        """First row of ``Q = I_D + (n / sigma2) A``."""
        q = (self.n / self.sigma2) * self.a.first_row
        q[0] += 1.0
        return q

    def matvec(self, X) -> np.ndarray:
        """Apply ``C`` to ``vec(X)`` for a ``D x n`` matrix, returning ``D x n``."""
        X = _check_block(X, self.D, self.n)
        AY = self.a.dense() @ X.sum(axis=1)
        return self.sigma2 * X + AY[:, None]

    def dense(self) -> np.ndarray:
        nD = self.n * self.D
        if nD > DENSE_LIMIT:
            raise ValueError(f"refusing to densify a {nD}x{nD} matrix (limit {DENSE_LIMIT})")
        return self.sigma2 * np.eye(nD) + np.kron(np.ones((self.n, self.n)), self.a.dense())


@dataclass(frozen=True)
class StructuredInverse:
    """Implicit inverse of a :class:`StructuredCovariance`.

    ``z`` is the dense ``D x D`` inverse of ``Q``; the ``nD x nD`` inverse is
    never formed.
    """

    z: np.ndarray
    sigma2: float
    n: int
    log_det: float

    @property
    def D(self) -> int:
        return self.z.shape[0]

    def dense(self) -> np.ndarray:
        nD = self.n * self.D
        if nD > DENSE_LIMIT:
            raise ValueError(f"refusing to densify a {nD}x{nD} matrix (limit {DENSE_LIMIT})")
        W = (np.eye(self.D) - self.z) / (self.n * self.sigma2)
        return np.eye(nD) / self.sigma2 - np.kron(np.ones((self.n, self.n)), W)


def durbin(m, xi):
    """Durbin recursion for a normalised symmetric Toeplitz system.

    Solves ``T_m z = -xi[:m]`` where ``T_m`` is the ``m x m`` Toeplitz matrix
    with first row ``(1, xi[0], ..., xi[m-2])``.

    Parameters
    ----------
    m : int
        Order of the system.
    xi : array_like, shape (m,)
        Off-diagonal autocorrelations.

    Returns
    -------
    z : ndarray, shape (m,)
    log_beta_sum : float
        Sum of the logs of the ``m`` reflection pivots, equal to the log
        determinant of the ``(m + 1) x (m + 1)`` matrix with first row
        ``(1, xi[0], ..., xi[m-1])``.

    Raises
    ------
    NotPositiveDefiniteError
        If a pivot is not strictly positive.
    """
    xi = np.asarray(xi, dtype=np.float64)
    if m < 0 or xi.size < m:
        raise ValueError(f"need m >= 0 and len(xi) >= m, got m={m}, len(xi)={xi.size}")
    z = np.zeros(m)
    if m == 0:
        return z, 0.0
    z[0] = -xi[0]
    alpha = -xi[0]
    beta = 1.0
    log_beta_sum = 0.0
    for i in range(1, m):
        beta = (1.0 - alpha * alpha) * beta
        if not beta > 0.0:
            raise NotPositiveDefiniteError(f"matrix not positive definite (pivot {i} = {beta:g})")
        log_beta_sum += math.log(beta)
        alpha = -(xi[i] + np.dot(xi[i - 1::-1], z[:i])) / beta
        z[:i] = z[:i] + alpha * z[i - 1::-1]
        z[i] = alpha
    beta = (1.0 - alpha * alpha) * beta
    if not beta > 0.0:
        raise NotPositiveDefiniteError(f"matrix not positive definite (pivot {m} = {beta:g})")
    log_beta_sum += math.log(beta)
    return z, log_beta_sum


def vector_inverse(q):
    """Last column of ``toeplitz(q)^{-1}`` and ``log det toeplitz(q)``.

    By persymmetry the returned ``v`` read backwards is the first column of
    the inverse; these are the boundary entries needed by the Trench fill-in.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size == 0:
        raise ValueError("q must be a non-empty 1-d array")
    if not q[0] > 0:
        raise NotPositiveDefiniteError(f"leading entry must be positive, got {q[0]!r}")
    D = q.size
    xi = q[1:] / q[0]
    z, l = durbin(D - 1, xi)
    l += D * math.log(q[0])
    v = np.empty(D)
    v[D - 1] = 1.0 / ((1.0 + np.dot(xi, z)) * q[0])
    v[: D - 1] = v[D - 1] * z[::-1]
    return v, l


def _trench_fill(v):
    D = v.size
    Zb = np.empty((D, D))
    Zb[0, :] = v[::-1]
    Zb[:, 0] = v[::-1]
    Zb[D - 1, :] = v
    Zb[:, D - 1] = v
    vD = v[D - 1]
    for i in range(1, (D - 1) // 2 + 1):
        j = np.arange(i, D - i)
        row = Zb[i - 1, j - 1] + (v[D - 1 - j] * v[D - 1 - i] - v[i - 1] * v[j - 1]) / vD
        Zb[i, j] = row
        Zb[j, i] = row
        Zb[D - 1 - i, D - 1 - j] = row
        Zb[D - 1 - j, D - 1 - i] = row
    return Zb


def trench_inverse(cov: StructuredCovariance) -> StructuredInverse:
    """Invert ``Q = I + (n / sigma2) A`` in ``O(D^2)`` and assemble the implicit inverse."""
    try:
        v, l = vector_inverse(cov.q_row())
    except NotPositiveDefiniteError as exc:
        raise NotPositiveDefiniteError(
            f"I + (n/sigma2) A is not positive definite (sigma2={cov.sigma2:g}, n={cov.n}, "
            f"A[0,:3]={cov.a.first_row[:3]}): {exc}"
        ) from None
    Z = _trench_fill(v)
    log_det = cov.n * cov.D * math.log(cov.sigma2) + l
    return StructuredInverse(z=Z, sigma2=float(cov.sigma2), n=int(cov.n), log_det=float(log_det))


def _check_block(X, D, n=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] != D or (n is not None and X.shape[1] != n):
        want = f"({D}, {n})" if n is not None else f"({D}, n)"
        raise ValueError(f"data block has shape {X.shape}, expected {want}")
    return X


def row_sums(X) -> np.ndarray:
    """Per-fraction sums ``Y = X e_n`` of a ``D x n`` block."""
    return np.asarray(X, dtype=np.float64).sum(axis=1)


def quadratic_form(inv: StructuredInverse, X) -> float:
    """``vec(X)^T C^{-1} vec(X)`` using only the row-sum vector of ``X``."""
    X = _check_block(X, inv.D, inv.n)
    Y = X.sum(axis=1)
    YZY = Y @ (inv.z @ Y)
    return float((np.sum(X * X) - (Y @ Y - YZY) / inv.n) / inv.sigma2)


def apply_inverse(inv: StructuredInverse, X) -> np.ndarray:
    """``C^{-1} vec(X)`` reshaped back to ``D x n``."""
    X = _check_block(X, inv.D, inv.n)
    Y = X.sum(axis=1)
    corr = (Y - inv.z @ Y) / (inv.n * inv.sigma2)
    return X / inv.sigma2 - corr[:, None]


def dense_oracle(cov: StructuredCovariance):
    """Dense inverse and log determinant of ``C`` via Cholesky; test oracle only."""
    C = cov.dense()
    L = np.linalg.cholesky(C)
    Linv = np.linalg.solve(L, np.eye(C.shape[0]))
    return Linv.T @ Linv, 2.0 * float(np.sum(np.log(np.diag(L))))
