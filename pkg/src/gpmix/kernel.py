"""Squared-exponential GP components on an equally spaced fraction grid.

A component holding ``n`` replicate profiles ``X`` (``D x n``) is marginally
``N(0, sigma2 I + J_n (x) A)`` with ``A[r, s] = a2 * exp(-(t_r - t_s)^2 / l)``.
All likelihood work goes through :mod:`gpmix.linalg`, and every quantity
needed downstream depends on the data only through ``n``, the row sums ``Y``
and the squared Frobenius norm of ``X``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import toeplitz

from .linalg import StructuredCovariance, ToeplitzSpec, trench_inverse

__all__ = [
    "GpHypers",
    "FractionGrid",
    "ComponentData",
    "GpPosterior",
    "kernel_toeplitz",
    "log_marginal",
    "grad_log_marginal",
    "log_marginal_and_grad",
    "posterior",
    "posterior_from_sums",
    "sample_posterior_function",
    "profile_loglik_given_function",
]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GpHypers:
    """Log-scale hyperparameters.

    ``l = exp(theta1)``, ``a2 = exp(2 theta2)``, ``sigma2 = exp(2 theta3)``.
    """

    theta1: float
    theta2: float
    theta3: float

    def __post_init__(self):
        for name in ("theta1", "theta2", "theta3"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)

    @classmethod
    def from_array(cls, theta) -> "GpHypers":
        t1, t2, t3 = np.asarray(theta, dtype=np.float64).ravel()
        return cls(t1, t2, t3)

    def as_array(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, self.theta3])

    @property
    def length_scale(self) -> float:
        return math.exp(self.theta1)

    @property
    def amplitude2(self) -> float:
        return math.exp(2.0 * self.theta2)

    @property
    def sigma2(self) -> float:
        return math.exp(2.0 * self.theta3)


@dataclass(frozen=True)
class FractionGrid:
    """Fractions ``t_j = j`` for ``j = 1..D``."""

    D: int

    def __post_init__(self):
        if self.D < 1:
            raise ValueError(f"D must be >= 1, got {self.D}")

    @property
    def t(self) -> np.ndarray:
        return np.arange(1, self.D + 1, dtype=np.float64)

    @cached_property
    def lag2(self) -> np.ndarray:
        """Squared lags ``0, 1, 4, ...``; the first row of the distance matrix."""
        return np.arange(self.D, dtype=np.float64) ** 2


@dataclass(frozen=True)
class ComponentData:
    """Profiles assigned to one component, one column per protein."""

    X: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"X must be D x n, got shape {X.shape}")
        object.__setattr__(self, "X", X)

    @classmethod
    def from_rows(cls, rows) -> "ComponentData":
        """Build from an ``n x D`` matrix with one protein per row."""
        return cls(np.asarray(rows, dtype=np.float64).T)

    @property
    def D(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def row_sums(self) -> np.ndarray:
        return self.X.sum(axis=1)

    @property
    def sq_norm(self) -> float:
        return float(np.sum(self.X * self.X))


@dataclass(frozen=True)
class GpPosterior:
    """Posterior of the latent function on the grid.

    ``pred_cov`` is the covariance of a new profile drawn from the component.
    """

    mean: np.ndarray
    cov: np.ndarray
    pred_cov: np.ndarray

    def predictive_logpdf(self, x) -> np.ndarray:
        """Log density of one profile (or each row of a matrix) under the predictive."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        L = np.linalg.cholesky(self.pred_cov)
        r = np.linalg.solve(L, (x - self.mean).T)
        D = self.mean.size
        out = -0.5 * np.sum(r * r, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * D * LOG_2PI
        return out


def kernel_toeplitz(grid: FractionGrid, h: GpHypers) -> ToeplitzSpec:
    """First row ``a2 * exp(-d^2 / l)`` of the kernel matrix over lags ``d``."""
    return ToeplitzSpec(h.amplitude2 * np.exp(-grid.lag2 / h.length_scale))


def _grid_for(D, grid):
    if grid is None:
        return FractionGrid(D)
    if grid.D != D:
        raise ValueError(f"grid has D={grid.D} but data has D={D}")
    return grid


def _terms(n, Y, sq_norm, h, grid):
    a = kernel_toeplitz(grid, h)
    inv = trench_inverse(StructuredCovariance(a, h.sigma2, n))
    ZY = inv.z @ Y
    quad = (sq_norm - (Y @ Y - Y @ ZY) / n) / h.sigma2
    return a, inv, ZY, quad


def log_marginal(data: ComponentData, h: GpHypers, grid: FractionGrid | None = None) -> float:
    """Log marginal likelihood of a component's profiles.

    Returns 0.0 for an empty component.
    """
    if data.n == 0:
        return 0.0
    grid = _grid_for(data.D, grid)
    _, inv, _, quad = _terms(data.n, data.row_sums, data.sq_norm, h, grid)
    return -0.5 * quad - 0.5 * inv.log_det - 0.5 * data.n * data.D * LOG_2PI


def log_marginal_and_grad(data: ComponentData, h: GpHypers, grid: FractionGrid | None = None):
    """Log marginal likelihood and its gradient w.r.t. ``(theta1, theta2, theta3)``.

    The gradient uses ``C^{-1} dC C^{-1} = sigma^-4 J_n (x) (Z dA Z)`` for the
    kernel parameters and ``C^{-2} = sigma^-4 I - J_n (x) sigma^-4 (I - Z^2) / n``
    for the noise, so each term costs ``O(D^2)`` once ``Z`` is known.
    """
    if data.n == 0:
        return 0.0, np.zeros(3)
    grid = _grid_for(data.D, grid)
    n, D = data.n, data.D
    Y = data.row_sums
    sq_norm = data.sq_norm
    a, inv, ZY, quad = _terms(n, Y, sq_norm, h, grid)
    s2 = h.sigma2
    Z = inv.z
    value = -0.5 * quad - 0.5 * inv.log_det - 0.5 * n * D * LOG_2PI

    A = a.dense()
    dA1 = A * toeplitz(grid.lag2 / h.length_scale)
    dA2 = 2.0 * A
    grad = np.empty(3)
    for j, dA in enumerate((dA1, dA2)):
        fit = 0.5 * (ZY @ dA @ ZY) / (s2 * s2)
        trace = 0.5 * n * np.sum(Z * dA) / s2
        grad[j] = fit - trace
    grad[2] = (sq_norm - (Y @ Y - ZY @ ZY) / n) / s2 - n * D + (D - np.trace(Z))
    return value, grad


def grad_log_marginal(data: ComponentData, h: GpHypers, grid: FractionGrid | None = None) -> np.ndarray:
    return log_marginal_and_grad(data, h, grid)[1]


def posterior_from_sums(n: int, Y, h: GpHypers, grid: FractionGrid) -> GpPosterior:
    """Posterior from sufficient statistics: replicate count and row sums.

    With ``Z = (I + (n / sigma2) A)^{-1}`` the posterior mean is ``(I - Z) Y / n``
    and the posterior covariance is ``A Z = sigma2 (I - Z) / n``.
    """
    a = kernel_toeplitz(grid, h)
    s2 = h.sigma2
    if n == 0:
        A = a.dense()
        return GpPosterior(np.zeros(grid.D), A, A + s2 * np.eye(grid.D))
    Y = np.asarray(Y, dtype=np.float64)
    inv = trench_inverse(StructuredCovariance(a, s2, n))
    IZ = np.eye(grid.D) - inv.z
    mean = IZ @ Y / n
    cov = s2 * IZ / n
    cov = 0.5 * (cov + cov.T)
    return GpPosterior(mean, cov, cov + s2 * np.eye(grid.D))


def posterior(data: ComponentData, h: GpHypers, grid: FractionGrid | None = None) -> GpPosterior:
    grid = _grid_for(data.D, grid)
    return posterior_from_sums(data.n, data.row_sums, h, grid)


def sample_posterior_function(post: GpPosterior, rng: np.random.Generator) -> np.ndarray:
    """One draw of the latent function from ``N(post.mean, post.cov)``.

    A failed Cholesky factorisation is retried once with ``1e-10`` added to
    the diagonal.
    """
    cov = post.cov
    if not np.any(cov):
        return post.mean.copy()
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky(cov + 1e-10 * np.eye(cov.shape[0]))
    return post.mean + L @ rng.standard_normal(cov.shape[0])


def profile_loglik_given_function(x, mu, sigma2: float):
    """``log N(x; mu, sigma2 I)``; rows of a 2-d ``x`` are scored independently."""
    x = np.asarray(x, dtype=np.float64)
    r = x - mu
    D = r.shape[-1]
    with np.errstate(over="ignore"):
        ss = np.sum(r * r, axis=-1)
    return -0.5 * ss / sigma2 - 0.5 * D * (LOG_2PI + math.log(sigma2))
