"""Semi-supervised finite mixture of GP components with a heavy-tailed outlier component.

Each protein carries an indicator ``z_i`` (0-based component index) and a
flag ``phi_i`` (1 for a known component, 0 for the outlier component).
Labelled proteins keep their indicator and ``phi_i = 1`` throughout.

``z`` and ``phi`` are drawn as a block: ``z_i`` from its conditional with
``phi_i`` summed out, then ``phi_i`` given ``z_i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln, logsumexp

from .kernel import FractionGrid, GpHypers, posterior_from_sums, profile_loglik_given_function

__all__ = [
    "SAMPLED_FUNCTION",
    "MARGINALISED",
    "DirichletConfig",
    "OutlierModel",
    "MixtureState",
    "IndicatorDraw",
    "indicator_prior_weight",
    "component_logliks",
    "sample_indicators",
    "sample_mixing_proportions",
    "outlier_logdensity",
    "sample_outlier_flags",
    "sample_epsilon",
]

SAMPLED_FUNCTION = "sampled_function"
MARGINALISED = "marginalised"


@dataclass(frozen=True)
class DirichletConfig:
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class OutlierModel:
    """Multivariate Student-t outlier density plus the Beta prior on its weight."""

    M: np.ndarray
    V: np.ndarray
    kappa: float = 4.0
    beta_u: float = 2.0
    beta_v: float = 10.0
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        M = np.asarray(self.M, dtype=np.float64)
        V = np.asarray(self.V, dtype=np.float64)
        if V.shape != (M.size, M.size):
            raise ValueError(f"V has shape {V.shape}, expected {(M.size, M.size)}")
        if not self.kappa > 2:
            raise ValueError(f"kappa must exceed 2, got {self.kappa}")
        if not (self.beta_u > 0 and self.beta_v > 0):
            raise ValueError("Beta prior parameters must be positive")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "_chol", np.linalg.cholesky(V))

    @classmethod
    def from_data(cls, X, kappa=4.0, beta_u=2.0, beta_v=10.0) -> "OutlierModel":
        """Location at the global mean profile, scale half the empirical covariance."""
        X = np.asarray(X, dtype=np.float64)
        return cls(X.mean(axis=0), 0.5 * np.cov(X, rowvar=False), kappa, beta_u, beta_v)


@dataclass
class MixtureState:
    """Current sampler state.  ``mus`` is only used in sampled-function mode."""

    z: np.ndarray
    phi: np.ndarray
    pi: np.ndarray
    eps: float
    hypers: list
    labelled: np.ndarray
    mus: np.ndarray | None = None

    @property
    def K(self) -> int:
        return len(self.hypers)

    def members(self, k) -> np.ndarray:
        return (self.z == k) & (self.phi == 1)


class IndicatorDraw(NamedTuple):
    z: np.ndarray
    alloc: np.ndarray
    log_f: np.ndarray
    outlier_prob: np.ndarray
    warnings: int


def indicator_prior_weight(n_minus_ik, N, K, alpha) -> float:
    """Collapsed conditional prior ``(n_{-i,k} + alpha/K) / (N - 1 + alpha)``."""
    return (n_minus_ik + alpha / K) / (N - 1 + alpha)


def outlier_logdensity(x, om: OutlierModel):
    """Multivariate Student-t log density; rows of a 2-d ``x`` are scored independently."""
    x = np.asarray(x, dtype=np.float64)
    D = om.M.size
    r = np.linalg.solve(om._chol, np.atleast_2d(x - om.M).T)
    with np.errstate(over="ignore"):
        maha = np.sum(r * r, axis=0)
    k = om.kappa
    out = (
        gammaln(0.5 * (k + D)) - gammaln(0.5 * k) - 0.5 * D * math.log(k * math.pi)
        - np.sum(np.log(np.diag(om._chol)))
        - 0.5 * (k + D) * np.log1p(maha / k)
    )
    return out if x.ndim > 1 else float(out[0])


def component_logliks(X, mus, hypers) -> np.ndarray:
    """``N x K`` matrix of ``log N(x_i; mu_k, sigma_k^2 I)``."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty((X.shape[0], len(hypers)))
    for k, h in enumerate(hypers):
        out[:, k] = profile_loglik_given_function(X, mus[k], h.sigma2)
    return out


def _mix_outlier(log_f, log_g, eps):
    """``log((1 - eps) f + eps g)`` elementwise, with the ``eps = 0`` limit exact."""
    if log_g is None or eps <= 0:
        return log_f
    return np.logaddexp(math.log1p(-eps) + log_f, math.log(eps) + log_g)


def _normalise_rows(logw):
    """Softmax over the last axis; rows with no finite entry become uniform."""
    m = np.max(logw, axis=-1, keepdims=True)
    dead = ~np.isfinite(m)
    m = np.where(dead, 0.0, m)
    w = np.where(dead, 1.0, np.exp(logw - m))
    return w / w.sum(axis=-1, keepdims=True)


def _categorical(probs, rng):
    """One draw per row of a probability matrix."""
    u = rng.uniform(size=probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] > cdf).sum(axis=1), probs.shape[1] - 1)


def _flag_draw(log_f_iz, log_g_i, eps, rng):
    """Draw ``phi_i`` with odds ``(1 - eps) f : eps g``; returns (phi, P(phi = 0))."""
    if eps <= 0:
        return 1, 0.0
    a = math.log1p(-eps) + log_f_iz
    b = math.log(eps) + log_g_i
    if not (np.isfinite(a) or np.isfinite(b)):
        return None, math.nan
    p0 = 1.0 / (1.0 + math.exp(a - b)) if a - b < 700 else 0.0
    return (0 if rng.uniform() < p0 else 1), p0


def sample_indicators(state: MixtureState, X, rng, mode=SAMPLED_FUNCTION, *, om=None, log_g=None,
                      grid=None, dirichlet=DirichletConfig()):
    """Resample the indicators of unlabelled proteins.

    Sampled-function mode scores every protein against the current function
    draws ``state.mus`` at once and draws ``z_i ~ pi_k ((1-eps) F_k + eps G)``.
    Marginalised mode updates proteins one at a time using the GP posterior
    predictive given the other members and the collapsed mixing weights; the
    flag ``phi_i`` is redrawn immediately after ``z_i`` so the block stays exact.

    Returns an :class:`IndicatorDraw` holding the new indicators (``state.z``
    is also updated in place), the localisation probabilities
    ``P(z_i = k | phi_i = 1, ...)`` (one-hot for labelled proteins), the
    ``N x K`` component log densities, ``P(phi_i = 0 | ...)`` with ``z_i``
    summed out, and the count of proteins whose component densities were all
    ``-inf`` (these are forced to the outlier component).

    ``log_g`` may carry precomputed outlier log densities; otherwise they are
    evaluated from ``om``.  With neither, the outlier component is disabled.
    """
    X = np.asarray(X, dtype=np.float64)
    if log_g is None and om is not None:
        log_g = outlier_logdensity(X, om)
    if mode == SAMPLED_FUNCTION:
        return _sample_indicators_vectorised(state, X, log_g, rng)
    if mode == MARGINALISED:
        grid = grid or FractionGrid(X.shape[1])
        return _sample_indicators_sequential(state, X, log_g, grid, dirichlet, rng)
    raise ValueError(f"unknown mode {mode!r}")


def _sample_indicators_vectorised(state, X, log_g, rng):
    if state.mus is None:
        raise ValueError("sampled-function mode needs function draws in state.mus")
    K = state.K
    log_f = component_logliks(X, state.mus, state.hypers)
    with np.errstate(divide="ignore"):
        log_pi = np.log(state.pi)
    alloc = _normalise_rows(log_pi + log_f)
    free = ~state.labelled
    warnings = 0
    bad = free & ~np.any(np.isfinite(log_f), axis=1)
    if np.any(bad):
        warnings = int(bad.sum())
        state.phi[bad] = 0
        free = free & ~bad
    logw = log_pi + _mix_outlier(log_f[free], None if log_g is None else log_g[free, None], state.eps)
    state.z[free] = _categorical(_normalise_rows(logw), rng)
    alloc[state.labelled] = np.eye(K)[state.z[state.labelled]]
    outlier = np.zeros(X.shape[0])
    if log_g is not None and state.eps > 0:
        inlier = math.log1p(-state.eps) + logsumexp(log_pi + log_f, axis=1)
        outlier = _normalise_rows(np.column_stack([inlier, math.log(state.eps) + log_g]))[:, 1]
        outlier[state.labelled] = 0.0
    return IndicatorDraw(state.z, alloc, log_f, outlier, warnings)


def _sample_indicators_sequential(state, X, log_g, grid, dirichlet, rng):
    N, D = X.shape
    K = state.K
    alpha = dirichlet.alpha
    counts = np.bincount(state.z, minlength=K).astype(float)
    member = state.phi == 1
    sums = np.zeros((K, D))
    sizes = np.zeros(K, dtype=int)
    for k in range(K):
        sel = member & (state.z == k)
        sums[k] = X[sel].sum(axis=0)
        sizes[k] = int(sel.sum())
    alloc = np.zeros((N, K))
    log_f = np.zeros((N, K))
    outlier = np.zeros(N)
    warnings = 0
    cache = {}

    def predictive(k, n, Y):
        key = (k, n)
        if key not in cache:
            # Z (and hence pred_cov) depends on the data only through n
            post = posterior_from_sums(n, np.zeros(D), state.hypers[k], grid)
            L = np.linalg.cholesky(post.pred_cov)
            cache[key] = post, L
        post, L = cache[key]
        if n == 0:
            return np.zeros(D), L
        # mean = (I - Z) Y / n, reuse the cached (I - Z) / n via cov / sigma2
        return (post.cov @ Y) / state.hypers[k].sigma2, L

    for i in range(N):
        if state.labelled[i]:
            alloc[i, state.z[i]] = 1.0
            continue
        zi = state.z[i]
        counts[zi] -= 1
        if member[i]:
            sums[zi] -= X[i]
            sizes[zi] -= 1
        for k in range(K):
            mean, L = predictive(k, sizes[k], sums[k])
            r = np.linalg.solve(L, X[i] - mean)
            log_f[i, k] = -0.5 * r @ r - np.sum(np.log(np.diag(L))) - 0.5 * D * math.log(2 * math.pi)
        log_w = np.log(counts + alpha / K) - math.log(N - 1 + alpha)
        alloc[i] = _normalise_rows(log_w + log_f[i])
        if not np.any(np.isfinite(log_f[i])):
            warnings += 1
            new_z, new_phi = zi, 0
        else:
            lg = None if log_g is None else log_g[i]
            mixed = _mix_outlier(log_f[i], lg, state.eps)
            if lg is not None and state.eps > 0:
                inlier = math.log1p(-state.eps) + logsumexp(log_w + log_f[i])
                outlier[i] = 1.0 / (1.0 + math.exp(min(inlier - math.log(state.eps) - lg, 700.0)))
            new_z = int(_categorical(_normalise_rows(log_w + mixed)[None, :], rng)[0])
            if lg is None:
                new_phi = 1
            else:
                new_phi, _ = _flag_draw(log_f[i, new_z], lg, state.eps, rng)
                new_phi = state.phi[i] if new_phi is None else new_phi
        state.z[i] = new_z
        state.phi[i] = new_phi
        member[i] = new_phi == 1
        counts[new_z] += 1
        if member[i]:
            sums[new_z] += X[i]
            sizes[new_z] += 1
    return IndicatorDraw(state.z, alloc, log_f, outlier, warnings)


def sample_mixing_proportions(z, K, rng, dirichlet=DirichletConfig()):
    """Draw ``pi ~ Dir(alpha/K + n_1, ..., alpha/K + n_K)``."""
    counts = np.bincount(np.asarray(z, dtype=int), minlength=K)[:K]
    return rng.dirichlet(dirichlet.alpha / K + counts)


def sample_outlier_flags(state: MixtureState, log_f, log_g, rng):
    """Redraw ``phi_i`` for unlabelled proteins given ``z_i``.

    Returns the new flags, the per-protein probability ``P(phi_i = 0 | z_i, ...)``
    (zero for labelled proteins) and the number of proteins whose densities
    were both ``-inf`` and kept their previous flag.
    """
    N = state.z.size
    p0 = np.zeros(N)
    free = ~state.labelled
    if state.eps <= 0 or log_g is None:
        state.phi[free] = 1
        return state.phi, p0, 0
    a = math.log1p(-state.eps) + log_f[np.arange(N), state.z]
    b = math.log(state.eps) + log_g
    with np.errstate(invalid="ignore"):
        p = 1.0 / (1.0 + np.exp(np.clip(a - b, -700, 700)))
    stuck = free & ~(np.isfinite(a) | np.isfinite(b))
    upd = free & ~stuck
    u = rng.uniform(size=N)
    state.phi[upd] = np.where(u[upd] < p[upd], 0, 1)
    p0[upd] = p[upd]
    p0[stuck] = np.nan
    return state.phi, p0, int(stuck.sum())


def sample_epsilon(phi, labelled, om: OutlierModel, rng) -> float:
    """Conjugate update ``eps ~ Beta(u + #outliers, v + #inliers)`` over unlabelled proteins."""
    free = ~np.asarray(labelled, dtype=bool)
    n0 = int(np.sum(np.asarray(phi)[free] == 0))
    n1 = int(np.sum(free)) - n0
    return float(rng.beta(om.beta_u + n0, om.beta_v + n1))
