"""Hyperparameter inference for a single GP component.

Three routes: empirical Bayes (L-BFGS on the log marginal likelihood from a
grid of starts), random-walk Metropolis-Hastings, and Hamiltonian Monte Carlo
with partial momentum refreshment.  The generic samplers
(:func:`metropolis_transition`, :func:`hmc_transition`, :func:`leapfrog`)
act on plain arrays so they can be checked on analytic targets; the
``*_step`` wrappers bind them to a component's log posterior.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize

from .kernel import ComponentData, FractionGrid, GpHypers, log_marginal, log_marginal_and_grad
from .linalg import NotPositiveDefiniteError

__all__ = [
    "HyperPrior",
    "HmcConfig",
    "OptimReport",
    "Transition",
    "default_start_grid",
    "optimize_empirical_bayes",
    "log_posterior_and_grad",
    "laplace_mass_diag",
    "metropolis_transition",
    "mh_step",
    "leapfrog",
    "hmc_transition",
    "hmc_step",
]


@dataclass(frozen=True)
class HyperPrior:
    """Independent normal priors on the three log hyperparameters."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sd: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        mean = np.broadcast_to(np.asarray(self.mean, dtype=np.float64), (3,)).copy()
        sd = np.broadcast_to(np.asarray(self.sd, dtype=np.float64), (3,)).copy()
        if np.any(sd <= 0):
            raise ValueError(f"prior sd must be positive, got {sd}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sd", sd)

    def logpdf_and_grad(self, theta):
        r = (np.asarray(theta) - self.mean) / self.sd
        logp = -0.5 * float(r @ r) - float(np.sum(np.log(self.sd))) - 1.5 * math.log(2 * math.pi)
        return logp, -r / self.sd


@dataclass(frozen=True)
class HmcConfig:
    """HMC tuning.

    Each transition draws its step size uniformly from ``step_range`` and runs
    ``leapfrog_steps`` steps.  Momentum is partially refreshed as
    ``p' = refresh * p + sqrt(1 - refresh^2) * noise``.
    """

    leapfrog_steps: int = 20
    step_range: tuple = (0.01, 0.05)
    refresh: float = 0.9
    mass_diag: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        a, b = self.step_range
        if self.leapfrog_steps < 1:
            raise ValueError("leapfrog_steps must be >= 1")
        if not 0 < a <= b:
            raise ValueError(f"step_range must satisfy 0 < a <= b, got {self.step_range}")
        if not 0 <= self.refresh < 1:
            raise ValueError(f"refresh must lie in [0, 1), got {self.refresh}")
        if np.any(np.asarray(self.mass_diag) <= 0):
            raise ValueError("mass_diag must be positive")


@dataclass(frozen=True)
class OptimReport:
    theta_hat: GpHypers
    log_ml: float
    grad_norm: float
    grid_starts: int
    converged: bool


class Transition(NamedTuple):
    x: np.ndarray
    accepted: bool
    log_ratio: float
    momentum: np.ndarray | None = None


def default_start_grid() -> list[GpHypers]:
    """27 starts over ``{-1,0,1} x {-3,-2,-1} x {-5,-4,-3}``."""
    return [
        GpHypers(t1, t2, t3)
        for t1, t2, t3 in itertools.product((-1.0, 0.0, 1.0), (-3.0, -2.0, -1.0), (-5.0, -4.0, -3.0))
    ]


def _safe_value_and_grad(data, theta, grid):
    try:
        value, grad = log_marginal_and_grad(data, GpHypers.from_array(theta), grid)
    except (NotPositiveDefiniteError, ValueError, OverflowError, FloatingPointError):
        return -np.inf, np.full(3, np.nan)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        return -np.inf, np.full(3, np.nan)
    return value, grad


def _newton_polish(data, theta, active, grid, steps=20, tol=1e-8):
    """Newton steps on the active coordinates with a finite-difference Hessian of
    the analytic gradient.  Only accepted when the log marginal does not drop."""
    idx = np.flatnonzero(active)
    value, grad = _safe_value_and_grad(data, theta, grid)
    for _ in range(steps):
        g = grad[idx]
        if not np.all(np.isfinite(g)) or np.linalg.norm(g) < tol:
            break
        H = np.empty((idx.size, idx.size))
        for col, j in enumerate(idx):
            e = np.zeros(3)
            e[j] = 1e-5
            gp = _safe_value_and_grad(data, theta + e, grid)[1]
            gm = _safe_value_and_grad(data, theta - e, grid)[1]
            H[:, col] = (gp[idx] - gm[idx]) / 2e-5
        H = 0.5 * (H + H.T)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        trial = theta.copy()
        trial[idx] -= step
        new_value, new_grad = _safe_value_and_grad(data, trial, grid)
        if not new_value >= value - 1e-9 * max(1.0, abs(value)):
            break
        theta, value, grad = trial, new_value, new_grad
    return theta, value, grad


def optimize_empirical_bayes(
    data: ComponentData,
    grid_starts: Sequence[GpHypers] | None = None,
    *,
    active=(True, True, True),
    grid: FractionGrid | None = None,
    maxiter: int = 500,
    memory: int = 10,
    tol: float = 1e-8,
) -> OptimReport:
    """Maximise the log marginal likelihood with L-BFGS from every start.

    Coordinates with ``active[j] = False`` stay at their start value.  The
    best local optimum across starts is returned; ``converged`` requires the
    gradient norm over the active coordinates to be below ``tol``.

    Raises
    ------
    NotPositiveDefiniteError
        If every start fails the positive-definiteness check.
    """
    if data.n < 1:
        raise ValueError("empirical Bayes needs at least one profile")
    starts = list(default_start_grid() if grid_starts is None else grid_starts)
    if not starts:
        raise ValueError("need at least one start")
    grid = grid or FractionGrid(data.D)
    active = np.asarray(active, dtype=bool)
    idx = np.flatnonzero(active)

    best = None
    failed = []
    for start in starts:
        theta0 = start.as_array()
        value0, _ = _safe_value_and_grad(data, theta0, grid)
        if not np.isfinite(value0):
            failed.append(start)
            continue

        def objective(x, theta0=theta0):
            theta = theta0.copy()
            theta[idx] = x
            value, grad = _safe_value_and_grad(data, theta, grid)
            if not np.isfinite(value):
                return np.inf, np.zeros(idx.size)
            return -value, -grad[idx]

        res = minimize(
            objective,
            theta0[idx],
            jac=True,
            method="L-BFGS-B",
            options={"maxcor": memory, "maxiter": maxiter, "gtol": 1e-12, "ftol": 1e-15},
        )
        theta = theta0.copy()
        theta[idx] = res.x
        theta, value, grad = _newton_polish(data, theta, active, grid, tol=tol)
        if not np.isfinite(value):
            failed.append(start)
            continue
        if best is None or value > best[1]:
            best = (theta, value, float(np.linalg.norm(grad[idx])))

    if best is None:
        listed = ", ".join(f"({s.theta1:g}, {s.theta2:g}, {s.theta3:g})" for s in failed)
        raise NotPositiveDefiniteError(f"every start failed: {listed}")
    theta, value, gnorm = best
    return OptimReport(
        theta_hat=GpHypers.from_array(theta),
        log_ml=float(value),
        grad_norm=gnorm,
        grid_starts=len(starts),
        converged=bool(gnorm < tol),
    )


def log_posterior_and_grad(data: ComponentData, h: GpHypers, prior: HyperPrior, grid: FractionGrid | None = None):
    """Unnormalised log posterior of the hyperparameters and its gradient."""
    lml, g = log_marginal_and_grad(data, h, grid)
    lp, gp = prior.logpdf_and_grad(h.as_array())
    return lml + lp, g + gp


def _posterior_vg(data, prior, grid):
    """Log posterior and gradient as a function of a theta array; -inf when invalid."""

    def vg(theta):
        value, grad = _safe_value_and_grad(data, theta, grid)
        if not np.isfinite(value):
            return -np.inf, grad
        lp, gp = prior.logpdf_and_grad(theta)
        return value + lp, grad + gp

    return vg


def _posterior_value(data, prior, grid):
    """Log posterior without the gradient, for proposals that do not need it."""

    def value(theta):
        try:
            lml = log_marginal(data, GpHypers.from_array(theta), grid)
        except (NotPositiveDefiniteError, ValueError, OverflowError, FloatingPointError):
            return -np.inf
        if not np.isfinite(lml):
            return -np.inf
        return lml + prior.logpdf_and_grad(theta)[0]

    return value


def laplace_mass_diag(data: ComponentData, h: GpHypers, prior: HyperPrior, grid: FractionGrid | None = None,
                      floor: float = 1e-2) -> np.ndarray:
    """Diagonal of the negative log-posterior Hessian at ``h``, for use as an HMC mass.

    Central differences of the analytic gradient; entries are floored at ``floor``.
    """
    vg = _posterior_vg(data, prior, grid)
    x = h.as_array()
    out = np.empty(3)
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1e-5
        out[j] = -(vg(x + e)[1][j] - vg(x - e)[1][j]) / 2e-5
    out = np.where(np.isfinite(out), out, floor)
    return np.maximum(out, floor)


def metropolis_transition(x, log_target: Callable, rng: np.random.Generator, scale=1.0, xi=None, current=None):
    """Random-walk Metropolis with proposal ``x + scale * xi``, ``xi ~ N(0, I)``.

    ``current`` may carry a cached ``log_target(x)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if xi is None:
        xi = rng.standard_normal(x.shape)
    proposal = x + scale * np.asarray(xi)
    lp_x = log_target(x) if current is None else current
    lp_prop = log_target(proposal)
    log_ratio = lp_prop - lp_x if np.isfinite(lp_prop) else -np.inf
    if log_ratio >= 0 or math.log(rng.uniform()) <= log_ratio:
        return Transition(proposal, True, float(log_ratio))
    return Transition(x, False, float(log_ratio))


def mh_step(h: GpHypers, data: ComponentData, prior: HyperPrior, rng: np.random.Generator,
            scale: float = 1.0, grid: FractionGrid | None = None):
    """One random-walk Metropolis-Hastings update of a component's hyperparameters.

    Proposals failing the positive-definiteness check are rejected.
    """
    t = metropolis_transition(h.as_array(), _posterior_value(data, prior, grid), rng, scale=scale)
    return GpHypers.from_array(t.x), t.accepted


def _integrate(x, p, delta, n_steps, vg, inv_mass):
    # vg returns (U, grad U); gradients are reused across adjacent half kicks
    u, g = vg(x)
    for _ in range(n_steps):
        p = p - 0.5 * delta * g
        x = x + delta * inv_mass * p
        u, g = vg(x)
        if not (np.isfinite(u) and np.all(np.isfinite(g))):
            return x, p, np.inf, g
        p = p - 0.5 * delta * g
    return x, p, u, g


def leapfrog(x, p, delta: float, n_steps: int, grad_u: Callable, mass_diag=None):
    """``n_steps`` leapfrog steps of size ``delta`` for ``H = U(x) + p^T M^-1 p / 2``.

    Returns the final ``(x, p)``; non-finite values are passed through for the
    caller to reject.
    """
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    inv_mass = 1.0 / (np.ones_like(x) if mass_diag is None else np.asarray(mass_diag, dtype=np.float64))

    def vg(y):
        return 0.0, grad_u(y)

    x, p, _, _ = _integrate(x, p, delta, n_steps, vg, inv_mass)
    return x, p


def hmc_transition(x, p_prev, log_target_and_grad: Callable, cfg: HmcConfig, rng: np.random.Generator):
    """One HMC transition with partial momentum refreshment.

    On rejection the momentum is negated so that the refreshment scheme
    leaves the joint distribution of position and momentum invariant.
    """
    x = np.asarray(x, dtype=np.float64)
    mass = np.asarray(cfg.mass_diag, dtype=np.float64)
    inv_mass = 1.0 / mass
    noise = rng.standard_normal(x.shape) * np.sqrt(mass)
    if p_prev is None:
        p0 = noise
    else:
        a = cfg.refresh
        p0 = a * np.asarray(p_prev, dtype=np.float64) + math.sqrt(1.0 - a * a) * noise
    delta = rng.uniform(*cfg.step_range)

    def vg(y):
        lp, g = log_target_and_grad(y)
        return -lp, -np.asarray(g)

    u0, _ = vg(x)
    if not np.isfinite(u0):
        raise ValueError("HMC started from a point with zero target density")
    k0 = 0.5 * float(p0 @ (inv_mass * p0))
    x1, p1, u1, _ = _integrate(x, p0, delta, cfg.leapfrog_steps, vg, inv_mass)
    if np.isfinite(u1) and np.all(np.isfinite(p1)):
        k1 = 0.5 * float(p1 @ (inv_mass * p1))
        log_ratio = (u0 + k0) - (u1 + k1)
    else:
        log_ratio = -np.inf
    if log_ratio >= 0 or math.log(rng.uniform()) < log_ratio:
        return Transition(x1, True, float(log_ratio), p1)
    return Transition(x, False, float(log_ratio), -p0)


def hmc_step(h: GpHypers, data: ComponentData, prior: HyperPrior, cfg: HmcConfig, p_prev,
             rng: np.random.Generator, grid: FractionGrid | None = None):
    """One HMC update of a component's hyperparameters.

    Returns the new hyperparameters, the momentum to carry into the next
    update, and whether the proposal was accepted.
    """
    t = hmc_transition(h.as_array(), p_prev, _posterior_vg(data, prior, grid), cfg, rng)
    return GpHypers.from_array(t.x), t.momentum, t.accepted
