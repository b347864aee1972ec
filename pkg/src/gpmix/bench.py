"""Timing suites: structured vs dense covariance algebra, and MH vs HMC efficiency."""
from __future__ import annotations

import math
import time
from dataclasses import replace

import numpy as np

from .chain import effective_sample_size
from .hyper import (
    HmcConfig,
    HyperPrior,
    _posterior_value,
    _posterior_vg,
    hmc_transition,
    laplace_mass_diag,
    metropolis_transition,
    optimize_empirical_bayes,
)
from .kernel import ComponentData, FractionGrid, GpHypers, kernel_toeplitz
from .linalg import DENSE_LIMIT, StructuredCovariance, dense_oracle, quadratic_form, trench_inverse

__all__ = ["SAMPLER_COLUMNS", "bench_linalg", "complexity_ratio", "simulate_component", "tune_mh_scale", "bench_sampler", "BENCH_HMC"]

SAMPLER_COLUMNS = ("method", "iterations", "acceptance_rate", "ess_length_scale", "ess_amplitude", "ess_noise")


def _best_time(fn, repeats):
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _random_case(D, n, rng):
    h = GpHypers(math.log(D / 4.0), 0.0, -1.0)
    a = kernel_toeplitz(FractionGrid(D), h)
    return StructuredCovariance(a, h.sigma2, n), rng.standard_normal((D, n))


def bench_linalg(dims=(16, 64, 128, 256, 512), n=10, repeats=5, seed=0):
    """Best-of-``repeats`` seconds for inverse + log-det + quadratic form.

    Rows carry ``dense_seconds = None`` with ``dense_refused = True`` where
    ``n * D`` exceeds the densification guard.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for D in dims:
        cov, X = _random_case(D, n, rng)
        fast = _best_time(lambda: quadratic_form(trench_inverse(cov), X), repeats)
        row = {"D": D, "n": n, "fast_seconds": fast, "dense_seconds": None, "dense_refused": False}
        if n * D > DENSE_LIMIT:
            try:
                dense_oracle(cov)
            except ValueError:
                row["dense_refused"] = True
        else:
            x = X.T.ravel()

            def dense():
                inv, _ = dense_oracle(cov)
                return x @ inv @ x

            row["dense_seconds"] = _best_time(dense, max(1, repeats // 2))
        rows.append(row)
    return rows


def complexity_ratio(d_small=256, d_large=512, n=10, repeats=7, seed=0) -> float:
    """``T(d_large) / T(d_small)`` for the structured path; about 4 for quadratic cost."""
    rows = bench_linalg((d_small, d_large), n=n, repeats=repeats, seed=seed)
    return rows[1]["fast_seconds"] / rows[0]["fast_seconds"]


def simulate_component(n=50, D=10, theta=(0.5, 0.0, -1.5), seed=0) -> ComponentData:
    """``n`` replicates of one GP draw plus white noise, as a ``D x n`` block."""
    rng = np.random.default_rng(seed)
    h = GpHypers.from_array(theta)
    A = kernel_toeplitz(FractionGrid(D), h).dense()
    mu = rng.multivariate_normal(np.zeros(D), A, method="eigh")
    return ComponentData(mu[:, None] + math.sqrt(h.sigma2) * rng.standard_normal((D, n)))


def tune_mh_scale(log_target, x0, rng, target=0.25, batches=30, batch_size=50, scale=0.1):
    """Pilot adaptation of the isotropic random-walk scale toward ``target`` acceptance."""
    x = np.asarray(x0, dtype=np.float64)
    lp = log_target(x)
    for b in range(batches):
        acc = 0
        for _ in range(batch_size):
            t = metropolis_transition(x, log_target, rng, scale=scale, current=lp)
            if t.accepted:
                x, lp = t.x, lp + t.log_ratio
                acc += 1
        scale *= math.exp((acc / batch_size - target) / math.sqrt(b + 1))
    return scale, x


def _run_mh(log_target, x0, iterations, scale, rng):
    x = np.asarray(x0, dtype=np.float64)
    lp = log_target(x)
    trace = np.empty((iterations, x.size))
    acc = 0
    t0 = time.perf_counter()
    for i in range(iterations):
        t = metropolis_transition(x, log_target, rng, scale=scale, current=lp)
        if t.accepted:
            x, lp = t.x, lp + t.log_ratio
            acc += 1
        trace[i] = x
    return trace, acc / iterations, time.perf_counter() - t0


def _run_hmc(vg, x0, iterations, cfg, rng):
    x = np.asarray(x0, dtype=np.float64)
    p = None
    trace = np.empty((iterations, x.size))
    acc = 0
    t0 = time.perf_counter()
    for i in range(iterations):
        t = hmc_transition(x, p, vg, cfg, rng)
        x, p = t.x, t.momentum
        acc += t.accepted
        trace[i] = x
    return trace, acc / iterations, time.perf_counter() - t0


BENCH_HMC = HmcConfig(leapfrog_steps=10, step_range=(0.2, 0.35), refresh=0.9)


def bench_sampler(data: ComponentData | None = None, *, mh_iterations=10000, hmc_iterations=2000,
                  mh_scale=None, hmc: HmcConfig = BENCH_HMC, laplace_mass=True, prior=HyperPrior(), seed=0):
    """MH vs HMC on one component's hyperparameter posterior, both started at the EB optimum.

    ESS columns are per second of sampling wall time.  ``mh_scale=None``
    tunes the isotropic random-walk scale toward 25% acceptance in an untimed
    pilot run.  With ``laplace_mass`` the HMC mass is the diagonal of the
    negative log-posterior Hessian at the optimum, replacing ``hmc.mass_diag``.

    Returns
    -------
    rows : list of dict
        One per method, keyed by :data:`SAMPLER_COLUMNS` plus raw ``ess``,
        ``seconds``, the MH ``scale`` and the HMC ``mass``.
    """
    data = data if data is not None else simulate_component(seed=seed)
    grid = FractionGrid(data.D)
    vg = _posterior_vg(data, prior, grid)
    log_target = _posterior_value(data, prior, grid)
    theta_hat = optimize_empirical_bayes(data, grid=grid).theta_hat
    x0 = theta_hat.as_array()
    if laplace_mass:
        hmc = replace(hmc, mass_diag=tuple(laplace_mass_diag(data, theta_hat, prior, grid)))
    rng = np.random.default_rng(seed)
    if mh_scale is None:
        mh_scale, _ = tune_mh_scale(log_target, x0, rng)
    rows = []
    runs = (
        ("MH", mh_iterations, lambda: _run_mh(log_target, x0, mh_iterations, mh_scale, rng)),
        ("HMC", hmc_iterations, lambda: _run_hmc(vg, x0, hmc_iterations, hmc, rng)),
    )
    for name, iters, run in runs:
        trace, acc, secs = run()
        ess = [effective_sample_size(trace[:, j])[0] for j in range(3)]
        rate = [e / secs if math.isfinite(e) else 0.0 for e in ess]
        rows.append({
            "method": name,
            "iterations": iters,
            "acceptance_rate": acc,
            "ess_length_scale": rate[0],
            "ess_amplitude": rate[1],
            "ess_noise": rate[2],
            "ess": ess,
            "seconds": secs,
            "scale": mh_scale if name == "MH" else None,
            "mass": list(hmc.mass_diag) if name == "HMC" else None,
        })
    return rows
