"""Acceptance criteria for the primary components.

Every test reports one PASS/FAIL line through the ``criterion`` fixture;
the lines are repeated in the terminal summary.  Tolerances and time
budgets are pinned as module constants.
"""
import math
import time

import numpy as np
import pytest

from conftest import random_structured
from gpmix.bench import bench_linalg, bench_sampler, complexity_ratio
from gpmix.chain import RunConfig, effective_sample_size, run_chain, run_chains, summarise
from gpmix.cv import cross_validate
from gpmix.data import simulate
from gpmix.hyper import HmcConfig, HyperPrior, hmc_step, hmc_transition, metropolis_transition, optimize_empirical_bayes
from gpmix.kernel import ComponentData, FractionGrid, GpHypers, grad_log_marginal, kernel_toeplitz, log_marginal
from gpmix.linalg import DENSE_LIMIT, dense_oracle, trench_inverse
from gpmix.mixture import MARGINALISED, SAMPLED_FUNCTION, OutlierModel
from oracles import empirical_state_frequencies, exact_allocation_posterior, tiny_instance, total_variation

pytestmark = pytest.mark.slow

THETA = (0.5, 0.0, -1.5)

SOLVER_CASES, SOLVER_TOL, SOLVER_BUDGET = 200, 1e-8, 30.0
RATIO_LIMIT, RATIO_BUDGET = 6.0, 60.0
GRAD_DRAWS, GRAD_TOL, GRAD_STEP, GRAD_BUDGET = 100, 1e-5, 1e-5, 60.0
GAUSS_SAMPLES, GAUSS_SE, GAUSS_COV_TOL, GAUSS_BUDGET = 10_000, 4.0, 0.10, 120.0
BENCH_BUDGET = 300.0
TINY_SWEEPS, TINY_TV, TINY_BUDGET = 100_000, 0.02, 300.0
E2E_ACC, E2E_RECALL, E2E_RHAT, E2E_BUDGET = 0.95, 0.8, 1.1, 600.0
SHRINK_REPS, SHRINK_NEEDED, SHRINK_BUDGET = 10, 8, 600.0
CV_SPLITS, CV_BUDGET = 100, 600.0


def test_solver_matches_dense_oracle(criterion):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    inv_err = det_err = 0.0
    for _ in range(SOLVER_CASES):
        cov = random_structured(rng)
        fast = trench_inverse(cov)
        dense_inv, dense_logdet = dense_oracle(cov)
        inv_err = max(inv_err, float(np.max(np.abs(fast.dense() - dense_inv))))
        det_err = max(det_err, abs(fast.log_det - dense_logdet))
    secs = time.perf_counter() - t0
    ok = criterion(
        "solver oracle",
        max(inv_err, det_err) < SOLVER_TOL and secs < SOLVER_BUDGET,
        f"{SOLVER_CASES} cases, max |inv err| {inv_err:.2e}, max |logdet err| {det_err:.2e} "
        f"(tol {SOLVER_TOL:g}), {secs:.1f}s (budget {SOLVER_BUDGET:g}s)",
    )
    assert ok


def test_solver_scaling(criterion):
    t0 = time.perf_counter()
    ratio = complexity_ratio(256, 512, n=10)
    refused = bench_linalg(dims=(512,), n=10, repeats=1)[0]["dense_refused"]
    secs = time.perf_counter() - t0
    ok = criterion(
        "solver scaling",
        ratio < RATIO_LIMIT and refused and 512 * 10 > DENSE_LIMIT and secs < RATIO_BUDGET,
        f"T(512)/T(256) = {ratio:.2f} (limit {RATIO_LIMIT:g}), dense refused at nD=5120: {refused}, "
        f"{secs:.1f}s (budget {RATIO_BUDGET:g}s)",
    )
    assert ok


def _fd_grad(data, theta, step):
    g = np.empty(3)
    for j in range(3):
        e = np.zeros(3)
        e[j] = step
        g[j] = (log_marginal(data, GpHypers.from_array(theta + e))
                - log_marginal(data, GpHypers.from_array(theta - e))) / (2 * step)
    return g


def test_gradient_matches_finite_differences(criterion):
    # relative error with an absolute floor of 1 on the denominator: FD roundoff
    # swamps components that sit near zero
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(GRAD_DRAWS):
        D, n = int(rng.integers(4, 17)), int(rng.integers(1, 21))
        h = GpHypers(rng.uniform(-1, 1.5), rng.uniform(-2, 1), rng.uniform(-4, 0))
        A = kernel_toeplitz(FractionGrid(D), h).dense()
        mu = rng.multivariate_normal(np.zeros(D), A, method="eigh")
        data = ComponentData(mu[:, None] + math.sqrt(h.sigma2) * rng.standard_normal((D, n)))
        g = grad_log_marginal(data, h)
        fd = _fd_grad(data, h.as_array(), GRAD_STEP)
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0))))
    secs = time.perf_counter() - t0
    ok = criterion(
        "gradient check",
        worst < GRAD_TOL and secs < GRAD_BUDGET,
        f"{GRAD_DRAWS} draws, worst relative error {worst:.2e} (tol {GRAD_TOL:g}), "
        f"{secs:.1f}s (budget {GRAD_BUDGET:g}s)",
    )
    assert ok


GAUSS_MEAN = np.array([1.0, -2.0, 0.5])
_sd = np.array([1.0, 2.0, 0.5])
_corr = np.array([[1.0, 0.6, -0.3], [0.6, 1.0, 0.2], [-0.3, 0.2, 1.0]])
GAUSS_COV = _corr * np.outer(_sd, _sd)
GAUSS_PREC = np.linalg.inv(GAUSS_COV)


def _gauss_value(x):
    r = x - GAUSS_MEAN
    return -0.5 * float(r @ GAUSS_PREC @ r)


def _gauss_vg(x):
    r = x - GAUSS_MEAN
    return -0.5 * float(r @ GAUSS_PREC @ r), -GAUSS_PREC @ r


def _check_moments(trace):
    ess = np.array([effective_sample_size(trace[:, j])[0] for j in range(3)])
    se = np.sqrt(np.diag(GAUSS_COV) / ess)
    z = np.max(np.abs(trace.mean(axis=0) - GAUSS_MEAN) / se)
    cov_err = np.linalg.norm(np.cov(trace.T) - GAUSS_COV) / np.linalg.norm(GAUSS_COV)
    return z, cov_err, ess.min()


def test_samplers_target_known_gaussian(criterion):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    thin = 10
    x, lp = GAUSS_MEAN.copy(), _gauss_value(GAUSS_MEAN)
    mh = np.empty((GAUSS_SAMPLES, 3))
    for i in range(GAUSS_SAMPLES * thin):
        t = metropolis_transition(x, _gauss_value, rng, scale=0.8, current=lp)
        if t.accepted:
            x, lp = t.x, lp + t.log_ratio
        if i % thin == thin - 1:
            mh[i // thin] = x
    cfg = HmcConfig(leapfrog_steps=10, step_range=(0.1, 0.3), refresh=0.5)
    x, p = GAUSS_MEAN.copy(), None
    hmc = np.empty((GAUSS_SAMPLES, 3))
    for i in range(GAUSS_SAMPLES):
        t = hmc_transition(x, p, _gauss_vg, cfg, rng)
        x, p = t.x, t.momentum
        hmc[i] = x
    secs = time.perf_counter() - t0
    results = {name: _check_moments(tr) for name, tr in (("MH", mh), ("HMC", hmc))}
    ok = secs < GAUSS_BUDGET and all(z < GAUSS_SE and c < GAUSS_COV_TOL for z, c, _ in results.values())
    detail = "; ".join(f"{k} max |mean err|/SE {z:.2f}, cov rel err {c:.3f}, min ESS {e:.0f}"
                       for k, (z, c, e) in results.items())
    ok = criterion("sampler validity", ok,
                   f"{detail} (limits {GAUSS_SE:g} SE, {GAUSS_COV_TOL:.0%}), {secs:.1f}s (budget {GAUSS_BUDGET:g}s)")
    assert ok


def test_hmc_more_efficient_than_mh(criterion):
    t0 = time.perf_counter()
    mh, hmc = bench_sampler(seed=0)
    secs = time.perf_counter() - t0
    cols = ("ess_length_scale", "ess_amplitude", "ess_noise")
    ratios = [hmc[c] / mh[c] for c in cols]
    ok = criterion(
        "HMC vs MH efficiency",
        all(r >= 1.0 for r in ratios) and secs < BENCH_BUDGET,
        "ESS/s ratio HMC/MH " + ", ".join(f"{c[4:]} {r:.2f}" for c, r in zip(cols, ratios))
        + f", {secs:.1f}s (budget {BENCH_BUDGET:g}s)",
    )
    assert ok


def test_tiny_instance_matches_enumeration(criterion):
    ds = tiny_instance()
    hypers = [GpHypers(0.5, -0.5, -1.5)] * 2
    om = OutlierModel.from_data(ds.X)
    states, exact = exact_allocation_posterior(ds, hypers, om)
    unlabelled = np.flatnonzero(ds.codes < 0)
    t0 = time.perf_counter()
    tvs = {}
    for mode in (MARGINALISED, SAMPLED_FUNCTION):
        cfg = RunConfig(iterations=TINY_SWEEPS + 1000, burnin=1000, thin=1, sampler="fixed-eb", mode=mode, seed=11)
        rec = run_chain(ds, cfg, init_hypers=hypers)
        tvs[mode] = total_variation(empirical_state_frequencies(rec.z, rec.phi, unlabelled, states), exact)
    secs = time.perf_counter() - t0
    ok = criterion(
        "exact enumeration",
        all(tv < TINY_TV for tv in tvs.values()) and secs < TINY_BUDGET,
        f"{len(states)} states, {TINY_SWEEPS} sweeps, TV "
        + ", ".join(f"{m} {tv:.4f}" for m, tv in tvs.items())
        + f" (tol {TINY_TV:g}), {secs:.1f}s (budget {TINY_BUDGET:g}s)",
    )
    assert ok


def test_end_to_end_recovery(criterion):
    ds, truth = simulate(3, 8, 50, THETA, eps_true=0.05, seed=0, marker_fraction=0.3)
    cfg = RunConfig(iterations=5000, burnin=2500, thin=5, hyper_update_every=5, chains=2, seed=0, n_jobs=1)
    t0 = time.perf_counter()
    summary = summarise(run_chains(ds, cfg))
    secs = time.perf_counter() - t0
    unl = ds.codes < 0
    inl = unl & ~truth.outlier
    acc = float(np.mean(np.argmax(summary.localisation[inl], axis=1) == truth.z[inl]))
    flagged = summary.allocation[:, -1] > 0.5
    recall = float(np.mean(flagged[truth.outlier])) if truth.outlier.any() else 1.0
    rhat = max(r for r, _ in summary.rhat.values())
    ok = criterion(
        "end-to-end recovery",
        acc >= E2E_ACC and recall >= E2E_RECALL and rhat < E2E_RHAT and secs < E2E_BUDGET,
        f"accuracy {acc:.3f} on {int(inl.sum())} unlabelled inliers (min {E2E_ACC:g}), "
        f"outlier recall {recall:.2f} of {int(truth.outlier.sum())} (min {E2E_RECALL:g}), "
        f"max R-hat {rhat:.3f} (limit {E2E_RHAT:g}), {secs:.1f}s (budget {E2E_BUDGET:g}s)",
    )
    assert ok


def _labelled_only_noise(rows, rng, iterations=1000, burnin=300):
    data = ComponentData.from_rows(rows)
    grid = FractionGrid(rows.shape[1])
    h = optimize_empirical_bayes(data, grid=grid).theta_hat
    p, draws = None, []
    for i in range(iterations):
        h, p, _ = hmc_step(h, data, HyperPrior(), HmcConfig(), p, rng, grid)
        if i >= burnin:
            draws.append(h.theta3)
    return np.array(draws)


def test_unlabelled_data_shrink_noise_posterior(criterion):
    # markers come from the low-noise half, so marker-only fits understate the noise
    t0 = time.perf_counter()
    wins = 0
    notes = []
    for rep in range(SHRINK_REPS):
        ds, _ = simulate(2, 8, 60, THETA, 0.0, seed=rep, marker_fraction=0.2, marker_selection="low_noise")
        rec = run_chain(ds, RunConfig(iterations=2000, burnin=600, thin=2, hyper_update_every=2, seed=rep))
        rng = np.random.default_rng(rep)
        good = True
        for k in range(ds.K):
            lab = _labelled_only_noise(ds.X[ds.codes == k], rng)
            semi = rec.theta[:, k, 2]
            good &= bool(semi.std() <= lab.std() and abs(semi.mean() - THETA[2]) < abs(lab.mean() - THETA[2]))
            notes.append((lab.std(), semi.std(), lab.mean(), semi.mean()))
        wins += good
    secs = time.perf_counter() - t0
    lab_sd, semi_sd, lab_m, semi_m = np.mean(notes, axis=0)
    ok = criterion(
        "semi-supervised shrinkage",
        wins >= SHRINK_NEEDED and secs < SHRINK_BUDGET,
        f"{wins}/{SHRINK_REPS} repetitions tighter and closer to true noise (need {SHRINK_NEEDED}); "
        f"mean SD {lab_sd:.3f} -> {semi_sd:.3f}, mean estimate {lab_m:.3f} -> {semi_m:.3f} "
        f"(true {THETA[2]}), {secs:.1f}s (budget {SHRINK_BUDGET:g}s)",
    )
    assert ok


def test_cross_validation_deterministic(criterion):
    # unit noise blurs the components so the loss distribution is not degenerate
    ds, _ = simulate(3, 8, 30, (0.5, 0.0, 0.0), 0.0, seed=0, marker_fraction=0.6)
    eb = RunConfig(iterations=100, burnin=50, thin=1, sampler="fixed-eb", seed=0)
    fb = RunConfig(iterations=100, burnin=50, thin=1, sampler="hmc", hyper_update_every=5, seed=0)
    t0 = time.perf_counter()
    first = cross_validate(ds, eb, splits=CV_SPLITS, seed=3)
    second = cross_validate(ds, eb, splits=CV_SPLITS, seed=3)
    full = cross_validate(ds, fb, splits=3, seed=3)
    secs = time.perf_counter() - t0
    q = np.quantile(first.losses, [0.1, 0.5, 0.9])
    ok = criterion(
        "cross-validation",
        first.same_result(second) and first.losses.size == CV_SPLITS and np.all(np.isfinite(full.losses))
        and secs < CV_BUDGET,
        f"{CV_SPLITS} EB splits reproduced exactly: {first.same_result(second)}, quadratic loss "
        f"q10/q50/q90 {q[0]:.3f}/{q[1]:.3f}/{q[2]:.3f}; FB splits {np.round(full.losses, 3).tolist()}, "
        f"{secs:.1f}s (budget {CV_BUDGET:g}s)",
    )
    assert ok
