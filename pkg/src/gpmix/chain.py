"""Hamiltonian-within-Gibbs sampler, convergence diagnostics and posterior summaries."""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import chi2
from scipy.stats import f as f_dist

from .data import ProfileDataset
from .hyper import HmcConfig, HyperPrior, hmc_step, mh_step, optimize_empirical_bayes
from .kernel import ComponentData, FractionGrid, GpHypers, posterior_from_sums, sample_posterior_function
from .mixture import (
    MARGINALISED,
    SAMPLED_FUNCTION,
    DirichletConfig,
    MixtureState,
    OutlierModel,
    outlier_logdensity,
    sample_epsilon,
    sample_indicators,
    sample_mixing_proportions,
    sample_outlier_flags,
)

__all__ = [
    "SAMPLERS",
    "RunConfig",
    "ChainRecord",
    "PosteriorSummary",
    "run_chain",
    "run_chains",
    "shannon_entropy",
    "entropy_mc_average",
    "gelman_rubin",
    "effective_sample_size",
    "equal_tailed_interval",
    "summarise",
]

SAMPLERS = ("hmc", "mh", "fixed-eb")


@dataclass(frozen=True)
class RunConfig:
    """Sampler settings.  Hyperparameters are refreshed every
    ``hyper_update_every`` iterations unless ``sampler == "fixed-eb"``."""

    iterations: int = 20000
    burnin: int = 10000
    thin: int = 5
    hyper_update_every: int = 5
    sampler: str = "hmc"
    chains: int = 1
    seed: int = 0
    mode: str = SAMPLED_FUNCTION
    prior: HyperPrior = field(default_factory=HyperPrior)
    hmc: HmcConfig = field(default_factory=HmcConfig)
    mh_scale: float = 1.0
    dirichlet: DirichletConfig = field(default_factory=DirichletConfig)
    outlier: bool = True
    outlier_df: float = 4.0
    beta_u: float = 2.0
    beta_v: float = 10.0
    init_jitter: float = 0.1
    n_jobs: int | None = -1

    def __post_init__(self):
        if self.iterations < 1 or not 0 <= self.burnin < self.iterations:
            raise ValueError(f"need 0 <= burnin < iterations, got {self.burnin}, {self.iterations}")
        if self.thin < 1 or self.hyper_update_every < 1 or self.chains < 1:
            raise ValueError("thin, hyper_update_every and chains must be >= 1")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.mode not in (SAMPLED_FUNCTION, MARGINALISED):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def retained(self) -> int:
        return max(0, math.ceil((self.iterations - self.burnin) / self.thin))


@dataclass
class ChainRecord:
    """Draws kept after burn-in and thinning, stacked along the first axis.

    ``alloc`` holds localisation probabilities over the ``K`` components and
    ``outlier_prob`` the probability of the outlier component; ``times`` are
    seconds since the chain started and are the only non-deterministic field.
    """

    z: np.ndarray
    phi: np.ndarray
    pi: np.ndarray
    eps: np.ndarray
    theta: np.ndarray
    alloc: np.ndarray
    outlier_prob: np.ndarray
    sums: np.ndarray
    counts: np.ndarray
    mus: np.ndarray | None
    times: np.ndarray
    wall_seconds: float = 0.0
    hyper_accept: np.ndarray | None = None
    warnings: int = 0

    _DRAWS = ("z", "phi", "pi", "eps", "theta", "alloc", "outlier_prob", "sums", "counts", "mus")

    def __len__(self):
        return self.eps.shape[0]

    def same_draws(self, other: "ChainRecord") -> bool:
        """Bitwise equality of every sampled quantity (timings excluded)."""
        for name in self._DRAWS:
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not (a.shape == b.shape and np.array_equal(a, b)):
                return False
        return True


@dataclass
class PosteriorSummary:
    """Pooled posterior summaries.

    ``allocation`` is ``N x (K + 1)`` with the outlier probability last;
    ``localisation`` is ``N x K``, the allocation given inlier status.
    """

    allocation: np.ndarray
    localisation: np.ndarray
    entropy: np.ndarray
    hyper_mean: np.ndarray
    hyper_lower: np.ndarray
    hyper_upper: np.ndarray
    eps_mean: float
    pi_mean: np.ndarray
    rhat: dict
    ess: dict
    ess_per_second: dict


def _members_data(X, state, k):
    return ComponentData.from_rows(X[state.members(k)])


def _initial_hypers(X, codes, K, grid):
    hypers = []
    for k in range(K):
        rows = X[codes == k]
        if rows.shape[0] == 0:
            raise ValueError(f"component {k} has no labelled proteins")
        hypers.append(optimize_empirical_bayes(ComponentData.from_rows(rows), grid=grid).theta_hat)
    return hypers


def run_chain(dataset: ProfileDataset, config: RunConfig, seed=None, init_hypers=None) -> ChainRecord:
    """Run one chain of the Gibbs sampler.

    Each iteration draws the latent functions (sampled-function mode), the
    indicators and outlier flags, the outlier weight and the mixing
    proportions; every ``hyper_update_every``-th iteration then ends with a
    hyperparameter refresh.

    ``seed`` overrides ``config.seed`` (an int or ``SeedSequence``);
    ``init_hypers`` skips the empirical-Bayes initialisation.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    X = dataset.X
    N, D, K = dataset.N, dataset.D, dataset.K
    grid = FractionGrid(D)
    codes = dataset.codes
    labelled = codes >= 0
    if np.any(dataset.marker_counts() == 0):
        raise ValueError("every component needs at least one labelled protein")

    base = list(init_hypers) if init_hypers is not None else _initial_hypers(X, codes, K, grid)
    if config.sampler == "fixed-eb" or config.init_jitter == 0:
        hypers = list(base)
    else:
        hypers = [GpHypers.from_array(h.as_array() + config.init_jitter * rng.standard_normal(3)) for h in base]

    if config.outlier:
        om = OutlierModel.from_data(X, config.outlier_df, config.beta_u, config.beta_v)
        log_g = outlier_logdensity(X, om)
        eps = config.beta_u / (config.beta_u + config.beta_v)
    else:
        om, log_g, eps = None, None, 0.0

    state = MixtureState(
        z=np.where(labelled, codes, 0),
        phi=labelled.astype(np.int8),
        pi=np.full(K, 1.0 / K),
        eps=eps,
        hypers=hypers,
        labelled=labelled,
        mus=np.zeros((K, D)),
    )
    # first allocation of unlabelled proteins scores against marker-only posteriors
    for k in range(K):
        sel = state.members(k)
        post = posterior_from_sums(int(sel.sum()), X[sel].sum(axis=0), hypers[k], grid)
        state.mus[k] = sample_posterior_function(post, rng)
    state.phi[:] = 1
    draw = sample_indicators(state, X, rng, SAMPLED_FUNCTION, log_g=log_g)
    sample_outlier_flags(state, draw.log_f, log_g, rng)
    state.pi = sample_mixing_proportions(state.z, K, rng, config.dirichlet)

    R = config.retained
    rec = {
        "z": np.empty((R, N), dtype=np.int16),
        "phi": np.empty((R, N), dtype=np.int8),
        "pi": np.empty((R, K)),
        "eps": np.empty(R),
        "theta": np.empty((R, K, 3)),
        "alloc": np.empty((R, N, K)),
        "outlier_prob": np.empty((R, N)),
        "sums": np.empty((R, K, D)),
        "counts": np.empty((R, K), dtype=np.int64),
        "times": np.empty(R),
    }
    mus_rec = np.empty((R, K, D)) if config.mode == SAMPLED_FUNCTION else None
    momenta = [None] * K
    accepts = np.zeros(K)
    n_updates = 0
    n_warn = 0
    slot = 0
    t0 = time.perf_counter()

    for it in range(config.iterations):
        if config.mode == SAMPLED_FUNCTION:
            for k in range(K):
                sel = state.members(k)
                post = posterior_from_sums(int(sel.sum()), X[sel].sum(axis=0), state.hypers[k], grid)
                state.mus[k] = sample_posterior_function(post, rng)
            draw = sample_indicators(state, X, rng, SAMPLED_FUNCTION, log_g=log_g)
            _, _, stuck = sample_outlier_flags(state, draw.log_f, log_g, rng)
            n_warn += draw.warnings + stuck
        else:
            draw = sample_indicators(state, X, rng, MARGINALISED, log_g=log_g, grid=grid,
                                     dirichlet=config.dirichlet)
            n_warn += draw.warnings
        if om is not None:
            state.eps = sample_epsilon(state.phi, labelled, om, rng)
        state.pi = sample_mixing_proportions(state.z, K, rng, config.dirichlet)
        if config.sampler != "fixed-eb" and (it + 1) % config.hyper_update_every == 0:
            n_updates += 1
            for k in range(K):
                data_k = _members_data(X, state, k)
                if config.sampler == "hmc":
                    state.hypers[k], momenta[k], acc = hmc_step(
                        state.hypers[k], data_k, config.prior, config.hmc, momenta[k], rng, grid)
                else:
                    state.hypers[k], acc = mh_step(state.hypers[k], data_k, config.prior, rng, config.mh_scale, grid)
                accepts[k] += acc

        if it >= config.burnin and (it - config.burnin) % config.thin == 0:
            rec["z"][slot] = state.z
            rec["phi"][slot] = state.phi
            rec["pi"][slot] = state.pi
            rec["eps"][slot] = state.eps
            rec["theta"][slot] = [h.as_array() for h in state.hypers]
            rec["alloc"][slot] = draw.alloc
            rec["outlier_prob"][slot] = draw.outlier_prob
            for k in range(K):
                sel = state.members(k)
                rec["sums"][slot, k] = X[sel].sum(axis=0)
                rec["counts"][slot, k] = sel.sum()
            if mus_rec is not None:
                mus_rec[slot] = state.mus
            rec["times"][slot] = time.perf_counter() - t0
            slot += 1

    if n_warn:
        warnings.warn(f"{n_warn} protein updates had no finite density", RuntimeWarning, stacklevel=2)
    return ChainRecord(
        mus=mus_rec,
        wall_seconds=time.perf_counter() - t0,
        hyper_accept=accepts / max(n_updates, 1),
        warnings=n_warn,
        **rec,
    )


def run_chains(dataset: ProfileDataset, config: RunConfig, init_hypers=None) -> list[ChainRecord]:
    """Run ``config.chains`` independent chains, each on its own spawned seed."""
    grid = FractionGrid(dataset.D)
    if init_hypers is None:
        init_hypers = _initial_hypers(dataset.X, dataset.codes, dataset.K, grid)
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    if config.chains == 1:
        return [run_chain(dataset, config, seeds[0], init_hypers)]
    jobs = (delayed(run_chain)(dataset, config, s, init_hypers) for s in seeds)
    return list(Parallel(n_jobs=config.n_jobs)(jobs))


def shannon_entropy(p) -> np.ndarray | float:
    """``-sum p log p`` in nats over the last axis, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    h = -terms.sum(axis=-1)
    return float(h) if h.ndim == 0 else h


def entropy_mc_average(records) -> np.ndarray:
    """Per-protein Monte Carlo average of the localisation entropy."""
    if isinstance(records, ChainRecord):
        records = [records]
    per_iter = np.concatenate([shannon_entropy(r.alloc) for r in records], axis=0)
    return per_iter.mean(axis=0)


def gelman_rubin(chains, split=True, confidence=0.95):
    """Potential scale reduction factor and its upper confidence limit.

    Follows Brooks & Gelman with the degrees-of-freedom correction used by
    coda's ``gelman.diag``.  With ``split`` each chain is halved first.
    Returns ``(nan, nan)`` when the within-chain variance is zero.

    Parameters
    ----------
    chains : array_like, shape (m, n)
        ``m >= 2`` equal-length scalar traces (``m >= 1`` when split).
    """
    x = np.asarray(chains, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("chains must be a 2-d array (chains x draws)")
    if split:
        half = x.shape[1] // 2
        x = np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)
    m, n = x.shape
    if m < 2 or n < 2:
        raise ValueError(f"need at least 2 chains of length >= 2, got {m} x {n}")
    means = x.mean(axis=1)
    s2 = x.var(axis=1, ddof=1)
    W = s2.mean()
    if not W > 0:
        return math.nan, math.nan
    B = n * means.var(ddof=1)
    V = (n - 1) / n * W + (1 + 1 / m) * B / n
    var_w = s2.var(ddof=1) / m
    var_b = 2 * B * B / (m - 1)
    cov_s2_xbar2 = np.cov(s2, means ** 2)[0, 1]
    cov_s2_xbar = np.cov(s2, means)[0, 1]
    cov_wb = (n / m) * (cov_s2_xbar2 - 2 * means.mean() * cov_s2_xbar)
    var_v = ((n - 1) ** 2 * var_w + (1 + 1 / m) ** 2 * var_b + 2 * (n - 1) * (1 + 1 / m) * cov_wb) / n ** 2
    df_v = 2 * V * V / var_v if var_v > 0 else math.inf
    df_adj = (df_v + 3) / (df_v + 1) if math.isfinite(df_v) else 1.0
    r2_fixed = (n - 1) / n
    r2_random = (1 + 1 / m) * (1 / n) * (B / W)
    rhat = math.sqrt(df_adj * (r2_fixed + r2_random))
    df_w = 2 * W * W / var_w if var_w > 0 else math.inf
    level = (1 + confidence) / 2
    # F(m-1, inf) is chi2(m-1) / (m-1)
    q = f_dist.ppf(level, m - 1, df_w) if math.isfinite(df_w) else chi2.ppf(level, m - 1) / (m - 1)
    upper = math.sqrt(df_adj * (r2_fixed + q * r2_random))
    return rhat, upper


def _autocorr(x):
    n = x.size
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    return acov / acov[0]


def effective_sample_size(trace, wall_seconds=None):
    """Geyer's initial positive sequence estimate of the effective sample size.

    Returns ``(ess, ess / wall_seconds)``; ``ess`` is nan for a constant trace
    and the rate is nan when no time is given.
    """
    x = np.asarray(trace, dtype=np.float64).ravel()
    n = x.size
    if n < 4:
        raise ValueError(f"trace too short for an ESS estimate ({n} draws)")
    if not np.var(x) > 0:
        return math.nan, math.nan
    rho = _autocorr(x)
    n_pairs = n // 2
    gamma = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    positive = gamma > 0
    stop = n_pairs if positive.all() else int(np.argmin(positive))
    # monotone sequence (Geyer 1992) guards against noisy tail pairs
    gamma = np.minimum.accumulate(gamma[:stop])
    tau = -1.0 + 2.0 * gamma.sum()
    ess = n / max(tau, 1.0 / math.log10(max(n, 10)))
    ess = min(ess, n * math.log10(max(n, 10)))
    rate = ess / wall_seconds if wall_seconds else math.nan
    return float(ess), float(rate)


def equal_tailed_interval(samples, level=0.95, axis=0):
    a = (1 - level) / 2
    lo, hi = np.quantile(samples, [a, 1 - a], axis=axis)
    return lo, hi


def _scalar_traces(records):
    K = records[0].theta.shape[1]
    names = {}
    for k in range(K):
        for j, label in enumerate(("theta1", "theta2", "theta3")):
            names[f"{label}[{k}]"] = np.array([r.theta[:, k, j] for r in records])
    names["eps"] = np.array([r.eps for r in records])
    return names


def summarise(records) -> PosteriorSummary:
    """Pool chains into allocation, entropy, hyperparameter, R-hat and ESS summaries."""
    if isinstance(records, ChainRecord):
        records = [records]
    records = [r for r in records if len(r) > 0]
    if not records:
        raise ValueError("no retained draws to summarise")
    alloc = np.concatenate([r.alloc for r in records])
    outl = np.concatenate([r.outlier_prob for r in records])
    full = np.concatenate([alloc * (1 - outl)[..., None], outl[..., None]], axis=-1)
    theta = np.concatenate([r.theta for r in records])
    lower, upper = equal_tailed_interval(theta)

    rhat, ess, ess_rate = {}, {}, {}
    total_seconds = sum(r.wall_seconds for r in records)
    lengths = {len(r) for r in records}
    for name, traces in _scalar_traces(records).items():
        if len(records) >= 2 and len(lengths) == 1 and traces.shape[1] >= 4:
            rhat[name] = gelman_rubin(traces)
        else:
            rhat[name] = (math.nan, math.nan)
        if traces.shape[1] >= 4:
            per_chain = [effective_sample_size(t)[0] for t in traces]
            e = float(np.sum(per_chain))
        else:
            e = math.nan
        ess[name] = e
        ess_rate[name] = e / total_seconds if total_seconds > 0 else math.nan

    return PosteriorSummary(
        allocation=full.mean(axis=0),
        localisation=alloc.mean(axis=0),
        entropy=entropy_mc_average(records),
        hyper_mean=theta.mean(axis=0),
        hyper_lower=lower,
        hyper_upper=upper,
        eps_mean=float(np.concatenate([r.eps for r in records]).mean()),
        pi_mean=np.concatenate([r.pi for r in records]).mean(axis=0),
        rhat=rhat,
        ess=ess,
        ess_per_second=ess_rate,
    )
