"""Scikit-learn style front end for the semi-supervised GP mixture."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .chain import RunConfig, run_chains, summarise
from .data import UNKNOWN, ProfileDataset
from .hyper import HmcConfig, HyperPrior
from .kernel import FractionGrid, GpHypers, posterior_from_sums, profile_loglik_given_function
from .mixture import SAMPLED_FUNCTION, DirichletConfig, OutlierModel, outlier_logdensity
from .validation import check_marker_counts, check_profiles, encode_partial_labels

__all__ = ["GPMixtureClassifier"]


class GPMixtureClassifier(ClassifierMixin, BaseEstimator):
    """Semi-supervised Bayesian mixture of GP regression components.

    Proteins whose label is ``-1``, ``None``, NaN or ``"unknown"`` are
    allocated during :meth:`fit`; the others anchor their component.  Each
    component is a GP with squared-exponential kernel over the fraction index,
    and a multivariate Student-t component absorbs outliers.

    Parameters
    ----------
    iterations, burnin, thin : int
        MCMC length, discarded prefix and thinning interval.
    hyper_update_every : int
        Hyperparameters are refreshed once every this many iterations.
    sampler : {"hmc", "mh", "fixed-eb"}
        Hyperparameter update; ``"fixed-eb"`` keeps the marker-only
        empirical-Bayes optimum for the whole run.
    mode : {"sampled_function", "marginalised"}
        Whether latent component functions are sampled or integrated out.
    chains : int
        Independent chains, run in parallel over ``n_jobs`` workers.
    prior_mean, prior_sd : float or array of 3
        Normal prior on the log hyperparameters.
    alpha : float
        Symmetric Dirichlet concentration (``alpha / K`` per component).
    outlier : bool
        Include the outlier component.
    hmc_steps, hmc_step_range, hmc_refresh, mh_scale
        Sampler tuning.
    random_state : int

    Attributes
    ----------
    classes_ : ndarray of shape (K,)
    allocation_ : ndarray of shape (N, K + 1)
        Posterior allocation of training proteins, outlier column last.
    entropy_ : ndarray of shape (N,)
        Monte Carlo average Shannon entropy (nats) of each localisation.
    outlier_proba_ : ndarray of shape (N,)
    transduction_ : ndarray of shape (N,)
        Most probable class of each training protein.
    hypers_ : ndarray of shape (K, 3)
        Posterior mean log hyperparameters.
    summary_ : PosteriorSummary
    records_ : list of ChainRecord
    """

    def __init__(
        self,
        iterations=20000,
        burnin=10000,
        thin=5,
        hyper_update_every=5,
        sampler="hmc",
        mode=SAMPLED_FUNCTION,
        chains=1,
        prior_mean=0.0,
        prior_sd=1.0,
        alpha=1.0,
        outlier=True,
        hmc_steps=20,
        hmc_step_range=(0.01, 0.05),
        hmc_refresh=0.9,
        mh_scale=1.0,
        random_state=0,
        n_jobs=-1,
    ):
        self.iterations = iterations
        self.burnin = burnin
        self.thin = thin
        self.hyper_update_every = hyper_update_every
        self.sampler = sampler
        self.mode = mode
        self.chains = chains
        self.prior_mean = prior_mean
        self.prior_sd = prior_sd
        self.alpha = alpha
        self.outlier = outlier
        self.hmc_steps = hmc_steps
        self.hmc_step_range = hmc_step_range
        self.hmc_refresh = hmc_refresh
        self.mh_scale = mh_scale
        self.random_state = random_state
        self.n_jobs = n_jobs

    def run_config(self) -> RunConfig:
        return RunConfig(
            iterations=self.iterations,
            burnin=self.burnin,
            thin=self.thin,
            hyper_update_every=self.hyper_update_every,
            sampler=self.sampler,
            chains=self.chains,
            seed=self.random_state,
            mode=self.mode,
            prior=HyperPrior(self.prior_mean, self.prior_sd),
            hmc=HmcConfig(leapfrog_steps=self.hmc_steps, step_range=tuple(self.hmc_step_range),
                          refresh=self.hmc_refresh),
            mh_scale=self.mh_scale,
            dirichlet=DirichletConfig(self.alpha),
            outlier=self.outlier,
            n_jobs=self.n_jobs,
        )

    def fit(self, X, y):
        X = check_profiles(X)
        classes, codes = encode_partial_labels(y, X.shape[0])
        check_marker_counts(codes, classes.size)
        names = tuple(str(c) for c in classes)
        labels = tuple(names[c] if c >= 0 else UNKNOWN for c in codes)
        ids = tuple(str(i) for i in range(X.shape[0]))
        self.classes_ = classes
        return self._fit_dataset(ProfileDataset(ids, X, labels, names))

    def fit_dataset(self, dataset: ProfileDataset):
        """Fit directly on a :class:`ProfileDataset`; classes are its niche names."""
        self.classes_ = np.array(dataset.niche_names)
        return self._fit_dataset(dataset)

    def _fit_dataset(self, ds):
        config = self.run_config()
        self.records_ = run_chains(ds, config)
        self.summary_ = summarise(self.records_)
        s = self.summary_
        self.n_features_in_ = ds.D
        self.allocation_ = s.allocation
        self.localisation_ = s.localisation
        self.entropy_ = s.entropy
        self.outlier_proba_ = s.allocation[:, -1]
        self.transduction_ = self.classes_[np.argmax(s.localisation, axis=1)]
        self.hypers_ = s.hyper_mean
        self.outlier_model_ = OutlierModel.from_data(ds.X, config.outlier_df, config.beta_u, config.beta_v) \
            if config.outlier else None
        return self

    def _draw_logliks(self, X):
        """Yield ``(log pi + log f, log eps-weighted outlier term or None, eps)`` per retained draw."""
        grid = FractionGrid(self.n_features_in_)
        log_g = outlier_logdensity(X, self.outlier_model_) if self.outlier_model_ is not None else None
        for rec in self.records_:
            for r in range(len(rec)):
                hypers = [GpHypers.from_array(t) for t in rec.theta[r]]
                with np.errstate(divide="ignore"):
                    log_pi = np.log(rec.pi[r])
                log_f = np.empty((X.shape[0], len(hypers)))
                for k, h in enumerate(hypers):
                    if rec.mus is not None:
                        log_f[:, k] = profile_loglik_given_function(X, rec.mus[r, k], h.sigma2)
                    else:
                        post = posterior_from_sums(int(rec.counts[r, k]), rec.sums[r, k], h, grid)
                        log_f[:, k] = post.predictive_logpdf(X)
                yield log_pi + log_f, log_g, float(rec.eps[r])

    def predict_proba(self, X) -> np.ndarray:
        """Localisation probabilities given inlier status, averaged over retained draws."""
        check_is_fitted(self, "records_")
        X = check_profiles(X, self.n_features_in_)
        total = np.zeros((X.shape[0], self.classes_.size))
        count = 0
        for logw, _, _ in self._draw_logliks(X):
            total += np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
            count += 1
        return total / count

    def outlier_proba(self, X) -> np.ndarray:
        """Posterior probability that each profile belongs to the outlier component."""
        check_is_fitted(self, "records_")
        X = check_profiles(X, self.n_features_in_)
        if self.outlier_model_ is None:
            return np.zeros(X.shape[0])
        total = np.zeros(X.shape[0])
        count = 0
        for logw, log_g, eps in self._draw_logliks(X):
            count += 1
            if eps <= 0:
                continue
            inlier = math.log1p(-eps) + logsumexp(logw, axis=1)
            out = math.log(eps) + log_g
            total += np.exp(out - np.logaddexp(inlier, out))
        return total / count

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "records_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
