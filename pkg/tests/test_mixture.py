import math

import numpy as np
import pytest
from scipy.stats import multivariate_t

from gpmix.chain import RunConfig, run_chain
from gpmix.kernel import FractionGrid, GpHypers, posterior_from_sums, profile_loglik_given_function
from gpmix.mixture import (
    MARGINALISED,
    SAMPLED_FUNCTION,
    DirichletConfig,
    MixtureState,
    OutlierModel,
    component_logliks,
    indicator_prior_weight,
    outlier_logdensity,
    sample_epsilon,
    sample_indicators,
    sample_mixing_proportions,
    sample_outlier_flags,
)

from oracles import empirical_state_frequencies, exact_allocation_posterior, tiny_instance, total_variation

H = GpHypers(0.5, -0.5, -1.5)


def make_state(X, labelled_codes, mus=None, eps=0.1, K=2):
    codes = np.asarray(labelled_codes)
    lab = codes >= 0
    return MixtureState(
        z=np.where(lab, codes, 0),
        phi=np.ones(len(codes), dtype=np.int8),
        pi=np.full(K, 1.0 / K),
        eps=eps,
        hypers=[H] * K,
        labelled=lab,
        mus=mus,
    )


class TestDensities:
    def test_outlier_matches_scipy(self, rng):
        X = rng.standard_normal((50, 4))
        om = OutlierModel.from_data(X, kappa=4)
        ref = multivariate_t(loc=om.M, shape=om.V, df=4)
        np.testing.assert_allclose(outlier_logdensity(X, om), ref.logpdf(X), rtol=1e-10)
        assert outlier_logdensity(X[0], om) == pytest.approx(ref.logpdf(X[0]))

    def test_outlier_model_from_data(self, rng):
        X = rng.standard_normal((30, 3))
        om = OutlierModel.from_data(X)
        np.testing.assert_allclose(om.M, X.mean(axis=0))
        np.testing.assert_allclose(om.V, 0.5 * np.cov(X, rowvar=False))

    def test_outlier_model_validation(self):
        with pytest.raises(ValueError):
            OutlierModel(np.zeros(2), np.eye(3))
        with pytest.raises(ValueError):
            OutlierModel(np.zeros(2), np.eye(2), kappa=2)
        with pytest.raises(ValueError):
            OutlierModel(np.zeros(2), np.eye(2), beta_u=0)

    def test_component_logliks(self, rng):
        X = rng.standard_normal((5, 3))
        mus = rng.standard_normal((2, 3))
        hs = [GpHypers(0, 0, -1), GpHypers(0, 0, 0)]
        L = component_logliks(X, mus, hs)
        for k in range(2):
            np.testing.assert_allclose(L[:, k], profile_loglik_given_function(X, mus[k], hs[k].sigma2))

    def test_prior_weight(self):
        assert indicator_prior_weight(3, 10, 2, 1.0) == pytest.approx(3.5 / 10)
        # weights over k sum to one when the counts exclude protein i
        counts = np.array([4, 0, 5])
        assert sum(indicator_prior_weight(c, 10, 3, 2.0) for c in counts) == pytest.approx(1.0)

    def test_dirichlet_validation(self):
        with pytest.raises(ValueError):
            DirichletConfig(0.0)


class TestConjugateDraws:
    def test_mixing_proportions_mean(self):
        rng = np.random.default_rng(0)
        z = np.array([0] * 6 + [1] * 2 + [2] * 1)
        draws = np.array([sample_mixing_proportions(z, 3, rng, DirichletConfig(3.0)) for _ in range(20000)])
        expected = (np.array([6, 2, 1]) + 1.0) / 12.0
        np.testing.assert_allclose(draws.mean(axis=0), expected, atol=0.005)

    def test_epsilon_ignores_labelled(self):
        rng = np.random.default_rng(1)
        om = OutlierModel(np.zeros(2), np.eye(2), beta_u=2, beta_v=10)
        phi = np.array([0, 0, 1, 1, 1, 1, 0])
        labelled = np.array([False] * 6 + [True])
        draws = np.array([sample_epsilon(phi, labelled, om, rng) for _ in range(20000)])
        assert draws.mean() == pytest.approx(4 / 18, abs=0.003)


class TestIndicatorsSampledFunction:
    def test_labelled_fixed_and_probabilities(self, rng):
        X = rng.standard_normal((8, 3))
        codes = np.array([0, 1, -1, -1, -1, -1, -1, -1])
        mus = rng.standard_normal((2, 3))
        state = make_state(X, codes, mus)
        state.pi = np.array([0.3, 0.7])
        om = OutlierModel.from_data(X)
        draw = sample_indicators(state, X, rng, SAMPLED_FUNCTION, om=om)
        assert draw.z[0] == 0 and draw.z[1] == 1
        np.testing.assert_array_equal(draw.alloc[:2], np.eye(2))
        logw = np.log(state.pi) + component_logliks(X, mus, state.hypers)
        w = np.exp(logw - logw.max(axis=1, keepdims=True))
        np.testing.assert_allclose(draw.alloc[2:], (w / w.sum(axis=1, keepdims=True))[2:])
        f = np.exp(logw).sum(axis=1)
        g = np.exp(outlier_logdensity(X, om))
        np.testing.assert_allclose(draw.outlier_prob[2:], (0.1 * g / (0.9 * f + 0.1 * g))[2:], rtol=1e-9)
        assert np.all(draw.outlier_prob[:2] == 0)

    def test_zero_eps_never_flags(self, rng):
        X = rng.standard_normal((6, 3))
        state = make_state(X, [0, 1, -1, -1, -1, -1], rng.standard_normal((2, 3)), eps=0.0)
        om = OutlierModel.from_data(X)
        draw = sample_indicators(state, X, rng, SAMPLED_FUNCTION, om=om)
        phi, p0, stuck = sample_outlier_flags(state, draw.log_f, outlier_logdensity(X, om), rng)
        assert np.all(phi == 1) and np.all(p0 == 0) and stuck == 0

    def test_conditional_frequencies(self):
        rng = np.random.default_rng(4)
        X = np.array([[0.0, 0.0], [1.0, 1.0], [0.4, 0.5]])
        mus = np.array([[0.0, 0.0], [1.0, 1.0]])
        state = make_state(X, [0, 1, -1], mus, eps=0.0)
        hits = 0
        for _ in range(20000):
            hits += sample_indicators(state, X, rng, SAMPLED_FUNCTION).z[2] == 1
        d0 = profile_loglik_given_function(X[2], mus[0], H.sigma2)
        d1 = profile_loglik_given_function(X[2], mus[1], H.sigma2)
        p1 = 1 / (1 + math.exp(d0 - d1))
        assert hits / 20000 == pytest.approx(p1, abs=4 * math.sqrt(p1 * (1 - p1) / 20000) + 1e-3)

    def test_missing_mus(self, rng):
        X = rng.standard_normal((3, 2))
        with pytest.raises(ValueError, match="mus"):
            sample_indicators(make_state(X, [0, 1, -1]), X, rng, SAMPLED_FUNCTION)

    def test_unknown_mode(self, rng):
        X = rng.standard_normal((3, 2))
        with pytest.raises(ValueError):
            sample_indicators(make_state(X, [0, 1, -1]), X, rng, "nope")

    def test_all_infinite_density_forced_to_outlier(self, rng):
        X = np.array([[0.0, 0.0], [1.0, 1.0], [1e200, 1e200]])
        state = make_state(X, [0, 1, -1], np.zeros((2, 2)))
        om = OutlierModel(np.zeros(2), np.eye(2))
        draw = sample_indicators(state, X, rng, SAMPLED_FUNCTION, om=om)
        assert draw.warnings == 1 and state.phi[2] == 0
        np.testing.assert_allclose(draw.alloc[2], [0.5, 0.5])


class TestIndicatorsMarginalised:
    def test_allocation_matches_predictive(self, rng):
        X = rng.standard_normal((5, 3))
        state = make_state(X, [0, 0, 1, -1, -1], eps=0.0)
        state.z[:] = [0, 0, 1, 0, 1]
        grid = FractionGrid(3)
        # the first unlabelled protein sees the other members of each component
        before = state.z.copy()
        draw = sample_indicators(state, X, rng, MARGINALISED, grid=grid, dirichlet=DirichletConfig(1.0))
        logw = []
        for k in range(2):
            others = [j for j in range(5) if j != 3 and before[j] == k]
            post = posterior_from_sums(len(others), X[others].sum(axis=0), H, grid)
            logw.append(math.log(len(others) + 0.5) + post.predictive_logpdf(X[3])[0])
        w = np.exp(np.array(logw) - max(logw))
        np.testing.assert_allclose(draw.alloc[3], w / w.sum(), rtol=1e-9)


@pytest.mark.parametrize("mode", [SAMPLED_FUNCTION, MARGINALISED])
def test_short_run_matches_enumeration(mode):
    ds = tiny_instance()
    hypers = [H, H]
    om = OutlierModel.from_data(ds.X)
    states, exact = exact_allocation_posterior(ds, hypers, om)
    cfg = RunConfig(iterations=6000, burnin=200, thin=1, sampler="fixed-eb", mode=mode, seed=7)
    rec = run_chain(ds, cfg, init_hypers=hypers)
    freq = empirical_state_frequencies(rec.z, rec.phi, np.flatnonzero(ds.codes < 0), states)
    assert total_variation(freq, exact) < 0.06
