import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gpmix.data import DatasetError, simulate
from gpmix.estimator import GPMixtureClassifier
from gpmix.mixture import MARGINALISED
from gpmix.validation import check_profiles, encode_partial_labels, is_unlabelled

FAST = dict(iterations=60, burnin=20, thin=2, n_jobs=1)


@pytest.fixture(scope="module")
def problem():
    ds, truth = simulate(3, 6, 20, (0.5, 0.0, -1.5), 0.05, seed=4)
    y = np.where(ds.labelled, ds.codes, -1)
    return ds, truth, y


class TestValidation:
    @pytest.mark.parametrize("v", [None, -1, float("nan"), "unknown", "", " unknown "])
    def test_unlabelled_markers(self, v):
        assert is_unlabelled(v)

    @pytest.mark.parametrize("v", [0, 2, "ER", 1.0])
    def test_labelled(self, v):
        assert not is_unlabelled(v)

    def test_encode(self):
        classes, codes = encode_partial_labels(["b", "unknown", "a", None, "b"], 5)
        assert list(classes) == ["a", "b"]
        np.testing.assert_array_equal(codes, [1, -1, 0, -1, 1])

    def test_encode_errors(self):
        with pytest.raises(ValueError):
            encode_partial_labels([-1, -1], 2)
        with pytest.raises(ValueError):
            encode_partial_labels([1, 2], 3)
        with pytest.raises(ValueError):
            encode_partial_labels(["a", 1], 2)

    def test_check_profiles(self):
        with pytest.raises(ValueError):
            check_profiles(np.ones((3, 1)))
        with pytest.raises(ValueError):
            check_profiles([[1.0, np.inf]])
        with pytest.raises(ValueError):
            check_profiles(np.ones((2, 3)), n_features=4)


class TestEstimator:
    def test_params_round_trip(self):
        est = GPMixtureClassifier(iterations=50, sampler="mh")
        assert clone(est).get_params() == est.get_params()
        est.set_params(chains=3)
        assert est.chains == 3

    def test_fit_predict(self, problem):
        ds, truth, y = problem
        est = GPMixtureClassifier(**FAST).fit(ds.X, y)
        N, K = ds.N, ds.K
        np.testing.assert_array_equal(est.classes_, [0, 1, 2])
        assert est.allocation_.shape == (N, K + 1)
        np.testing.assert_allclose(est.allocation_.sum(axis=1), 1.0)
        assert est.entropy_.shape == (N,) and est.hypers_.shape == (K, 3)
        inl = ~truth.outlier
        assert np.mean(est.transduction_[inl] == truth.z[inl]) > 0.9
        proba = est.predict_proba(ds.X[:10])
        assert proba.shape == (10, K)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0)
        np.testing.assert_array_equal(est.predict(ds.X[:10]), est.classes_[proba.argmax(axis=1)])
        out = est.outlier_proba(ds.X[:10])
        assert np.all((out >= 0) & (out <= 1))

    def test_marginalised_predict(self, problem):
        ds, truth, y = problem
        est = GPMixtureClassifier(mode=MARGINALISED, sampler="fixed-eb", **FAST).fit(ds.X, y)
        lab = ds.labelled
        assert np.mean(est.predict(ds.X[lab]) == ds.codes[lab]) > 0.95

    def test_string_labels(self, problem):
        ds, _, _ = problem
        y = np.array(ds.labels, dtype=object)
        est = GPMixtureClassifier(sampler="fixed-eb", **FAST).fit(ds.X, y)
        assert list(est.classes_) == list(ds.niche_names)
        assert set(est.transduction_) <= set(ds.niche_names)

    def test_fit_dataset(self, problem):
        ds, _, _ = problem
        est = GPMixtureClassifier(sampler="fixed-eb", **FAST).fit_dataset(ds)
        assert list(est.classes_) == list(ds.niche_names)

    def test_deterministic(self, problem):
        ds, _, y = problem
        a = GPMixtureClassifier(random_state=3, **FAST).fit(ds.X, y)
        b = GPMixtureClassifier(random_state=3, **FAST).fit(ds.X, y)
        np.testing.assert_array_equal(a.allocation_, b.allocation_)

    def test_errors(self, problem):
        ds, _, y = problem
        with pytest.raises(NotFittedError):
            GPMixtureClassifier().predict(ds.X)
        y1 = y.copy()
        y1[np.flatnonzero(y1 == 0)[1:]] = -1
        with pytest.raises(DatasetError):
            GPMixtureClassifier(**FAST).fit(ds.X, y1)
        est = GPMixtureClassifier(sampler="fixed-eb", **FAST).fit(ds.X, y)
        with pytest.raises(ValueError):
            est.predict(ds.X[:, :3])
