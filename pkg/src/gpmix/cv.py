"""Repeated class-stratified hold-out evaluation scored by quadratic loss."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from joblib import Parallel, delayed

from .chain import RunConfig, run_chains, summarise
from .data import UNKNOWN, DatasetError, ProfileDataset

__all__ = ["CvReport", "quadratic_loss", "stratified_split", "cross_validate"]

MIN_CLASS_SIZE = 5


def quadratic_loss(pred, truth) -> np.ndarray | float:
    """``sum_k (p_k - 1[k = truth])^2``; rows of a 2-d ``pred`` are scored separately."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth)
    onehot = np.zeros_like(pred)
    if pred.ndim == 1:
        onehot[int(truth)] = 1.0
        return float(np.sum((pred - onehot) ** 2))
    onehot[np.arange(pred.shape[0]), truth] = 1.0
    return np.sum((pred - onehot) ** 2, axis=1)


@dataclass
class CvReport:
    """Per-split mean quadratic losses, the derived split seeds and wall times."""

    losses: np.ndarray
    seeds: np.ndarray
    test_sizes: np.ndarray
    seconds: np.ndarray
    config: RunConfig

    @property
    def median(self) -> float:
        return float(np.median(self.losses))

    def same_result(self, other: "CvReport") -> bool:
        return np.array_equal(self.losses, other.losses) and np.array_equal(self.seeds, other.seeds)


def stratified_split(codes, K, test_fraction, rng, names=None):
    """Indices of test markers: ``max(1, round(test_fraction * m_k))`` per class."""
    test = []
    for k in range(K):
        members = np.flatnonzero(codes == k)
        if members.size < MIN_CLASS_SIZE:
            name = names[k] if names is not None else k
            raise DatasetError(f"class {name!r} has {members.size} labelled proteins; "
                               f"stratified splitting needs >= {MIN_CLASS_SIZE}")
        n_test = max(1, int(round(test_fraction * members.size)))
        test.append(rng.choice(members, size=n_test, replace=False))
    return np.sort(np.concatenate(test))


def _masked(dataset, test, keep, permute, rng):
    labels = np.array(dataset.labels, dtype=object)
    labels[test] = UNKNOWN
    X = dataset.X.copy()
    if permute:
        for i in test:
            X[i] = X[i, rng.permutation(dataset.D)]
    masked = replace(dataset, X=X[keep], labels=tuple(labels[keep]), ids=tuple(np.array(dataset.ids)[keep]))
    return masked


def _one_split(dataset, config, seq, test_fraction, include_unlabelled, permute):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seq)
    codes = dataset.codes
    test = stratified_split(codes, dataset.K, test_fraction, rng, dataset.niche_names)
    keep = np.arange(dataset.N) if include_unlabelled else np.flatnonzero(codes >= 0)
    truth = codes[test]
    # the masked copy is the only thing the sampler sees
    masked = _masked(dataset, test, keep, permute, rng)
    position = np.searchsorted(keep, test)
    chain_seed = int(seq.generate_state(1, np.uint64)[0])
    records = run_chains(masked, replace(config, seed=chain_seed, n_jobs=1))
    probs = summarise(records).localisation[position]
    loss = float(np.mean(quadratic_loss(probs, truth)))
    return loss, chain_seed, test.size, time.perf_counter() - t0


def cross_validate(
    dataset: ProfileDataset,
    config: RunConfig,
    splits: int = 100,
    seed: int = 0,
    test_fraction: float = 0.2,
    *,
    include_unlabelled: bool = False,
    permute_test: bool = False,
    n_jobs: int | None = 1,
) -> CvReport:
    """Repeat a class-stratified train/test split of the labelled proteins.

    In each split the test proteins' labels are replaced by ``"unknown"``,
    the sampler runs on the masked copy and the mean localisation
    probabilities of the test proteins are scored against their hidden
    classes.  ``permute_test`` shuffles each test profile across fractions,
    a negative control that should push the loss toward the uninformative
    value.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if splits < 1:
        raise ValueError("splits must be >= 1")
    seqs = np.random.SeedSequence(seed).spawn(splits)
    # fail fast on infeasible stratification before launching workers
    stratified_split(dataset.codes, dataset.K, test_fraction, np.random.default_rng(0), dataset.niche_names)
    jobs = (delayed(_one_split)(dataset, config, s, test_fraction, include_unlabelled, permute_test) for s in seqs)
    out = Parallel(n_jobs=n_jobs)(jobs) if n_jobs not in (None, 1) else [j[0](*j[1], **j[2]) for j in jobs]
    losses, seeds, sizes, secs = map(np.array, zip(*out))
    return CvReport(losses, seeds.astype(np.uint64), sizes, secs, config)
