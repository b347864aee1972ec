"""Profile datasets: CSV input/output and a generator drawing from the mixture model."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .kernel import FractionGrid, GpHypers, kernel_toeplitz

__all__ = [
    "UNKNOWN",
    "DatasetError",
    "ProfileDataset",
    "SimulationTruth",
    "load_dataset",
    "save_dataset",
    "simulate",
]

UNKNOWN = "unknown"


class DatasetError(ValueError):
    """Invalid dataset contents; the message names the offending row or class."""


@dataclass(frozen=True)
class ProfileDataset:
    """``N`` protein profiles over ``D`` fractions with partial niche labels.

    ``labels[i]`` is a niche name or ``"unknown"``.  ``niche_names`` fixes the
    component order.
    """

    ids: tuple
    X: np.ndarray
    labels: tuple
    niche_names: tuple
    min_markers: int = 2

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "labels", tuple(str(s) for s in self.labels))
        object.__setattr__(self, "niche_names", tuple(str(s) for s in self.niche_names))
        if X.ndim != 2:
            raise DatasetError(f"X must be N x D, got shape {X.shape}")
        N, D = X.shape
        if D < 2:
            raise DatasetError(f"need at least 2 fractions, got {D}")
        if len(self.ids) != N or len(self.labels) != N:
            raise DatasetError(f"{N} profiles but {len(self.ids)} ids and {len(self.labels)} labels")
        bad = np.flatnonzero(~np.all(np.isfinite(X), axis=1))
        if bad.size:
            raise DatasetError(f"non-finite values in row(s) {', '.join(self.ids[i] for i in bad[:5])}")
        if UNKNOWN in self.niche_names or len(set(self.niche_names)) != len(self.niche_names):
            raise DatasetError(f"invalid niche names {self.niche_names}")
        known = set(self.niche_names)
        for i, lab in enumerate(self.labels):
            if lab != UNKNOWN and lab not in known:
                raise DatasetError(f"row {self.ids[i]}: unknown niche {lab!r}")
        counts = self.marker_counts()
        for name, c in zip(self.niche_names, counts):
            if c < self.min_markers:
                raise DatasetError(f"niche {name!r} has {c} labelled proteins, need >= {self.min_markers}")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return len(self.niche_names)

    @property
    def codes(self) -> np.ndarray:
        """Component index per protein, -1 for unlabelled."""
        lookup = {name: k for k, name in enumerate(self.niche_names)}
        return np.array([lookup.get(lab, -1) for lab in self.labels], dtype=int)

    @property
    def labelled(self) -> np.ndarray:
        return self.codes >= 0

    def marker_counts(self) -> np.ndarray:
        c = self.codes
        return np.bincount(c[c >= 0], minlength=self.K)[: self.K]

    def with_labels(self, labels) -> "ProfileDataset":
        return replace(self, labels=tuple(labels))

    def centered(self) -> "ProfileDataset":
        """Subtract the global mean profile."""
        return replace(self, X=self.X - self.X.mean(axis=0))


@dataclass(frozen=True)
class SimulationTruth:
    z: np.ndarray
    outlier: np.ndarray
    mus: np.ndarray
    hypers: tuple


def load_dataset(path, center=False, niche_names=None, min_markers=2) -> ProfileDataset:
    """Read ``id,f1..fD,marker`` CSV.

    ``niche_names`` pins the component order (and rejects markers outside it);
    otherwise the sorted distinct marker values are used.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if len(header) < 4 or header[0].strip() != "id" or header[-1].strip() != "marker":
            raise DatasetError(f"{path}: header must be 'id,f1,...,fD,marker', got {header}")
        width = len(header)
        ids, rows, labels = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DatasetError(f"{path}:{line_no}: expected {width} fields, got {len(row)}")
            values = []
            for col, cell in zip(header[1:-1], row[1:-1]):
                cell = cell.strip()
                if not cell:
                    raise DatasetError(f"{path}:{line_no}: row {row[0]!r} has a missing value in {col}")
                try:
                    v = float(cell)
                except ValueError:
                    raise DatasetError(f"{path}:{line_no}: non-numeric value {cell!r} in {col}") from None
                if not math.isfinite(v):
                    raise DatasetError(f"{path}:{line_no}: non-finite value {cell!r} in {col}")
                values.append(v)
            ids.append(row[0])
            rows.append(values)
            labels.append(row[-1].strip() or UNKNOWN)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    if niche_names is None:
        niche_names = sorted({lab for lab in labels if lab != UNKNOWN})
    else:
        allowed = set(niche_names)
        for line_no, lab in enumerate(labels, start=2):
            if lab != UNKNOWN and lab not in allowed:
                raise DatasetError(f"{path}:{line_no}: marker {lab!r} is not one of {sorted(allowed)}")
    ds = ProfileDataset(tuple(ids), np.array(rows), tuple(labels), tuple(niche_names), min_markers)
    return ds.centered() if center else ds


def save_dataset(ds: ProfileDataset, path) -> None:
    """Write the CSV format read by :func:`load_dataset`; floats round-trip exactly."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *(f"f{j + 1}" for j in range(ds.D)), "marker"])
        for pid, x, lab in zip(ds.ids, ds.X, ds.labels):
            w.writerow([pid, *(repr(float(v)) for v in x), lab])


def simulate(
    K: int,
    D: int,
    n_per_component: int,
    thetas,
    eps_true: float = 0.0,
    seed: int = 0,
    *,
    marker_fraction: float = 0.3,
    outlier_scale: float = 2.0,
    outlier_df: float = 4.0,
    marker_selection: str = "random",
):
    """Draw a dataset from the mixture model.

    Each component gets one latent function from its GP prior; its proteins
    are that function plus ``N(0, sigma_k^2 I)`` noise.  Each protein is
    independently replaced, with probability ``eps_true``, by a multivariate
    t draw (``outlier_df`` degrees of freedom, isotropic scale
    ``outlier_scale``) centred on the mean of the latent functions.  Markers
    are taken from inliers: a ``marker_fraction`` share of each component,
    chosen at random or, with ``marker_selection="low_noise"``, from the half
    of the component closest to its latent function.

    Returns
    -------
    dataset : ProfileDataset
    truth : SimulationTruth
    """
    if marker_selection not in ("random", "low_noise"):
        raise ValueError(f"unknown marker_selection {marker_selection!r}")
    rng = np.random.default_rng(seed)
    thetas = np.broadcast_to(np.asarray(thetas, dtype=np.float64), (K, 3))
    hypers = tuple(GpHypers.from_array(t) for t in thetas)
    grid = FractionGrid(D)
    mus = np.array([
        rng.multivariate_normal(np.zeros(D), kernel_toeplitz(grid, h).dense(), method="eigh")
        for h in hypers
    ])
    z = np.repeat(np.arange(K), n_per_component)
    N = z.size
    X = mus[z] + np.sqrt([h.sigma2 for h in hypers])[z, None] * rng.standard_normal((N, D))
    outlier = rng.uniform(size=N) < eps_true
    n_out = int(outlier.sum())
    if n_out:
        w = rng.chisquare(outlier_df, size=n_out) / outlier_df
        X[outlier] = mus.mean(axis=0) + outlier_scale * rng.standard_normal((n_out, D)) / np.sqrt(w)[:, None]

    names = tuple(f"C{k + 1}" for k in range(K))
    labels = np.full(N, UNKNOWN, dtype=object)
    n_markers = max(2, int(math.ceil(marker_fraction * n_per_component)))
    for k in range(K):
        pool = np.flatnonzero((z == k) & ~outlier)
        if marker_selection == "low_noise":
            resid = np.linalg.norm(X[pool] - mus[k], axis=1)
            pool = pool[np.argsort(resid, kind="stable")[: max(n_markers, pool.size // 2)]]
        if pool.size < n_markers:
            raise ValueError(f"component {k} has only {pool.size} inliers for {n_markers} markers")
        labels[rng.choice(pool, size=n_markers, replace=False)] = names[k]

    order = rng.permutation(N)
    ids = tuple(f"P{i + 1:05d}" for i in range(N))
    ds = ProfileDataset(ids, X[order], tuple(labels[order]), names)
    return ds, SimulationTruth(z[order], outlier[order], mus, hypers)
