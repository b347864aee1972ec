"""Semi-supervised Bayesian mixtures of Gaussian-process regression components."""
from .chain import RunConfig, effective_sample_size, gelman_rubin, run_chain, run_chains, shannon_entropy, summarise
from .cv import cross_validate, quadratic_loss
from .data import ProfileDataset, load_dataset, save_dataset, simulate
from .estimator import GPMixtureClassifier
from .hyper import HmcConfig, HyperPrior, optimize_empirical_bayes
from .kernel import ComponentData, FractionGrid, GpHypers, log_marginal, log_marginal_and_grad
from .linalg import StructuredCovariance, ToeplitzSpec, trench_inverse

__version__ = "0.1.0"

__all__ = [
    "ComponentData",
    "FractionGrid",
    "GPMixtureClassifier",
    "GpHypers",
    "HmcConfig",
    "HyperPrior",
    "ProfileDataset",
    "RunConfig",
    "StructuredCovariance",
    "ToeplitzSpec",
    "cross_validate",
    "effective_sample_size",
    "gelman_rubin",
    "load_dataset",
    "log_marginal",
    "log_marginal_and_grad",
    "optimize_empirical_bayes",
    "quadratic_loss",
    "run_chain",
    "run_chains",
    "save_dataset",
    "shannon_entropy",
    "simulate",
    "summarise",
    "trench_inverse",
]
