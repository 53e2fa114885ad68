"""Probabilistic contrastive PCA.

Fits a shared low-rank-plus-noise Gaussian model that maximizes the
likelihood of a foreground dataset relative to a weighted background
likelihood, with closed-form estimation, feasibility diagnostics for the
contrast weight, missing-data fitting and imputation, data generation,
and generalized-Bayes posterior sampling.
"""

from .dataset import (ContrastivePair, DataMatrix, ObservationMask, center,
                      load_csv, make_pair, mask_at_random)
from .errors import (CsvParseError, InfeasibleGammaError, MetricUndefinedError,
                     NonConvergenceError, NumericError, PcpcaError,
                     RankDeficiencyError, SamplerStuckError)
from .estimators import (PcpcaModel, Subspace, fit_cpca, fit_pca, fit_pcpca,
                         fit_ppca, gamma_from_prime, gamma_to_prime, generate,
                         heldout_log_likelihood, project,
                         relative_log_likelihood)
from .evalkit import (ExperimentReport, ExperimentSpec, MixtureSpec,
                      gamma_sweep, inject_noise, run_experiment, silhouette,
                      simulate_dual_ppca, simulate_mixture, write_report)
from .gibbs import (GibbsChain, GibbsConfig, PopulationMixture, PriorBox,
                    contraction_stat, empirical_risk_cpca,
                    empirical_risk_pcpca, population_minimizer,
                    population_minimizer_cpca, risk_divergence, sample_gibbs)
from .missing import (FitTrace, OptimizerConfig, fit_missing, impute,
                      impute_matrix, imputation_mse, masked_gradient,
                      masked_objective)
from .spectral import (GammaReport, Spectrum, differential_covariance,
                       eig_desc, gamma_mle_report, gamma_pd_bound,
                       gamma_rank_d_bound)

__version__ = "0.1.0"

__all__ = [
    "ContrastivePair", "DataMatrix", "ObservationMask", "center", "load_csv",
    "make_pair", "mask_at_random",
    "CsvParseError", "InfeasibleGammaError", "MetricUndefinedError",
    "NonConvergenceError", "NumericError", "PcpcaError", "RankDeficiencyError",
    "SamplerStuckError",
    "PcpcaModel", "Subspace", "fit_cpca", "fit_pca", "fit_pcpca", "fit_ppca",
    "gamma_from_prime", "gamma_to_prime", "generate", "heldout_log_likelihood",
    "project", "relative_log_likelihood",
    "ExperimentReport", "ExperimentSpec", "MixtureSpec", "gamma_sweep",
    "inject_noise", "run_experiment", "silhouette", "simulate_dual_ppca",
    "simulate_mixture", "write_report",
    "GibbsChain", "GibbsConfig", "PopulationMixture", "PriorBox",
    "contraction_stat", "empirical_risk_cpca", "empirical_risk_pcpca",
    "population_minimizer", "population_minimizer_cpca", "risk_divergence",
    "sample_gibbs",
    "FitTrace", "OptimizerConfig", "fit_missing", "impute", "impute_matrix",
    "imputation_mse", "masked_gradient", "masked_objective",
    "GammaReport", "Spectrum", "differential_covariance", "eig_desc",
    "gamma_mle_report", "gamma_pd_bound", "gamma_rank_d_bound",
]
