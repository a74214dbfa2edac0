"""Bayesian estimation of hidden population size from multiple event sources."""

__version__ = "0.1.0"

from .config import BiasSpec, ConfigError, ModelConfig, Priors, Regression, load_config, main_effects_config
from .data import DatasetError, StrataDataset, load_dataset, parse_dataset, save_dataset
from .design import Design, build_design, linear_predictor
from .diagnostics import consistency_pvalue, deviance_report, pd_and_dic, residual_deviance
from .episodes import code_treatment_episodes
from .fitting import Fit, fit_model
from .likelihood import (Model, ParameterVector, extra_time_at_risk, grad_log_posterior,
                         joint_log_posterior, log_lik_count, rmst)
from .convergence import ess, ess_bulk, ess_tail, rhat
from .sampler import PosteriorDraws, SamplerConfig, run_chains
from .selection import stepwise_select
from .summary import summarize
from .synthetic import generate_synthetic, reference_truth

__all__ = [
    "BiasSpec", "ConfigError", "ModelConfig", "Priors", "Regression", "load_config",
    "main_effects_config", "DatasetError", "StrataDataset", "load_dataset",
    "parse_dataset", "save_dataset", "Design", "build_design", "linear_predictor",
    "consistency_pvalue", "deviance_report", "pd_and_dic", "residual_deviance",
    "code_treatment_episodes", "Fit", "fit_model", "Model", "ParameterVector",
    "extra_time_at_risk", "grad_log_posterior", "joint_log_posterior", "log_lik_count",
    "rmst", "ess", "ess_bulk", "ess_tail", "rhat", "PosteriorDraws", "SamplerConfig",
    "run_chains", "stepwise_select", "summarize", "generate_synthetic", "reference_truth",
]
