"""Posterior density, NUTS sampler, stopping rule and summaries."""

from .diagnostics import (BootstrapMSE, batch_means_cov, block_bootstrap_mse,
                          ess_threshold, hpd_interval, multi_ess)
from .nuts import (ChainState, DualAveraging, PosteriorDraws, SamplerConfig,
                   initialize, nuts_sample)
from .posterior import CDCMPosterior, grad_log_posterior, log_posterior
from .summary import PosteriorSummary, natural_transform, summarize

__all__ = [
    "BootstrapMSE", "batch_means_cov", "block_bootstrap_mse", "ess_threshold",
    "hpd_interval", "multi_ess", "ChainState", "DualAveraging", "PosteriorDraws",
    "SamplerConfig", "initialize", "nuts_sample", "CDCMPosterior",
    "grad_log_posterior", "log_posterior", "PosteriorSummary", "natural_transform",
    "summarize",
]
