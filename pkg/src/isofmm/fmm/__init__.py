"""Functional mixed model fit in the wavelet domain."""

from isofmm.fmm.design import DesignSpec, cell_means_design, incidence
from isofmm.fmm.draws import DrawsFile, PosteriorDraws, read_draws, write_draws
from isofmm.fmm.estimates import InitEstimates, gls, init_estimates
from isofmm.fmm.hyper import Hyperparams, estimate_shrinkage_hyperparams, fit_spike_slab_em, write_hyperparams
from isofmm.fmm.sampler import (
    SamplerConfig,
    SamplerState,
    gibbs_update_column,
    mh_update_variances,
    run_sampler,
)

__all__ = [
    "DesignSpec", "cell_means_design", "incidence",
    "DrawsFile", "PosteriorDraws", "read_draws", "write_draws",
    "InitEstimates", "gls", "init_estimates",
    "Hyperparams", "estimate_shrinkage_hyperparams", "fit_spike_slab_em", "write_hyperparams",
    "SamplerConfig", "SamplerState", "gibbs_update_column", "mh_update_variances", "run_sampler",
]
