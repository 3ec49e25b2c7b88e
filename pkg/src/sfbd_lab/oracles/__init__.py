from .gaussian import (
    GaussianMeasure,
    fit_gaussian,
    gaussian_denoiser,
    gaussian_m_step,
    gaussian_sfbd,
    kl_gaussian,
)
from .grid import (
    FlowTrajectory,
    GridMeasure,
    gaussian_mixture_grid,
    grid_convolve,
    grid_flow_integrate,
    grid_gamma_sfbd,
    grid_log_density,
    grid_m_step,
    grid_posterior_drift,
    grid_posterior_mean,
    histogram,
    mixture,
    mollify,
    point_mass,
    tv_distance,
)
from .metrics import (
    AffineDrift,
    cf_bound_check,
    char_fn,
    energy_distance,
    energy_distance_1d,
    frechet_gaussian,
    kl_divergence,
    path_kl_gaussian,
)

__all__ = [
    "GaussianMeasure",
    "fit_gaussian",
    "gaussian_denoiser",
    "gaussian_m_step",
    "gaussian_sfbd",
    "kl_gaussian",
    "FlowTrajectory",
    "GridMeasure",
    "gaussian_mixture_grid",
    "grid_convolve",
    "grid_flow_integrate",
    "grid_gamma_sfbd",
    "grid_log_density",
    "grid_m_step",
    "grid_posterior_drift",
    "grid_posterior_mean",
    "histogram",
    "mixture",
    "mollify",
    "point_mass",
    "tv_distance",
    "AffineDrift",
    "cf_bound_check",
    "char_fn",
    "energy_distance",
    "energy_distance_1d",
    "frechet_gaussian",
    "kl_divergence",
    "path_kl_gaussian",
]
