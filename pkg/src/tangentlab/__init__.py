"""Infinite-width kernels, linearized training dynamics, and finite-width
verification experiments for fully-connected networks."""

__version__ = "0.1.0"

from .analytic_kernels import KernelMatrix, nngp_kernel, ntk_kernel
from .dataio import Dataset, interpolate_line, load_csv, synth_gaussian
from .dynamics import (
    DynamicsProblem,
    GPMoments,
    eta_critical,
    lin_mse_dynamics,
    nngp_posterior,
    ntk_gp_moments,
    readout_gp_moments,
)
from .empirical_kernels import convergence_sweep, mc_nngp, mc_ntk
from .integrators import momentum_lin_dynamics, rk45_integrate, xent_lin_dynamics
from .network import (
    Architecture,
    ParameterSet,
    empirical_ntk,
    empirical_ntk_direct,
    forward,
    init_params,
    jacobian,
)
from .trainer import (
    OptimizerConfig,
    Trajectory,
    compare_trajectories,
    drift_metrics,
    train_linearized,
    train_network,
)

__all__ = [
    "Architecture",
    "Dataset",
    "DynamicsProblem",
    "GPMoments",
    "KernelMatrix",
    "OptimizerConfig",
    "ParameterSet",
    "Trajectory",
    "compare_trajectories",
    "convergence_sweep",
    "drift_metrics",
    "empirical_ntk",
    "empirical_ntk_direct",
    "eta_critical",
    "forward",
    "init_params",
    "interpolate_line",
    "jacobian",
    "lin_mse_dynamics",
    "load_csv",
    "mc_nngp",
    "mc_ntk",
    "momentum_lin_dynamics",
    "nngp_kernel",
    "nngp_posterior",
    "ntk_gp_moments",
    "ntk_kernel",
    "readout_gp_moments",
    "rk45_integrate",
    "synth_gaussian",
    "train_linearized",
    "train_network",
    "xent_lin_dynamics",
]
