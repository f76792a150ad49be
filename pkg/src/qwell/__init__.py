"""Feedback stabilization of a particle in a box driven by a uniform field."""

from .errors import *  # noqa: F401,F403
from .feedback import (CalibratedConstants, FeedbackConfig, FixedSigma, ImplicitSigma,
                       ThetaSpec, WaveFunction, calibrate_cstar, choose_cutoff, feedback_v,
                       implicit_sigma, lyapunov, lyapunov_rate, mu_factor,
                       theory_safe_theta, validate_initial_condition)
from .propagator import (InitialState, SimulationConfig, TimeSeries, dist_to_circle,
                         resonance_prepump, simulate_closed_loop, split_step)
from .spectral import (FreeBasis, SigmaEigenSystem, build_free_basis, diagonalize_sigma,
                       dipole_element, dipole_matrix, eigen_derivatives, frequency_gap_check,
                       hs_sigma_norm, lambda2_coefficient, lambda2_galerkin, lambda2_series,
                       level_shifts)

__version__ = "0.1.0"
