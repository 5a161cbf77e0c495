"""Branching Brownian particles with kill-the-furthest selection.

Subpackages:

* ``core``        shared value types and empirical statistics
* ``kernels``     radial Brownian transition kernels w, g, G and operators
* ``obstacle``    certified sandwich solver, free boundary, stationary state
* ``sim``         event-driven particle simulation and couplings
* ``experiments`` desk-scale reproductions with machine-readable reports
* ``cli``         command-line orchestration and serialization
"""

from .core import (ParticleEnsemble, RadialProfile, SandwichPair, StationaryState,
                   empirical_cdf, in_gamma, max_radius, measure_of_set)
from .kernels import KernelContext, apply_Gt, bessel_density, cutoff, kernel_G, \
    linear_evolve, radial_cdf
from .obstacle import (SandwichSolver, SolveRequest, analytic_gap, check_contraction,
                       converge_to_V, free_boundary_radius, mass_movement_check,
                       solve_sandwich, stationary_state, step_minus, step_plus)
from .sim import (BbmForest, SimParams, advance_bbm, advance_nbbm, coupled_run,
                  killed_survival_density, replica_rng, spherically_ordered_pair,
                  spherically_ordered_pairs, survival_curve)

__version__ = "0.1.0"
