"""Adaptive biasing force dynamics on a bi-channel state space.

Grid-based Fokker-Planck solver, particle simulation, entropy diagnostics and
spectral rate predictions for a reaction coordinate on the torus with two
channels that exchange mass outside a no-exchange region.
"""
from .grid import Grid
from .model import (
    BiChannelSystem,
    DoubleWellChannel,
    Exclusion,
    GaussianChannel,
    PotentialSpec,
    TabulatedChannel,
    build_system,
    estimate_constants,
    reference_free_energy,
    validate_h1,
)
from .fokker_planck import BiasProfile, DensityField, FokkerPlanckSolver, run_pde, solver_for, stationary_density
from .diagnostics import EntropyReport, entropy_report, fit_decay_rate
from .sde import SDEParams, run_sde, sample_density
from .spectral import build_operator, lsi_estimate, rate_prediction, spectral_gap

__version__ = "0.1.0"
