"""Posterior dynamics of a continuously observed single-mode cavity.

Photon counting, heterodyne counting and diffusion-limit filters on a
truncated Fock space, with ensemble averaging checked against the master
equation.
"""

from .counting import CountingTrajectory, JumpRecord, apply_jump, jump_intensity, simulate_counting
from .diffusion import DiffusionTrajectory, epsilon_convergence, innovation_drift, simulate_diffusion
from .ensemble import EnsembleSpec, EnsembleStats, run_ensemble, validate_against_master
from .fockspace import DensityMatrix, PureState, coherent_state, expectation
from .heterodyne import HeterodyneTrajectory, het_apply_jump, het_intensity, simulate_heterodyne
from .master import coherent_amplitude, integrate_master
from .model import DriveField, LocalOscillator, SystemModel

__version__ = "0.1.0"

__all__ = [
    "CountingTrajectory", "DensityMatrix", "DiffusionTrajectory", "DriveField", "EnsembleSpec",
    "EnsembleStats", "HeterodyneTrajectory", "JumpRecord", "LocalOscillator", "PureState",
    "SystemModel", "apply_jump", "coherent_amplitude", "coherent_state", "epsilon_convergence",
    "expectation", "het_apply_jump", "het_intensity", "innovation_drift", "integrate_master",
    "jump_intensity", "run_ensemble", "simulate_counting", "simulate_diffusion",
    "simulate_heterodyne", "validate_against_master",
]
