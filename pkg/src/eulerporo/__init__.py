"""Eulerian poro-elastodynamics with inelastic strain, damage and water diffusion.

Modules
-------
tensor_core   packed symmetric tensors
field_ops     cell-centred grid, ghosts and difference operators
material      free energy, dissipation potentials, mobility
rothe         the implicit time step and its Picard loop
energy        discrete energy balance, integral-identity checks, norm monitors
scenario      configs, presets, the time loop and file output
"""
from .field_ops import Grid
from .material import (BiotDamageParams, DissipationParams, Material, MobilityParams,
                       Moduli)
from .rothe import Loads, NonConvergence, SolverSettings, State, initial_state, rothe_step
from .energy import EnergyReport, energy_report
from .scenario import ConfigError, ScenarioConfig, parse_config, run_scenario, verify_suite

__version__ = "0.1.0"

__all__ = [
    "Grid", "BiotDamageParams", "DissipationParams", "Material", "MobilityParams", "Moduli",
    "Loads", "NonConvergence", "SolverSettings", "State", "initial_state", "rothe_step",
    "EnergyReport", "energy_report", "ConfigError", "ScenarioConfig", "parse_config",
    "run_scenario", "verify_suite",
]
