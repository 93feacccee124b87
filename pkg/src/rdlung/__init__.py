"""Reduced-dimensional lung mechanics with time-dependent airway recruitment."""
from .boundary import PleuralModel, Waveform
from .calibrate import PvRecord, fit_chest_wall, fit_tissue
from .rd import RdConfig, RdState
from .solver import (LungModel, ScenarioResult, SolverConfig, SystemState, build_model,
                     run_scenario, static_equilibrium, step)
from .tissue import TissueParams
from .tree import AirwayTree, TreeConfig, build_tree, mark_collapsible

__version__ = "0.1.0"
