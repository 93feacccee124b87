"""Time-dependent recruitment/derecruitment of collapsible airways.

Each collapsible airway carries a virtual trajectory variable x in [0, 1].
Above its opening pressure x moves toward 1, below its closing pressure it
moves toward 0; reaching the far end flips the airway state.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .units import CLOSING_OFFSET, CMH2O, DYN_PER_CM, MBAR

# Laplace-type prefactor relating surface tension and radius to opening pressure.
OPENING_PREFACTOR = 8.3


@dataclass(frozen=True)
class RdConfig:
    gamma: float = 100.0                  # dyn/cm
    S_o: float = 0.04                     # 1/(cmH2O s)
    S_c: float = 0.004                    # 1/(cmH2O s)
    seed: int = 0
    initial_closed_threshold: float = 24.0 * MBAR   # Pa

    def validate(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not (self.S_o > 0 and self.S_c > 0):
            raise ValueError("S_o and S_c must be positive")


@dataclass
class RdState:
    """Struct of arrays over the collapsible airways.

    Pressures in Pa, velocity constants in 1/(Pa s).
    """

    airway: np.ndarray
    x: np.ndarray
    open: np.ndarray
    P_o: np.ndarray
    P_c: np.ndarray
    s_o: np.ndarray
    s_c: np.ndarray

    def copy(self):
        return RdState(*(np.array(getattr(self, f), copy=True) for f in _RD_FIELDS))

    def __len__(self):
        return len(self.airway)


_RD_FIELDS = ("airway", "x", "open", "P_o", "P_c", "s_o", "s_c")


def opening_pressure(gamma, r_aw):
    """Critical opening pressure in Pa from surface tension (dyn/cm) and radius (m)."""
    r_aw = np.asarray(r_aw, dtype=float)
    if np.any(r_aw <= 0):
        raise ValueError("airway radius must be positive")
    if np.any(np.asarray(gamma) <= 0):
        raise ValueError("surface tension must be positive")
    return OPENING_PREFACTOR * (np.asarray(gamma) * DYN_PER_CM) / r_aw


def closing_pressure(p_open):
    return np.asarray(p_open) - CLOSING_OFFSET


def velocity_constants_from_uniform(u, S_o=0.04, S_c=0.004):
    """Map uniform draws u in (0, 1] to (s_o, s_c) in 1/(cmH2O s)."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0) or np.any(u > 1):
        raise ValueError("uniform draws must lie in (0, 1]")
    if not np.isclose(S_o, 10.0 * S_c, rtol=1e-12, atol=0.0):
        raise ValueError("opening and closing constants must satisfy S_o = 10 S_c")
    s_o = S_o / u
    return s_o, s_o / 10.0


def sample_velocity_constants(S_o, S_c, rng, size=None):
    """Quasi-hyperbolic draws s_o = S_o / u with u ~ unif(0, 1], s_c = s_o / 10."""
    u = 1.0 - rng.random(size)
    return velocity_constants_from_uniform(u, S_o, S_c)


def initialize_states(tree, config: RdConfig) -> RdState:
    """R/D states for the collapsible airways of `tree`.

    Airways whose opening pressure exceeds the initial threshold start
    closed (x = 0), the others open (x = 1). The uniform draw for an airway
    is taken at index `airway id` of one seeded stream, so the result does
    not depend on which subset of airways is collapsible.
    """
    config.validate()
    ids = np.flatnonzero(tree.collapsible)
    u = 1.0 - np.random.default_rng(config.seed).random(tree.n_airways)
    s_o, s_c = velocity_constants_from_uniform(u[ids], config.S_o, config.S_c)
    p_o = opening_pressure(config.gamma, tree.radius[ids])
    closed = p_o > config.initial_closed_threshold
    return RdState(
        airway=ids,
        x=np.where(closed, 0.0, 1.0),
        open=~closed,
        P_o=p_o,
        P_c=closing_pressure(p_o),
        s_o=s_o / CMH2O,
        s_c=s_c / CMH2O,
    )


def trajectory_rate(state: RdState, p_in):
    p_in = np.asarray(p_in, dtype=float)
    return np.where(
        p_in > state.P_o,
        state.s_o * (p_in - state.P_o),
        np.where(p_in < state.P_c, state.s_c * (p_in - state.P_c), 0.0),
    )


def step_trajectory(state: RdState, p_in, dt):
    """Advance x explicitly by `dt` at inlet pressure `p_in` (Pa).

    Returns ``(new_state, opened, closed)`` where the last two are boolean
    masks of airways that switched during this step.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.clip(state.x + dt * trajectory_rate(state, p_in), 0.0, 1.0)
    opened = ~state.open & (x >= 1.0)
    closed = state.open & (x <= 0.0)
    new_open = (state.open | opened) & ~closed
    return replace(state, x=x, open=new_open), opened, closed


def open_mask(tree, state: RdState) -> np.ndarray:
    """Per-airway open flag; non-collapsible airways are always open."""
    mask = np.ones(tree.n_airways, dtype=bool)
    mask[state.airway] = state.open
    return mask
