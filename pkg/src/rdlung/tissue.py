"""Terminal units: Ogden-type volumetric elasticity with one Maxwell branch.

The elastic law relates transmural pressure to the volume ratio
r = V0 / V::

    P_alv - P_pl = (kappa / beta) * r * (1 - r**beta)

A Maxwell branch (spring ``visc_modulus`` in series with a dashpot of time
constant ``visc_tau``) acts in parallel on the volumetric strain V/V0 - 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .units import MBAR

HARMFUL_STRAIN = 1.5


class VolumeInitError(RuntimeError):
    def __init__(self, message, unit=None):
        self.unit = unit
        super().__init__(message if unit is None else f"unit {unit}: {message}")


@dataclass(frozen=True)
class TissueParams:
    kappa: float = 3.7 * MBAR   # Pa
    beta: float = -2.4
    visc_modulus: float = 2.0 * MBAR   # Pa per unit volumetric strain
    visc_tau: float = 2.0       # s

    def validate(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.beta == 0:
            raise ValueError("beta must be non-zero")
        if self.visc_modulus < 0 or not self.visc_tau > 0:
            raise ValueError("visc_modulus must be >= 0 and visc_tau > 0")


@dataclass
class TerminalUnits:
    """Struct of arrays, one entry per terminal unit (leaf airway order)."""

    V: np.ndarray
    V0: np.ndarray
    V_CT: np.ndarray
    V_tissue: np.ndarray
    height: np.ndarray
    trapped: np.ndarray
    visc_state: np.ndarray

    def copy(self):
        return TerminalUnits(*(np.array(getattr(self, f), copy=True) for f in _UNIT_FIELDS))


_UNIT_FIELDS = ("V", "V0", "V_CT", "V_tissue", "height", "trapped", "visc_state")


def _ratio_pressure(r, kappa, beta):
    return kappa / beta * r * (1.0 - r**beta)


def elastic_pressure(V, V0, params: TissueParams):
    V = np.asarray(V, dtype=float)
    V0 = np.asarray(V0, dtype=float)
    if np.any(V <= 0) or np.any(V0 <= 0):
        raise ValueError("volumes must be positive")
    return _ratio_pressure(V0 / V, params.kappa, params.beta)


def elastic_stiffness(V, V0, params: TissueParams):
    """dP/dV of the elastic law."""
    r = np.asarray(V0) / np.asarray(V)
    k, b = params.kappa, params.beta
    return -(k / b) * (1.0 - (1.0 + b) * r**b) * r / np.asarray(V)


def solve_ratio(pressure, params: TissueParams, tol=1e-13, max_iter=200):
    """Volume ratio r = V0/V at which the elastic law yields `pressure`.

    Newton iteration in log r with bisection safeguarding. Raises
    :class:`VolumeInitError` naming the first unit that fails.
    """
    p = np.atleast_1d(np.asarray(pressure, dtype=float))
    k, b = params.kappa, params.beta
    y = np.zeros_like(p)           # y = log r
    lo = np.full_like(p, -50.0)
    hi = np.full_like(p, 50.0)
    done = np.zeros(p.shape, dtype=bool)
    for _ in range(max_iter):
        r = np.exp(y)
        f = _ratio_pressure(r, k, b) - p
        # d/dy of (k/b)(r - r^(1+b))
        df = k / b * (r - (1.0 + b) * r ** (1.0 + b))
        # keep a bracket: f is monotone in y when df keeps its sign
        inc = np.sign(df) * f > 0
        hi = np.where(inc & ~done, y, hi)
        lo = np.where(~inc & ~done, y, lo)
        with np.errstate(divide="ignore", invalid="ignore"):
            y_new = y - f / df
        bad = ~np.isfinite(y_new) | (y_new <= lo) | (y_new >= hi)
        y_new = np.where(bad, 0.5 * (lo + hi), y_new)
        converged = np.abs(f) <= tol * np.maximum(np.abs(p), k)
        done |= converged
        y = np.where(done, y, y_new)
        if done.all():
            break
    if not done.all():
        raise VolumeInitError("elastic law inversion did not converge", unit=int(np.flatnonzero(~done)[0]))
    r = np.exp(y)
    return r if np.ndim(pressure) else r[0]


def volume_at_pressure(pressure, V0, params: TissueParams):
    """Volume with transmural `pressure` for reference volume `V0`."""
    return np.asarray(V0) / solve_ratio(pressure, params)


def reference_volume(pressure, V, params: TissueParams):
    """Stress-free volume V0 such that the elastic law gives `pressure` at `V`."""
    return solve_ratio(pressure, params) * np.asarray(V)


def maxwell_pressure(V, V0, visc_state, V_prev, params: TissueParams, dt, theta=1.0):
    """Maxwell branch pressure after a theta-step of length `dt`, and dP/dV.

    The dashpot strain is eliminated locally, so the branch adds a pressure
    that is affine in the end-of-step volume.
    """
    if params.visc_modulus == 0.0:
        z = np.zeros_like(np.asarray(V, dtype=float))
        return z, z
    k = dt / params.visc_tau
    eps = np.asarray(V) / V0 - 1.0
    eps_prev = np.asarray(V_prev) / V0 - 1.0
    scale = params.visc_modulus / (1.0 + theta * k)
    p = scale * (eps - visc_state - k * (1.0 - theta) * (eps_prev - visc_state))
    return p, scale / np.asarray(V0)


def advance_visc_state(V, V0, visc_state, V_prev, params: TissueParams, dt, theta=1.0):
    """Dashpot strain at the end of a theta-step ending at volume `V`."""
    if params.visc_modulus == 0.0:
        return np.array(visc_state, dtype=float, copy=True)
    k = dt / params.visc_tau
    eps = np.asarray(V) / V0 - 1.0
    eps_prev = np.asarray(V_prev) / V0 - 1.0
    return (visc_state + k * (theta * eps + (1.0 - theta) * (eps_prev - visc_state))) / (1.0 + theta * k)


def unit_residual(units: TerminalUnits, P_alv, P_pl, params: TissueParams, dt, V_prev=None, theta=1.0):
    """Constitutive residual (P_alv - P_pl) - elastic - Maxwell for each unit."""
    V_prev = units.V if V_prev is None else V_prev
    p_m, _ = maxwell_pressure(units.V, units.V0, units.visc_state, V_prev, params, dt, theta)
    return np.asarray(P_alv) - np.asarray(P_pl) - elastic_pressure(units.V, units.V0, params) - p_m


def unit_strain(V, V_ref):
    return np.asarray(V, dtype=float) / np.asarray(V_ref, dtype=float)


def hu_to_air_fraction(hu):
    """Air fraction of a voxel mix of air (-1000 HU) and tissue (0 HU)."""
    return np.clip(-np.asarray(hu, dtype=float) / 1000.0, 0.0, 1.0)


def split_by_lobe(tree, total):
    """Split a lung-level volume across lobes in proportion to supplied area."""
    lobes = tree.unit_lobe
    area = tree.supplied_area[tree.leaves]
    out = {}
    for lb in np.unique(lobes):
        out[int(lb)] = total * area[lobes == lb].sum() / area.sum()
    return out


def synthetic_unit_density(tree, ventral_hu=-850.0, dorsal_hu=-450.0, collapsed_hu=-150.0):
    """Ventral-to-dorsal density gradient standing in for CT data.

    Units supplied by collapsible airways are assigned `collapsed_hu`.
    """
    z = tree.unit_height
    extent = max(float(tree.height.max()), 1e-12)
    hu = ventral_hu + (dorsal_hu - ventral_hu) * np.clip(z / extent, 0.0, 1.0)
    collapsible_units = tree.collapsible[tree.leaves]
    return np.where(collapsible_units, collapsed_hu, hu)


def initialize_volumes(tree, lobe_air, lobe_tissue, unit_hu, transmural_ct, params: TissueParams, trapped):
    """Per-unit (V_CT, V_tissue, V0) from lobar volumes and unit densities.

    Lobar tissue volume is shared in proportion to the supplied airway area.
    Lobar air volume is shared so that each unit's air-to-tissue ratio follows
    its density, then rescaled to conserve the lobar total. Open units get V0
    from inverting the elastic law at their CT-load transmural pressure;
    trapped units are taken as stress free (V0 = V_CT).
    """
    lobes = tree.unit_lobe
    area = tree.supplied_area[tree.leaves]
    unit_hu = np.asarray(unit_hu, dtype=float)
    if unit_hu.shape != lobes.shape:
        raise ValueError("need one density value per terminal unit")
    if np.any(unit_hu < -1000.0) or np.any(unit_hu > 100.0):
        raise ValueError("density outside [-1000, 100] HU is non-physical")
    trapped = np.asarray(trapped, dtype=bool)

    tissue = np.zeros(len(lobes))
    air = np.zeros(len(lobes))
    f = np.minimum(hu_to_air_fraction(unit_hu), 1.0 - 1e-6)
    for lb in np.unique(lobes):
        sel = lobes == lb
        try:
            v_tis = lobe_tissue[int(lb)]
            v_air = lobe_air[int(lb)]
        except KeyError:
            raise ValueError(f"missing lobar volume for lobe {int(lb)}") from None
        tissue[sel] = v_tis * area[sel] / area[sel].sum()
        weight = tissue[sel] * f[sel] / (1.0 - f[sel])
        if weight.sum() <= 0:
            weight = area[sel]
        air[sel] = v_air * weight / weight.sum()
    v_ct = air + tissue
    if np.any(v_ct <= 0):
        raise ValueError("unit volumes must be positive; check lobar volumes")
    v0 = np.array(v_ct, copy=True)
    open_units = ~trapped
    if open_units.any():
        p_ct = np.broadcast_to(np.asarray(transmural_ct, dtype=float), v_ct.shape)[open_units]
        try:
            v0[open_units] = reference_volume(p_ct, v_ct[open_units], params)
        except VolumeInitError as exc:
            unit = int(np.flatnonzero(open_units)[exc.unit])
            raise VolumeInitError("elastic law inversion did not converge", unit=unit) from None
    return v_ct, tissue, v0
