"""Lumped 0D airway element: resistances, compliance, inertance, residuals.

All functions broadcast over numpy arrays so a whole tree can be handled in
one call. Quantities are SI throughout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Generation-dependent resistance prefactor; generations > 7 use the last value.
RESISTANCE_PREFACTOR = (0.162, 0.239, 0.244, 0.295, 0.175, 0.303, 0.356, 0.566, 0.327)

# Resistance that stands in for a closed airway, kg/(s m^4).
CLOSED_RESISTANCE = 1.0e16


@dataclass(frozen=True)
class AirProperties:
    rho: float = 1.18           # kg/m^3
    mu: float = 1.79e-5         # Pa s
    alpha: float = 1.1          # momentum-flux correction factor
    poisson: float = 0.45
    phase_shift: float = 0.13   # rad, wall viscoelastic phase lag
    wall_time: float = 2.0      # s, wall viscoelastic time constant


AIR = AirProperties()


@dataclass
class AirwayCoeffs:
    """Per-element lumped coefficients (arrays of equal length)."""

    R_mu: np.ndarray
    R_visc: np.ndarray
    R_conv: np.ndarray
    C: np.ndarray
    I: np.ndarray
    A_aw: np.ndarray
    A_aw0: np.ndarray


def resistance_prefactor(generation):
    g = np.asarray(generation)
    if np.any(g < 0):
        raise ValueError("airway generation must be >= 0")
    table = np.asarray(RESISTANCE_PREFACTOR)
    return table[np.minimum(g, len(table) - 1)]


def reynolds(q_out, area, rho=AIR.rho, mu=AIR.mu):
    area = np.asarray(area, dtype=float)
    if np.any(area <= 0) or mu <= 0:
        raise ValueError("area and viscosity must be positive")
    return 2.0 * rho * np.abs(q_out) / (mu * np.sqrt(np.pi * area))


def turbulence_threshold(length, area, delta):
    """Reynolds number above which the turbulent multiplier applies."""
    return length / (2.0 * delta**2) * np.sqrt(np.pi / area)


def resistance_mu(length, area, generation, q_out, air: AirProperties = AIR):
    """Nonlinear flow resistance with a Reynolds-number switch.

    Below the switching Reynolds number this is the Poiseuille-like
    8 pi mu l / A^2; above it the value is scaled by
    delta * sqrt(2 Re / l * sqrt(A / pi)), which equals 1 at the switch.
    """
    length = np.asarray(length, dtype=float)
    area = np.asarray(area, dtype=float)
    if np.any(length <= 0):
        raise ValueError("airway length must be positive")
    delta = resistance_prefactor(generation)
    re = reynolds(q_out, area, air.rho, air.mu)
    base = 8.0 * np.pi * air.mu * length / area**2
    turbulent = re >= turbulence_threshold(length, area, delta)
    factor = np.where(
        turbulent,
        delta * np.sqrt(2.0 * re / length * np.sqrt(area / np.pi)),
        1.0,
    )
    return base * factor


def wall_stiffness(wall_modulus, wall_thickness, area0, poisson=AIR.poisson):
    """eta_w = E h sqrt(pi) / ((1 - nu^2) A0), units Pa/m."""
    return wall_modulus * wall_thickness * np.sqrt(np.pi) / ((1.0 - poisson**2) * area0)


def capacitance(area, length, eta_w):
    return 2.0 * np.sqrt(area) * length / eta_w


def inertance(length, area0, rho=AIR.rho):
    return rho * length / area0


def resistance_visc(eta_w, area0, length, air: AirProperties = AIR):
    return (4.0 * np.pi * eta_w * air.wall_time * np.tan(air.phase_shift)
            / (np.sqrt(area0) * length))


def resistance_conv(q_in, q_out, area, air: AirProperties = AIR):
    """Signed convective term; may be negative."""
    return 2.0 * air.alpha * air.rho * (np.asarray(q_out) - np.asarray(q_in)) / np.asarray(area) ** 2


def distended_area(area0, eta_w, transmural, min_ratio=0.05, max_ratio=4.0):
    """Area from the tube law underlying the compliance, p = eta (sqrt A - sqrt A0).

    Clamped to [min_ratio, max_ratio] * A0.
    """
    root = np.sqrt(area0) + transmural / eta_w
    area = np.maximum(root, 0.0) ** 2
    return np.clip(area, min_ratio * area0, max_ratio * area0)


def compute_coeffs(tree, area, q_in, q_out, air: AirProperties = AIR) -> AirwayCoeffs:
    """Coefficients for every airway of `tree` at the given area and flows."""
    area0 = np.pi * tree.radius**2
    eta = wall_stiffness(tree.wall_modulus, tree.wall_thickness, area0, air.poisson)
    return AirwayCoeffs(
        R_mu=resistance_mu(tree.length, area, tree.generation, q_out, air),
        R_visc=resistance_visc(eta, area0, tree.length, air),
        R_conv=resistance_conv(q_in, q_out, area, air),
        C=capacitance(area, tree.length, eta),
        I=inertance(tree.length, area0, air.rho),
        A_aw=np.asarray(area, dtype=float),
        A_aw0=area0,
    )


def apply_closure(coeffs: AirwayCoeffs, open_mask) -> AirwayCoeffs:
    """Closed airways get the closure resistance and no wall storage."""
    open_mask = np.asarray(open_mask, dtype=bool)
    if open_mask.all():
        return coeffs
    closed = ~open_mask
    return AirwayCoeffs(
        R_mu=np.where(closed, CLOSED_RESISTANCE, coeffs.R_mu),
        R_visc=coeffs.R_visc,
        R_conv=coeffs.R_conv,
        C=np.where(closed, 0.0, coeffs.C),
        I=coeffs.I,
        A_aw=coeffs.A_aw,
        A_aw0=coeffs.A_aw0,
    )


def element_residuals(p_in, p_out, q_in, q_out, coeffs: AirwayCoeffs,
                      d_p_mean_minus_ext, d_q_diff, d_q_sum):
    """Mass and momentum residuals of one element (or an array of them).

    The three ``d_*`` arguments are time-derivative estimates of
    (P_in + P_out)/2 - P_ext, Q_out - Q_in and Q_in + Q_out.
    """
    c = coeffs
    r1 = c.C * d_p_mean_minus_ext + (q_out - q_in) + c.C * c.R_visc * d_q_diff
    r2 = 0.5 * c.I * d_q_sum + 0.5 * (c.R_mu + c.R_conv) * (q_in + q_out) + p_out - p_in
    return r1, r2
