"""Unit conversions. Everything inside the package is SI (Pa, m, m^3, s)."""

MBAR = 100.0            # Pa
CMH2O = 98.0665         # Pa
DYN_PER_CM = 1.0e-3     # N/m
ML = 1.0e-6             # m^3
LITER = 1.0e-3          # m^3
CM = 1.0e-2             # m

# Airway closure offset between opening and closing pressure.
CLOSING_OFFSET = 4.0 * CMH2O


def mbar_to_pa(p):
    return p * MBAR


def pa_to_mbar(p):
    return p / MBAR


def cmh2o_to_pa(p):
    return p * CMH2O


def pa_to_cmh2o(p):
    return p / CMH2O
