"""Pleural pressure boundary condition and airway-opening pressure waveforms."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .units import CM, CMH2O, MBAR


@dataclass(frozen=True)
class PleuralModel:
    """Chest-wall recoil (affine in total volume) plus lung-weight gradient.

    Pressures in Pa, volumes in m^3, heights in m. ``grav_a`` and
    ``grav_b`` keep their customary units cmH2O/cm and cmH2O/cm^2.
    """

    V_PEEP: float
    V_max: float
    P_pl0: float = 10.15 * MBAR
    P_pl_lin: float = 9.35 * MBAR
    h_balloon: float = 0.09
    grav_a: float = 0.541
    grav_b: float = 0.015

    def __post_init__(self):
        if not self.V_max > self.V_PEEP:
            raise ValueError("V_max must exceed V_PEEP")
        vals = (self.P_pl0, self.P_pl_lin, self.h_balloon, self.grav_a, self.grav_b)
        if not all(np.isfinite(vals)):
            raise ValueError("pleural model coefficients must be finite")

    @property
    def volume_slope(self):
        """d P_pl / d V_total in Pa/m^3."""
        return self.P_pl_lin / (self.V_max - self.V_PEEP)

    def volume_pressure(self, V_total):
        v_frac = (np.asarray(V_total) - self.V_PEEP) / (self.V_max - self.V_PEEP)
        return self.P_pl0 + self.P_pl_lin * v_frac

    def weight_pressure(self, z):
        z_cm = np.asarray(z, dtype=float) / CM
        h_cm = self.h_balloon / CM
        p_cmh2o = self.grav_a * (z_cm - h_cm) + self.grav_b * (z_cm**2 - h_cm**2)
        return p_cmh2o * CMH2O


def pleural_pressure(V_total, z, model: PleuralModel):
    return model.volume_pressure(V_total) + model.weight_pressure(z)


class WaveformError(ValueError):
    pass


class Waveform:
    """Piecewise-linear airway-opening pressure P_ao(t) in Pa."""

    def __init__(self, t, p):
        t = np.asarray(t, dtype=float)
        p = np.asarray(p, dtype=float)
        if t.ndim != 1 or t.shape != p.shape or len(t) == 0:
            raise WaveformError("waveform needs matching 1-D time and pressure samples")
        if np.any(np.diff(t) < 0):
            raise WaveformError("waveform times must be non-decreasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(p))):
            raise WaveformError("waveform samples must be finite")
        self.t = t
        self.p = p

    @property
    def start(self):
        return float(self.t[0])

    @property
    def end(self):
        return float(self.t[-1])

    @property
    def duration(self):
        return self.end - self.start

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        slack = 1e-9 * max(1.0, abs(self.end))
        if np.any(t_arr < self.start - slack) or np.any(t_arr > self.end + slack):
            raise WaveformError(
                f"t outside waveform domain [{self.start}, {self.end}]"
            )
        out = np.interp(t_arr, self.t, self.p)
        return float(out) if np.ndim(t) == 0 else out

    def then(self, other: "Waveform") -> "Waveform":
        """Concatenate `other` after this waveform (its time origin shifted)."""
        shift = self.end - other.start
        return Waveform(np.concatenate([self.t, other.t + shift]),
                        np.concatenate([self.p, other.p]))

    def shifted(self, t0):
        return Waveform(self.t - self.start + t0, self.p)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_s", "p_ao_mbar"])
            for t, p in zip(self.t, self.p):
                w.writerow([repr(float(t)), repr(float(p / MBAR))])

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["t_s", "p_ao_mbar"]:
                raise WaveformError(f"{path}: expected header 't_s,p_ao_mbar'")
            t, p = [], []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    t.append(float(row[0]))
                    p.append(float(row[1]) * MBAR)
                except (ValueError, IndexError):
                    raise WaveformError(f"{path}: line {lineno}: bad sample {row!r}") from None
        return cls(t, p)


def airway_opening_pressure(t, waveform: Waveform):
    return waveform(t)


def constant(pressure, duration):
    return Waveform([0.0, duration], [pressure, pressure])


def ventilation(peep=10.0 * MBAR, driving_pressure=22.0 * MBAR, rate=20.0,
                ie_ratio=0.5, breaths=10, rise_time=0.1):
    """Pressure-controlled breaths: linear rise and fall of `rise_time` s.

    `rate` is in breaths/min, `ie_ratio` is inspiratory/expiratory time.
    """
    if rate <= 0 or ie_ratio <= 0 or breaths < 1:
        raise WaveformError("rate, ie_ratio and breaths must be positive")
    period = 60.0 / rate
    t_insp = period * ie_ratio / (1.0 + ie_ratio)
    rise = min(rise_time, 0.25 * t_insp)
    peak = peep + driving_pressure
    t, p = [], []
    for k in range(breaths):
        t0 = k * period
        t += [t0, t0 + rise, t0 + t_insp, t0 + t_insp + rise]
        p += [peep, peak, peak, peep]
    t.append(breaths * period)
    p.append(peep)
    return Waveform(t, p)


def halved_driving_pressure(peep=13.0 * MBAR, driving_pressure=22.0 * MBAR, **kw):
    return ventilation(peep=peep, driving_pressure=0.5 * driving_pressure, **kw)


def quasi_static(start=10.0 * MBAR, peak=40.0 * MBAR, ramp_time=30.0, release_time=1.0, settle=2.0):
    """Slow linear inflation from `start` to `peak`, then release to `start`."""
    return Waveform(
        [0.0, settle, settle + ramp_time, settle + ramp_time + release_time,
         2 * settle + ramp_time + release_time],
        [start, start, peak, start, start],
    )


def triangle(low=0.0, high=40.0 * MBAR, duration=120.0):
    return Waveform([0.0, 0.5 * duration, duration], [low, high, low])


def sustained_inflation(peep_before=16.0 * MBAR, hold_pressure=40.0 * MBAR, hold_time=32.0,
                        peep_after=19.0 * MBAR, driving_pressure=0.0, rate=20.0,
                        ie_ratio=0.5, breaths_before=0, breaths_after=0,
                        settle=1.0, rise_time=0.5):
    """PEEP level, ramp to a long hold, then (optional) ventilation at a higher PEEP."""
    if breaths_before:
        wf = ventilation(peep_before, driving_pressure, rate, ie_ratio, breaths_before)
        wf = wf.then(constant(peep_before, settle))
    else:
        wf = constant(peep_before, settle)
    wf = wf.then(Waveform([0.0, rise_time, rise_time + hold_time, 2 * rise_time + hold_time],
                          [peep_before, hold_pressure, hold_pressure, peep_after]))
    if breaths_after:
        wf = wf.then(ventilation(peep_after, driving_pressure, rate, ie_ratio, breaths_after))
    else:
        wf = wf.then(constant(peep_after, settle))
    return wf


def protocol(driving_pressure=16.0 * MBAR, rate=20.0, ie_ratio=0.5, breaths=10):
    """Chain of the three validation maneuvers with plain ventilation between them.

    1. ventilation at PEEP 16 with two quasi-static inflations of different peaks,
    2. ventilation at PEEP 13 with halved driving pressure,
    3. sustained inflation from PEEP 16 (40 mbar, 32 s) followed by PEEP 19.
    """
    mb = MBAR
    vent = lambda peep, dp: ventilation(peep, dp, rate, ie_ratio, breaths)
    wf = vent(16 * mb, driving_pressure)
    wf = wf.then(quasi_static(16 * mb, 35 * mb, ramp_time=20.0))
    wf = wf.then(vent(16 * mb, driving_pressure))
    wf = wf.then(quasi_static(16 * mb, 45 * mb, ramp_time=25.0))
    wf = wf.then(vent(16 * mb, driving_pressure))
    wf = wf.then(vent(13 * mb, driving_pressure))
    wf = wf.then(vent(13 * mb, 0.5 * driving_pressure))
    wf = wf.then(vent(13 * mb, driving_pressure))
    wf = wf.then(vent(16 * mb, driving_pressure))
    wf = wf.then(sustained_inflation(16 * mb, 40 * mb, 32.0, 19 * mb, driving_pressure,
                                     rate, ie_ratio, breaths_after=breaths))
    return wf


GENERATORS = {
    "constant": constant,
    "ventilation": ventilation,
    "halved-driving-pressure": halved_driving_pressure,
    "quasi-static": quasi_static,
    "triangle": triangle,
    "sustained-inflation": sustained_inflation,
    "protocol": protocol,
}

# Generator keyword arguments that carry pressures (given in mbar at the CLI).
PRESSURE_KWARGS = {
    "pressure", "peep", "driving_pressure", "start", "peak", "low", "high",
    "peep_before", "peep_after", "hold_pressure",
}
