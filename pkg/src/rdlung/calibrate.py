"""Fit tissue and chest-wall parameters to quasi-static pressure-volume data."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tissue import TissueParams, elastic_pressure, solve_ratio
from .units import MBAR

MIN_FIT_POINTS = 8
KAPPA_GRID = np.array([0.5, 2.0, 5.0, 10.0, 20.0]) * MBAR
BETA_GRID = np.array([-6.0, -4.0, -2.5, -1.5, -0.5])
PV_HEADER = ["t_s", "p_tp_mbar", "p_pl_mbar", "v_m3"]


class CalibrationError(ValueError):
    pass


class FitFailure(CalibrationError):
    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)


@dataclass
class PvRecord:
    """Quasi-static maneuver samples. Pressures in Pa, volumes in m^3."""

    t: np.ndarray
    p_tp: np.ndarray
    p_pl: np.ndarray
    v: np.ndarray
    inspiratory: np.ndarray = None
    cutoff: float | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.p_tp = np.asarray(self.p_tp, dtype=float)
        self.p_pl = np.asarray(self.p_pl, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        n = len(self.t)
        if not (len(self.p_tp) == len(self.p_pl) == len(self.v) == n) or n == 0:
            raise CalibrationError("PV columns must have equal non-zero length")
        if not all(np.all(np.isfinite(a)) for a in (self.t, self.p_tp, self.p_pl, self.v)):
            raise CalibrationError("PV samples must be finite")
        if self.inspiratory is None:
            # rising limb: everything up to the largest volume
            self.inspiratory = np.arange(n) <= int(np.argmax(self.v))
        self.inspiratory = np.asarray(self.inspiratory, dtype=bool)

    def validate(self):
        v = self.v[self.inspiratory]
        if len(v) < 2 or np.any(np.diff(v) <= 0):
            raise CalibrationError("volume must increase strictly on the inspiratory segment")

    def fit_mask(self):
        cut = lower_inflection(self) if self.cutoff is None else self.cutoff
        return self.inspiratory & (self.p_tp >= cut)

    def scaled(self, volume_factor):
        return PvRecord(self.t, self.p_tp, self.p_pl, self.v * volume_factor,
                        self.inspiratory.copy(), self.cutoff)


def lower_inflection(pv: PvRecord, window=5):
    """Pressure at the first convex-to-concave change of the smoothed inspiratory curve.

    Returns the lowest inspiratory pressure when the curve never changes
    curvature (then nothing is excluded).
    """
    p = pv.p_tp[pv.inspiratory]
    v = pv.v[pv.inspiratory]
    if len(p) < window + 5:
        return float(p.min())
    kernel = np.ones(window) / window
    pad = window // 2
    vs = np.convolve(np.pad(v, pad, mode="edge"), kernel, mode="valid")
    d2 = np.gradient(np.gradient(vs, p), p)
    # edge padding flattens the ends and the two differences widen that band
    inner = np.arange(pad + 2, len(p) - pad - 2)
    d2 = d2[inner]
    change = np.flatnonzero((d2[:-1] > 0) & (d2[1:] <= 0))
    if len(change) == 0:
        return float(p.min())
    return float(p[inner[change[0] + 1]])


def read_pv_csv(path, cutoff_mbar=None):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PV_HEADER:
            raise CalibrationError(f"{path}: expected header '{','.join(PV_HEADER)}'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(x) for x in row[:4]])
            except ValueError:
                raise CalibrationError(f"{path}: line {lineno}: non-numeric value") from None
            if len(row) < 4:
                raise CalibrationError(f"{path}: line {lineno}: expected 4 columns")
    if not rows:
        raise CalibrationError(f"{path}: no samples")
    a = np.array(rows)
    cutoff = None if cutoff_mbar is None else cutoff_mbar * MBAR
    return PvRecord(a[:, 0], a[:, 1] * MBAR, a[:, 2] * MBAR, a[:, 3], cutoff=cutoff)


def write_pv_csv(pv: PvRecord, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PV_HEADER)
        for row in zip(pv.t, pv.p_tp / MBAR, pv.p_pl / MBAR, pv.v):
            w.writerow([repr(float(x)) for x in row])


def synthetic_pv(kappa=3.7 * MBAR, beta=-2.4, V0=2.0e-3, P_pl0=10.15 * MBAR,
                 P_pl_lin=9.35 * MBAR, p_low=2.0 * MBAR, p_high=35.0 * MBAR, n=20,
                 noise=0.0, seed=None, duration=30.0):
    """Inflation limb generated from the lumped elastic law.

    Samples are equally spaced in volume between the volumes at `p_low` and
    `p_high`. Pleural pressure is exactly affine in the true volume fraction;
    `noise` is a multiplicative Gaussian perturbation applied to the volumes
    afterwards.
    """
    params = TissueParams(kappa=kappa, beta=beta)
    v_lo, v_hi = V0 / solve_ratio(np.array([p_low, p_high]), params)
    v = np.linspace(v_lo, v_hi, n)
    p = elastic_pressure(v, V0, params)
    p[0], p[-1] = p_low, p_high
    v_frac = (v - v[0]) / (v[-1] - v[0])
    p_pl = P_pl0 + P_pl_lin * v_frac
    if noise:
        rng = np.random.default_rng(seed)
        v = v * (1.0 + noise * rng.standard_normal(n))
    return PvRecord(np.linspace(0.0, duration, n), p, p_pl, v, cutoff=p_low)


# ---------------------------------------------------------------------------
# tissue fit

def _model_volume(p, kappa, beta, V0):
    """Predicted volumes and their Jacobian in (kappa, beta, V0)."""
    params = TissueParams(kappa=kappa, beta=beta)
    r = solve_ratio(p, params)
    # implicit derivatives of f(r, kappa, beta) = P
    rb = r**beta
    f_r = kappa / beta * (1.0 - (1.0 + beta) * rb)
    f_k = r * (1.0 - rb) / beta
    f_b = -kappa / beta**2 * r * (1.0 - rb) - kappa / beta * r * rb * np.log(r)
    v = V0 / r
    dv_dr = -V0 / r**2
    J = np.column_stack([-dv_dr * f_k / f_r, -dv_dr * f_b / f_r, 1.0 / r])
    return v, J


@dataclass
class TissueFit:
    kappa: float
    beta: float
    V0: float
    residual_norm: float
    covariance: np.ndarray
    iterations: int
    start_index: int
    n_points: int
    converged: bool = True
    starts: list = field(default_factory=list, repr=False)

    @property
    def stderr(self):
        return np.sqrt(np.diag(self.covariance))


def _levenberg_marquardt(p, v, x0, fit_v0, V0_fixed, xtol=1e-8, max_iter=200):
    """Damped Gauss-Newton on volume residuals; x = (kappa, beta[, V0])."""
    scale = np.array([MBAR, 1.0, max(float(np.max(v)), 1e-30)])[: 3 if fit_v0 else 2]

    def unpack(x):
        return x[0], x[1], (x[2] if fit_v0 else V0_fixed)

    def evaluate(x):
        kappa, beta, V0 = unpack(x)
        if kappa <= 0 or beta == 0 or V0 <= 0:
            return None, None
        try:
            vm, J = _model_volume(p, kappa, beta, V0)
        except Exception:
            return None, None
        if not np.all(np.isfinite(J)) or not np.all(np.isfinite(vm)):
            return None, None
        J = J if fit_v0 else J[:, :2]
        return vm - v, J

    x = np.array(x0, dtype=float)
    r, J = evaluate(x)
    if r is None:
        return None
    cost = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Js = J * scale
        A = Js.T @ Js
        g = Js.T @ r
        accepted = False
        for _ in range(40):
            try:
                step = -np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-30), g) * scale
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = x + step
            if x_new[1] * x[1] <= 0:
                lam *= 10.0
                continue
            r_new, J_new = evaluate(x_new)
            if r_new is not None and float(r_new @ r_new) <= cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged = np.all(np.abs(step) <= xtol * np.maximum(np.abs(x), 1e-30))
            break
        rel = np.max(np.abs(step) / np.maximum(np.abs(x_new), 1e-30))
        x, r, J, cost = x_new, r_new, J_new, float(r_new @ r_new)
        lam = max(lam / 10.0, 1e-12)
        if rel < xtol:
            converged = True
            break
    return x, cost, J, it, converged


def fit_tissue(pv: PvRecord, V0=None, fit_v0=False, xtol=1e-8, max_iter=200) -> TissueFit:
    """Least-squares (kappa, beta) of the lumped elastic law on volume residuals.

    The model volume at each transpulmonary pressure comes from inverting the
    law. `V0` is the lumped stress-free volume; with ``fit_v0`` it becomes a
    third parameter (then `V0` is only the starting guess).
    """
    pv.validate()
    mask = pv.fit_mask()
    if mask.sum() < MIN_FIT_POINTS:
        raise CalibrationError(
            f"only {int(mask.sum())} samples above the cutoff; need {MIN_FIT_POINTS}"
        )
    if V0 is None and not fit_v0:
        raise CalibrationError("V0 is required unless it is fitted")
    p = pv.p_tp[mask]
    v = pv.v[mask]
    v0_guess = float(V0) if V0 is not None else float(v.min())

    results = []
    idx = 0
    for kappa0 in KAPPA_GRID:
        for beta0 in BETA_GRID:
            x0 = [kappa0, beta0] + ([v0_guess] if fit_v0 else [])
            out = _levenberg_marquardt(p, v, x0, fit_v0, v0_guess, xtol, max_iter)
            if out is not None:
                results.append((out[1], idx, out))
            idx += 1
    good = [r for r in results if r[2][4]]
    if not good:
        best = min(results, key=lambda r: (r[0], r[1])) if results else None
        raise FitFailure("no start converged", best=None if best is None else best[2][0])
    cost, start, (x, _, J, it, conv) = min(good, key=lambda r: (r[0], r[1]))
    n, k = len(p), len(x)
    dof = max(n - k, 1)
    s2 = cost / dof
    try:
        cov = s2 * np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError:
        cov = np.full((k, k), np.inf)
    return TissueFit(
        kappa=float(x[0]), beta=float(x[1]), V0=float(x[2]) if fit_v0 else v0_guess,
        residual_norm=cost, covariance=cov, iterations=it, start_index=start,
        n_points=n, converged=conv, starts=[(r[1], r[0]) for r in results],
    )


def residual_norm(pv: PvRecord, kappa, beta, V0):
    """Sum of squared volume residuals on the fitted samples."""
    mask = pv.fit_mask()
    v_model = V0 / solve_ratio(pv.p_tp[mask], TissueParams(kappa=kappa, beta=beta))
    return float(np.sum((v_model - pv.v[mask]) ** 2))


# ---------------------------------------------------------------------------
# chest wall

@dataclass
class ChestWallFit:
    P_pl0: float
    P_pl_lin: float
    r_squared: float
    V_PEEP: float
    V_max: float


def fit_chest_wall(pv: PvRecord) -> ChestWallFit:
    """OLS of pleural pressure on the inspiratory volume fraction."""
    sel = pv.inspiratory
    v = pv.v[sel]
    p_pl = pv.p_pl[sel]
    v_peep, v_max = float(v[0]), float(v[-1])
    if not abs(v_max - v_peep) > 1e-9 * max(abs(v_max), abs(v_peep), 1e-30):
        raise CalibrationError("degenerate volume range: V_max equals V_PEEP")
    v_frac = (v - v_peep) / (v_max - v_peep)
    X = np.column_stack([np.ones_like(v_frac), v_frac])
    coef, *_ = np.linalg.lstsq(X, p_pl, rcond=None)
    resid = p_pl - X @ coef
    ss_tot = float(np.sum((p_pl - p_pl.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return ChestWallFit(float(coef[0]), float(coef[1]), r2, v_peep, v_max)


def calibration_config(tissue: TissueFit, chest: ChestWallFit):
    """Fitted values as config-file entries."""
    return {
        "kappa_mbar": tissue.kappa / MBAR,
        "beta": tissue.beta,
        "p_pl0_mbar": chest.P_pl0 / MBAR,
        "p_pl_lin_mbar": chest.P_pl_lin / MBAR,
    }
