"""Coupled network time stepping: airways, junctions, terminal units, pleura.

Unknowns per step are the distal node pressure and the in/out flows of every
airway, the volume of every terminal unit and the total unit volume Vt.
Airway coefficients and the open/closed topology are frozen during a step;
the only nonlinearity inside a step is the tissue law, handled by Newton
iterations whose linear systems are solved by tree-ordered elimination.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.sparse.linalg import splu

from . import airway as aw
from . import rd as rdm
from . import tissue as ts
from ._kernels import eliminate
from .boundary import PleuralModel, Waveform
from .tree import AirwayTree, trapped_units
from .units import MBAR

log = logging.getLogger(__name__)

# Flow floor for the relative junction balance, m^3/s.
JUNCTION_FLOW_FLOOR = 1e-12
# Floor of the inspiration onset threshold on airway-opening flow, m^3/s.
BREATH_FLOW_THRESHOLD = 1e-6


class SolverError(RuntimeError):
    pass


class NewtonFailure(SolverError):
    pass


class SingularSystemError(SolverError):
    def __init__(self, message, node=None):
        self.node = node
        super().__init__(message if node is None else f"airway node {node}: {message}")


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1e-3
    newton_tol: float = 1e-8
    newton_max_iter: int = 30
    theta: float = 1.0
    max_halvings: int = 6
    # False keeps units behind a closed airway connected through the closure resistance
    seal_closed: bool = True

    def validate(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0.5 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0.5, 1]")
        if self.newton_max_iter < 1 or not self.newton_tol > 0:
            raise ValueError("newton_max_iter >= 1 and newton_tol > 0 required")


@dataclass
class LungModel:
    """Static model data shared by every step."""

    tree: AirwayTree
    tissue: ts.TissueParams
    pleural: PleuralModel
    V0: np.ndarray
    V_CT: np.ndarray
    V_tissue: np.ndarray
    initially_trapped: np.ndarray
    rd_config: rdm.RdConfig | None = None
    air: aw.AirProperties = aw.AIR
    weight_pressure: np.ndarray = field(init=False)
    eta_w: np.ndarray = field(init=False)
    n_collapsible: int = field(init=False)

    def __post_init__(self):
        self.weight_pressure = self.pleural.weight_pressure(self.tree.unit_height)
        area0 = np.pi * self.tree.radius**2
        self.eta_w = aw.wall_stiffness(self.tree.wall_modulus, self.tree.wall_thickness,
                                       area0, self.air.poisson)
        self.n_collapsible = int(self.tree.collapsible.sum())

    def unit_pressure(self, V, Vt, visc_state, V_prev, dt, theta):
        """Alveolar pressure of every unit and its derivative in V."""
        p_pl = self.pleural.volume_pressure(Vt) + self.weight_pressure
        p_el = ts.elastic_pressure(V, self.V0, self.tissue)
        g_el = ts.elastic_stiffness(V, self.V0, self.tissue)
        p_m, g_m = ts.maxwell_pressure(V, self.V0, visc_state, V_prev, self.tissue, dt, theta)
        return p_pl + p_el + p_m, g_el + g_m

    def alveolar_pressure(self, V, Vt, visc_state):
        """Alveolar pressure at a step end, with the dashpot strain already updated."""
        p = self.pleural.volume_pressure(Vt) + self.weight_pressure
        p = p + ts.elastic_pressure(V, self.V0, self.tissue)
        return p + self.tissue.visc_modulus * (V / self.V0 - 1.0 - visc_state)


@dataclass
class SystemState:
    t: float
    p: np.ndarray           # distal node pressure per airway, Pa
    q_in: np.ndarray        # m^3/s
    q_out: np.ndarray
    V: np.ndarray           # unit volumes, m^3
    visc_state: np.ndarray  # dashpot strain per unit
    rd: rdm.RdState
    area: np.ndarray        # current airway cross-section, m^2
    p_ext: np.ndarray       # external pressure per airway at t, Pa
    p_ao: float
    v_airway: float = 0.0   # cumulative wall storage since t0, m^3

    def copy(self):
        return SystemState(
            self.t, self.p.copy(), self.q_in.copy(), self.q_out.copy(), self.V.copy(),
            self.visc_state.copy(), self.rd.copy(), self.area.copy(), self.p_ext.copy(),
            self.p_ao, self.v_airway,
        )

    @property
    def V_total(self):
        return float(self.V.sum())


def inlet_pressure(tree, p, p_ao):
    """Upstream node pressure of every airway."""
    return np.where(tree.parent < 0, p_ao, p[tree.parent.clip(0)])


def open_airways(model: LungModel, rd_state):
    return open_airways_tree(model.tree, rd_state)


def _empty_rd():
    e = np.zeros(0)
    return rdm.RdState(np.zeros(0, dtype=np.int64), e, np.zeros(0, dtype=bool), e, e, e, e)


def static_equilibrium(model: LungModel, p_ao: float, rd_state=None, t0=0.0) -> SystemState:
    """Zero-flow state with every connected unit in balance with `p_ao`.

    Units cut off by a closed airway keep V = V_CT.
    """
    tree = model.tree
    rd_state = _empty_rd() if rd_state is None else rd_state
    is_open = open_airways(model, rd_state)
    sealed = trapped_units(tree, ~is_open)
    pl = model.pleural

    def volumes(vt):
        V = model.V_CT.copy()
        free = ~sealed
        if free.any():
            transmural = p_ao - pl.volume_pressure(vt) - model.weight_pressure[free]
            V[free] = ts.volume_at_pressure(transmural, model.V0[free], model.tissue)
        return V

    def gap(vt):
        return volumes(vt).sum() - vt

    lo = hi = max(model.V_CT.sum(), 1e-12)
    while gap(lo) < 0:
        lo *= 0.5
    while gap(hi) > 0:
        hi *= 2.0
    vt = brentq(gap, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=500)
    V = volumes(vt)
    Vt = V.sum()
    n = tree.n_airways
    p = np.full(n, float(p_ao))
    visc = V / model.V0 - 1.0
    pa, _ = model.unit_pressure(V, Vt, visc, V, 1.0, 1.0)
    p_ext = pa[tree.axis_unit]
    area = aw.distended_area(np.pi * tree.radius**2, model.eta_w, p - p_ext)
    return SystemState(
        t=t0, p=p, q_in=np.zeros(n), q_out=np.zeros(n), V=V, visc_state=visc,
        rd=rd_state, area=area, p_ext=p_ext, p_ao=float(p_ao),
    )


def step_coefficients(model: LungModel, state: SystemState, is_open):
    """Airway coefficients frozen for the next step, from the previous state."""
    tree = model.tree
    p_up = inlet_pressure(tree, state.p, state.p_ao)
    area0 = np.pi * tree.radius**2
    area = aw.distended_area(area0, model.eta_w, 0.5 * (p_up + state.p) - state.p_ext)
    coeffs = aw.compute_coeffs(tree, area, state.q_in, state.q_out, model.air)
    return aw.apply_closure(coeffs, is_open), area


@dataclass
class StepInfo:
    iterations: int
    junction_residual: float


def _solve_newton(model, state, coeffs, sealed, p_ao_new, dt, cfg: SolverConfig):
    tree = model.tree
    theta = cfg.theta
    p_up_old = inlet_pressure(tree, state.p, state.p_ao)
    R = coeffs.R_mu + coeffs.R_conv
    # predictor: previous leaf outflow carried over the step
    v_star = state.V + dt * np.where(sealed, 0.0, state.q_out[tree.leaves])
    if np.any(v_star <= 0):
        v_star = state.V.copy()
    vt_star = float(v_star.sum())
    n, m_units = tree.n_airways, tree.n_units
    p = np.empty(n); qi = np.empty(n); qo = np.empty(n); v_new = np.empty(m_units)
    h = model.pleural.volume_slope
    scale = max(abs(p_ao_new), float(np.abs(state.p).max()), 10.0 * MBAR)
    open_units = ~sealed

    for it in range(1, cfg.newton_max_iter + 1):
        pa, g = model.unit_pressure(v_star, vt_star, state.visc_state, state.V, dt, theta)
        vt, status = eliminate(
            tree.order, tree.parent, tree.children[:, 0], tree.children[:, 1],
            tree.unit_of, tree.axis_unit,
            coeffs.C, coeffs.R_visc, R, coeffs.I,
            state.p, p_up_old, state.q_in, state.q_out, state.p_ext,
            pa, g, v_star, state.V, sealed, h, vt_star,
            theta, dt, p_ao_new,
            p, qi, qo, v_new,
        )
        if status >= 0:
            raise SingularSystemError("singular local block in tree elimination", node=int(status))
        if not (np.all(np.isfinite(v_new)) and np.isfinite(vt)):
            raise NewtonFailure("non-finite iterate")
        if np.any(v_new <= 0):
            # damp towards the previous iterate to keep volumes positive
            step = v_new - v_star
            lam = 1.0
            while np.any(v_star + lam * step <= 0) and lam > 1e-6:
                lam *= 0.5
            v_new = v_star + lam * step
            vt = float(v_new.sum())
        pa_new, _ = model.unit_pressure(v_new, vt, state.visc_state, state.V, dt, theta)
        leaf_p = p[tree.leaves]
        resid = np.abs(leaf_p - pa_new)[open_units].max() if open_units.any() else 0.0
        v_star, vt_star = v_new, vt
        if resid <= cfg.newton_tol * scale:
            return p, qi, qo, v_new, vt, it
    raise NewtonFailure(f"Newton did not converge in {cfg.newton_max_iter} iterations "
                        f"(residual {resid:.3e} Pa)")


def _sealed(tree, is_open, cfg):
    if cfg.seal_closed:
        return trapped_units(tree, ~is_open)
    return np.zeros(tree.n_units, dtype=bool)


def junction_residual(tree, q_in, q_out):
    """Largest relative flow imbalance over all branching nodes."""
    inner = ~tree.is_leaf
    if not inner.any():
        return 0.0
    c = tree.children[inner]
    incoming = q_out[inner]
    outgoing = q_in[c[:, 0]] + q_in[c[:, 1]]
    denom = np.maximum(np.maximum(np.abs(incoming), np.abs(outgoing)), JUNCTION_FLOW_FLOOR)
    return float((np.abs(incoming - outgoing) / denom).max())


def advance(model: LungModel, state: SystemState, p_ao_new: float, dt: float,
            cfg: SolverConfig, track_conservation=True):
    """One fixed step of length `dt`; returns (new_state, StepInfo).

    1. coefficients from the previous state, 2. R/D flags, 3. Newton solve,
    4. R/D trajectories at the new inlet pressures.
    """
    tree = model.tree
    is_open = open_airways(model, state.rd)
    sealed = _sealed(tree, is_open, cfg)
    coeffs, area = step_coefficients(model, state, is_open)
    p, qi, qo, V, vt, iters = _solve_newton(model, state, coeffs, sealed, p_ao_new, dt, cfg)

    theta = cfg.theta
    visc = ts.advance_visc_state(V, model.V0, state.visc_state, state.V, model.tissue, dt, theta)
    p_ext = model.alveolar_pressure(V, vt, visc)[tree.axis_unit]

    storage = dt * float(np.sum(theta * (qi - qo) + (1.0 - theta) * (state.q_in - state.q_out)))
    rd_state = state.rd
    if len(rd_state):
        p_up = inlet_pressure(tree, p, p_ao_new)
        rd_state, _, _ = rdm.step_trajectory(rd_state, p_up[rd_state.airway], dt)
    new = SystemState(
        t=state.t + dt, p=p, q_in=qi, q_out=qo, V=V, visc_state=visc, rd=rd_state,
        area=area, p_ext=p_ext, p_ao=float(p_ao_new), v_airway=state.v_airway + storage,
    )
    jr = junction_residual(tree, qi, qo) if track_conservation else 0.0
    return new, StepInfo(iters, jr)


def step(model: LungModel, state: SystemState, waveform: Waveform, cfg: SolverConfig,
         track_conservation=True):
    """Advance by cfg.dt, halving the step on Newton failure down to dt/2^max_halvings."""

    def attempt(st, dt, depth):
        try:
            return [advance(model, st, waveform(st.t + dt), dt, cfg, track_conservation)]
        except NewtonFailure:
            if depth >= cfg.max_halvings:
                raise
            log.debug("step rejected at t=%.6f, dt=%.3e; halving", st.t, dt)
            first = attempt(st, 0.5 * dt, depth + 1)
            second = attempt(first[-1][0], 0.5 * dt, depth + 1)
            return first + second

    results = attempt(state, cfg.dt, 0)
    new_state = results[-1][0]
    info = StepInfo(sum(r[1].iterations for r in results),
                    max(r[1].junction_residual for r in results))
    return new_state, info


# ---------------------------------------------------------------------------
# Sparse assembly of the same discrete system (independent route used for
# verification and singularity diagnosis).

def assemble(model: LungModel, state: SystemState, x, coeffs, sealed, p_ao_new, dt, theta=1.0):
    """Residual and sparse Jacobian of the step system at unknowns `x`.

    Layout of `x`: [p (N), q_in (N), q_out (N), V (M), Vt].
    """
    tree = model.tree
    n, mu = tree.n_airways, tree.n_units
    ip, iqi, iqo, iv, ivt = 0, n, 2 * n, 3 * n, 3 * n + mu
    size = 3 * n + mu + 1
    p, qi, qo = x[ip:ip + n], x[iqi:iqi + n], x[iqo:iqo + n]
    V, Vt = x[iv:iv + mu], x[ivt]

    pa, g = model.unit_pressure(V, Vt, state.visc_state, state.V, dt, theta)
    h = model.pleural.volume_slope
    root = tree.parent < 0
    par = tree.parent.clip(0)
    p_up = np.where(root, p_ao_new, p[par])
    p_up_old = inlet_pressure(tree, state.p, state.p_ao)
    ax = tree.axis_unit
    pext = pa[ax]

    C, Rv, I = coeffs.C, coeffs.R_visc, coeffs.I
    R = coeffs.R_mu + coeffs.R_conv
    cdt = C / dt
    cvd = C * Rv / dt
    dq, dq_old = qo - qi, state.q_out - state.q_in
    sq, sq_old = qi + qo, state.q_in + state.q_out

    r1 = (cdt * ((0.5 * (p_up + p) - pext) - (0.5 * (p_up_old + state.p) - state.p_ext))
          + theta * dq + (1 - theta) * dq_old + cvd * (dq - dq_old))
    r2 = (0.5 * I / dt * (sq - sq_old)
          + theta * (0.5 * R * sq + p - p_up)
          + (1 - theta) * (0.5 * R * sq_old + state.p - p_up_old))

    leaf = tree.is_leaf
    r3 = np.zeros(n)
    inner = ~leaf
    c = tree.children
    r3[inner] = qo[inner] - qi[c[inner, 0]] - qi[c[inner, 1]]
    lu = tree.unit_of[leaf]
    leaf_ids = np.flatnonzero(leaf)
    flow_bal = (V[lu] - state.V[lu]) / dt - theta * qo[leaf] - (1 - theta) * state.q_out[leaf]
    r3[leaf] = np.where(sealed[lu], qo[leaf], flow_bal)
    r4 = np.where(sealed, V - state.V, p[tree.leaves] - pa)
    r5 = Vt - V.sum()
    F = np.concatenate([r1, r2, r3, r4, [r5]])

    rows, cols, vals = [], [], []

    def add(r, c_, v):
        r = np.broadcast_to(np.asarray(r), np.broadcast(np.asarray(r), np.asarray(c_), np.asarray(v)).shape)
        c_ = np.broadcast_to(np.asarray(c_), r.shape)
        v = np.broadcast_to(np.asarray(v, dtype=float), r.shape)
        rows.append(np.ravel(r)); cols.append(np.ravel(c_)); vals.append(np.ravel(v))

    e = np.arange(n)
    nr = ~root
    # r1
    add(e, ip + e, 0.5 * cdt)
    add(e[nr], ip + par[nr], 0.5 * cdt[nr])
    add(e, iqo + e, theta + cvd)
    add(e, iqi + e, -(theta + cvd))
    add(e, iv + ax, -cdt * g[ax])
    add(e, ivt, -cdt * h)
    # r2
    m = 0.5 * I / dt + 0.5 * theta * R
    add(n + e, iqi + e, m)
    add(n + e, iqo + e, m)
    add(n + e, ip + e, theta)
    add(n + e[nr], ip + par[nr], -theta)
    # r3
    ii = np.flatnonzero(inner)
    add(2 * n + ii, iqo + ii, 1.0)
    add(2 * n + ii, iqi + c[ii, 0], -1.0)
    add(2 * n + ii, iqi + c[ii, 1], -1.0)
    sl = sealed[lu]
    add(2 * n + leaf_ids[sl], iqo + leaf_ids[sl], 1.0)
    ol = ~sl
    add(2 * n + leaf_ids[ol], iv + lu[ol], 1.0 / dt)
    add(2 * n + leaf_ids[ol], iqo + leaf_ids[ol], -theta)
    # r4
    u = np.arange(mu)
    add(3 * n + u[sealed], iv + u[sealed], 1.0)
    ou = u[~sealed]
    add(3 * n + ou, ip + tree.leaves[ou], 1.0)
    add(3 * n + ou, iv + ou, -g[ou])
    add(3 * n + ou, ivt, -h)
    # r5
    add(size - 1, ivt, 1.0)
    add(np.full(mu, size - 1), iv + u, -1.0)

    J = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    )
    return F, J


def describe_unknown(tree, index):
    n, mu = tree.n_airways, tree.n_units
    if index < n:
        return int(index), "p"
    if index < 2 * n:
        return int(index - n), "q_in"
    if index < 3 * n:
        return int(index - 2 * n), "q_out"
    if index < 3 * n + mu:
        return int(tree.leaves[index - 3 * n]), "V"
    return None, "Vt"


def diagnose_singular(tree, J):
    """Raise SingularSystemError naming a node the Jacobian cannot resolve."""
    match = maximum_bipartite_matching(sp.csr_matrix(J != 0, dtype=np.int8), perm_type="column")
    unmatched = np.flatnonzero(match < 0)
    if len(unmatched):
        node, what = describe_unknown(tree, int(unmatched[0]))
        raise SingularSystemError(f"structurally singular system (unknown {what})", node=node)


def solve_step_sparse(model, state, p_ao_new, dt, cfg: SolverConfig):
    """Reference Newton solve with a general sparse LU; returns the new unknowns."""
    tree = model.tree
    is_open = open_airways(model, state.rd)
    sealed = _sealed(tree, is_open, cfg)
    coeffs, _ = step_coefficients(model, state, is_open)
    x = np.concatenate([state.p, state.q_in, state.q_out, state.V, [state.V.sum()]])
    for _ in range(cfg.newton_max_iter):
        F, J = assemble(model, state, x, coeffs, sealed, p_ao_new, dt, cfg.theta)
        try:
            dx = splu(J.tocsc()).solve(-F)
        except RuntimeError:
            diagnose_singular(tree, J)
            raise SingularSystemError("numerically singular Jacobian")
        x = x + dx
        if np.abs(dx[3 * tree.n_airways:]).max() <= 1e-14 * max(state.V.sum(), 1e-12):
            break
    n, mu = tree.n_airways, tree.n_units
    return x[:n], x[n:2 * n], x[2 * n:3 * n], x[3 * n:3 * n + mu], x[-1]


# ---------------------------------------------------------------------------
# Model construction and scenarios

def build_model(tree: AirwayTree, tissue: ts.TissueParams = ts.TissueParams(),
                rd_config: rdm.RdConfig | None = None, *, lung_air=3.21e-3,
                lung_tissue=1.0e-3, inspiratory_capacity=1.5e-3, p_ct=10.0 * MBAR,
                unit_hu=None, pleural_kwargs=None, air: aw.AirProperties = aw.AIR):
    """LungModel and the matching initial R/D state for `tree`.

    Unit volumes under the scan load (PEEP `p_ct`) come from lung-level air and
    tissue volumes split across lobes by supplied area and across units by
    density (synthetic gradient when `unit_hu` is None). The chest-wall
    reference V_PEEP is the total scan volume and V_max adds
    `inspiratory_capacity`.
    """
    tissue.validate()
    rd_state = rdm.initialize_states(tree, rd_config) if rd_config is not None else _empty_rd()
    trapped0 = trapped_units(tree, ~open_airways_tree(tree, rd_state))
    if unit_hu is None:
        unit_hu = ts.synthetic_unit_density(tree)
    v_peep = lung_air + lung_tissue
    pleural = PleuralModel(V_PEEP=v_peep, V_max=v_peep + inspiratory_capacity,
                           **(pleural_kwargs or {}))
    transmural = p_ct - pleural.volume_pressure(v_peep) - pleural.weight_pressure(tree.unit_height)
    v_ct, v_tis, v0 = ts.initialize_volumes(
        tree, ts.split_by_lobe(tree, lung_air), ts.split_by_lobe(tree, lung_tissue),
        unit_hu, transmural, tissue, trapped0,
    )
    model = LungModel(tree=tree, tissue=tissue, pleural=pleural, V0=v0, V_CT=v_ct,
                      V_tissue=v_tis, initially_trapped=trapped0, rd_config=rd_config, air=air)
    return model, rd_state


def open_airways_tree(tree, rd_state):
    if rd_state is None or len(rd_state) == 0:
        return np.ones(tree.n_airways, dtype=bool)
    return rdm.open_mask(tree, rd_state)


def percent_open(tree, rd_state):
    """(percentage of all airways open, percentage of collapsible airways open)."""
    n_coll = len(rd_state)
    if n_coll == 0:
        return 100.0, 100.0
    n_open = int(rd_state.open.sum())
    closed = n_coll - n_open
    return 100.0 * (tree.n_airways - closed) / tree.n_airways, 100.0 * n_open / n_coll


@dataclass
class Breath:
    start: float
    end: float
    tidal_volume: float
    eelv: float
    delta_p_pl: float
    pct_open_min: float
    pct_open_max: float


@dataclass
class ScenarioResult:
    t: np.ndarray
    v_total: np.ndarray
    q_ao: np.ndarray
    p_ao: np.ndarray
    p_pl: np.ndarray
    pct_open: np.ndarray
    pct_open_collapsible: np.ndarray
    v_airway: np.ndarray
    snapshots: dict
    final_state: SystemState
    max_junction_residual: float
    newton_iterations: int
    seed: int | None = None

    @property
    def breaths(self):
        return detect_breaths(self.t, self.v_total, self.q_ao, self.p_pl, self.pct_open)

    def write_metrics(self, path):
        data = np.column_stack([self.t, self.v_total, self.q_ao, self.p_ao / MBAR,
                                self.p_pl / MBAR, self.pct_open])
        np.savetxt(path, data, delimiter=",", header="t_s,v_total_m3,q_ao_m3s,p_ao_mbar,p_pl_mbar,pct_open",
                   comments="", fmt="%.17g")


def read_metrics(path):
    """Metric CSV back into a dict of column arrays (SI units, pressures in Pa)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    cols = ["t", "v_total", "q_ao", "p_ao", "p_pl", "pct_open"]
    out = {c: data[:, i] for i, c in enumerate(cols)}
    out["p_ao"] = out["p_ao"] * MBAR
    out["p_pl"] = out["p_pl"] * MBAR
    return out


def detect_breaths(t, v_total, q_ao, p_pl, pct_open, threshold=None):
    """Split a record into breaths at each inspiration onset.

    An onset is an upward crossing of q_ao through `threshold` that follows
    an expiration (q_ao below -threshold). The default threshold is 5% of the
    peak |q_ao|, which ignores small flow reversals from recruitment events.
    EELV is the volume at the onset; the last, possibly incomplete segment is
    dropped.
    """
    q_ao = np.asarray(q_ao)
    if threshold is None:
        threshold = max(0.05 * float(np.abs(q_ao).max(initial=0.0)), BREATH_FLOW_THRESHOLD)
    onsets = []
    armed = True
    for i in range(1, len(q_ao)):
        if q_ao[i] < -threshold:
            armed = True
        elif armed and q_ao[i] > threshold and q_ao[i - 1] <= threshold:
            onsets.append(i)
            armed = False
    breaths = []
    for a, b in zip(onsets[:-1], onsets[1:]):
        seg = slice(a, b)
        breaths.append(Breath(
            start=float(t[a]), end=float(t[b]),
            tidal_volume=float(v_total[seg].max() - v_total[seg].min()),
            eelv=float(v_total[a]),
            delta_p_pl=float(p_pl[seg].max() - p_pl[seg].min()),
            pct_open_min=float(pct_open[seg].min()),
            pct_open_max=float(pct_open[seg].max()),
        ))
    return breaths


def strain_snapshot(model: LungModel, state: SystemState, mode="v0"):
    """Per-unit rows (unit_id, z, V, V0, strain, trapped, open_path).

    `trapped` flags units sealed at initialization, `open_path` whether the
    unit is connected to the airway opening now. Strain is referenced to V0
    (mode 'v0') or to the scan-load volume V_CT (mode 'eelv').
    """
    if mode not in ("v0", "eelv"):
        raise ValueError("strain mode must be 'v0' or 'eelv'")
    ref = model.V0 if mode == "v0" else model.V_CT
    sealed = trapped_units(model.tree, ~open_airways(model, state.rd))
    return {
        "unit_id": np.arange(model.tree.n_units),
        "z_m": model.tree.unit_height,
        "V_m3": state.V.copy(),
        "V0_m3": model.V0,
        "strain": ts.unit_strain(state.V, ref),
        "trapped": model.initially_trapped.copy(),
        "open_path": ~sealed,
    }


def write_snapshot(snapshot, path):
    cols = ["unit_id", "z_m", "V_m3", "V0_m3", "strain", "trapped", "open_path"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        rows = zip(*(snapshot[c] for c in cols))
        for uid, z, v, v0, s, tr, op in rows:
            fh.write(f"{int(uid)},{z!r},{v!r},{v0!r},{s!r},{int(tr)},{int(op)}\n")


def run_scenario(model: LungModel, waveform: Waveform, config: SolverConfig = SolverConfig(),
                 rd_state=None, duration=None, warmup: Waveform | None = None,
                 snapshot_times=(), strain_mode="v0", record_every=1,
                 track_conservation=True, initial_state: SystemState | None = None,
                 progress=None) -> ScenarioResult:
    """Run `waveform` from a static equilibrium at its first pressure.

    `warmup` cycles, if given, run first and are not recorded; the recorded
    time axis then starts at the waveform's own origin.
    """
    config.validate()
    if initial_state is None:
        wf0 = warmup if warmup is not None else waveform
        state = static_equilibrium(model, wf0(wf0.start), rd_state, t0=wf0.start)
    else:
        state = initial_state.copy()
    if warmup is not None and initial_state is None:
        state = _march(model, state, warmup, warmup.end, config, track_conservation)[0]
        state.t = waveform.start
        state.v_airway = 0.0
    t_end = waveform.end if duration is None else min(waveform.end, waveform.start + duration)
    rec = _Recorder(model, record_every)
    rec.add(state, state.q_in[model.tree.root] if state.t > waveform.start else 0.0)
    snaps = {}
    pending = sorted(float(s) for s in snapshot_times)
    state, max_jr, iters = _march(model, state, waveform, t_end, config, track_conservation,
                                  rec, pending, snaps, strain_mode, progress)
    res = rec.result(state, snaps, max_jr, iters)
    res.seed = None if model.rd_config is None else model.rd_config.seed
    return res


def _march(model, state, waveform, t_end, config, track_conservation, rec=None,
           pending=(), snaps=None, strain_mode="v0", progress=None):
    pending = list(pending)
    max_jr = 0.0
    iters = 0
    n_steps = int(round((t_end - state.t) / config.dt))
    tol = 1e-9 * config.dt
    while pending and pending[0] <= state.t + tol:
        snaps[pending.pop(0)] = strain_snapshot(model, state, strain_mode)
    for k in range(n_steps):
        try:
            state, info = step(model, state, waveform, config, track_conservation)
        except SolverError as exc:
            raise SolverError(f"t={state.t:.6f} s: {exc}") from exc
        max_jr = max(max_jr, info.junction_residual)
        iters += info.iterations
        if rec is not None:
            rec.add(state, state.q_in[model.tree.root])
        while pending and pending[0] <= state.t + tol:
            snaps[pending.pop(0)] = strain_snapshot(model, state, strain_mode)
        if progress is not None:
            progress(k + 1, n_steps)
    return state, max_jr, iters


class _Recorder:
    def __init__(self, model, every):
        self.model = model
        self.every = max(int(every), 1)
        self.count = 0
        self.rows = []

    def add(self, state, q_ao):
        if self.count % self.every == 0:
            pct, pct_c = percent_open(self.model.tree, state.rd)
            self.rows.append((state.t, state.V_total, q_ao, state.p_ao,
                              float(self.model.pleural.volume_pressure(state.V_total)),
                              pct, pct_c, state.v_airway))
        self.count += 1

    def result(self, state, snaps, max_jr, iters):
        a = np.array(self.rows, dtype=float)
        return ScenarioResult(
            t=a[:, 0], v_total=a[:, 1], q_ao=a[:, 2], p_ao=a[:, 3], p_pl=a[:, 4],
            pct_open=a[:, 5], pct_open_collapsible=a[:, 6], v_airway=a[:, 7],
            snapshots=snaps, final_state=state, max_junction_residual=max_jr,
            newton_iterations=iters,
        )
