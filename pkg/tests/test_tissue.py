import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.optimize import brentq

from rdlung import tissue as T
from rdlung.tree import TreeConfig, build_tree
from rdlung.units import MBAR, ML

P = T.TissueParams()
ELASTIC = T.TissueParams(visc_modulus=0.0)


def test_stress_free_reference():
    assert T.elastic_pressure(1.0, 1.0, P) == 0.0


def test_pressure_at_double_volume():
    expected = (3.7 / -2.4) * 0.5 * (1 - 0.5 ** -2.4)
    assert T.elastic_pressure(2.0, 1.0, P) / MBAR == pytest.approx(expected, rel=1e-12)
    assert T.elastic_pressure(2.0, 1.0, P) / MBAR == pytest.approx(3.298, abs=5e-4)


def test_rejects_non_positive_volume():
    with pytest.raises(ValueError):
        T.elastic_pressure(0.0, 1.0, P)
    with pytest.raises(ValueError):
        T.elastic_pressure(1.0, -1.0, P)


def test_monotone_over_working_range():
    ratio = np.linspace(0.5, 3.0, 5001)
    p = T.elastic_pressure(ratio, 1.0, P)
    assert np.all(np.diff(p) > 0)
    assert T.elastic_pressure(50.0, 1.0, P) > T.elastic_pressure(3.0, 1.0, P)


def test_stiffness_matches_finite_differences():
    rng = np.random.default_rng(0)
    V = rng.uniform(0.4, 3.5, 20)
    h = 1e-6 * V
    fd = (T.elastic_pressure(V + h, 1.0, P) - T.elastic_pressure(V - h, 1.0, P)) / (2 * h)
    np.testing.assert_allclose(T.elastic_stiffness(V, 1.0, P), fd, rtol=1e-6)


@settings(max_examples=60)
@given(st.floats(-30 * MBAR, 60 * MBAR))
def test_inversion_round_trip(p):
    r = T.solve_ratio(p, P)
    assert T.elastic_pressure(1.0 / r, 1.0, P) == pytest.approx(p, abs=1e-9 * MBAR)


def test_quasi_static_loop_stores_no_energy():
    # integral of P dV out and back along the same path
    out = quad(lambda v: T.elastic_pressure(v, 1.0, P), 1.0, 2.5)[0]
    back = quad(lambda v: T.elastic_pressure(v, 1.0, P), 2.5, 1.0)[0]
    assert abs(out + back) < 1e-10 * abs(out)


def total_pressure(V, V0, xi, V_prev, params, dt):
    return T.elastic_pressure(V, V0, params) + T.maxwell_pressure(V, V0, xi, V_prev, params, dt)[0]


def hold(params, p_hold, duration, dt, V0=1.0):
    """Unit held at constant transmural pressure from rest; returns (t, V)."""
    V, xi = V0, 0.0
    ts, vs = [0.0], [V]
    for k in range(int(round(duration / dt))):
        V_prev = V
        V = brentq(lambda v: total_pressure(v, V0, xi, V_prev, params, dt) - p_hold, 0.2 * V0, 10 * V0, xtol=1e-15)
        xi = T.advance_visc_state(V, V0, xi, V_prev, params, dt)
        ts.append((k + 1) * dt)
        vs.append(V)
    return np.array(ts), np.array(vs)


def test_zero_modulus_reduces_to_elastic_law():
    rng = np.random.default_rng(1)
    V = rng.uniform(0.5, 3.0, 50)
    V_prev = rng.uniform(0.5, 3.0, 50)
    xi = rng.uniform(-0.5, 0.5, 50)
    units = T.TerminalUnits(V, np.ones(50), V, V, np.zeros(50), np.zeros(50, bool), xi)
    res = T.unit_residual(units, 12 * MBAR, 2 * MBAR, ELASTIC, 0.01, V_prev=V_prev)
    np.testing.assert_array_equal(res, 10 * MBAR - T.elastic_pressure(V, 1.0, ELASTIC))
    t, v = hold(ELASTIC, 2 * MBAR, 0.05, 0.01)
    assert np.allclose(v[1:], T.volume_at_pressure(2 * MBAR, 1.0, ELASTIC), rtol=1e-12)


def test_creep_time_constant():
    # spring much softer than the elastic branch, small load
    params = T.TissueParams(visc_modulus=0.02 * P.kappa, visc_tau=2.0)
    t, v = hold(params, 0.05 * MBAR, 12.0, 2e-3)
    v_start, v_end = v[1], T.volume_at_pressure(0.05 * MBAR, 1.0, params)
    assert v_end > v_start
    target = v_start + (1 - np.exp(-1)) * (v_end - v_start)
    t63 = t[np.argmax(v >= target)] - t[1]
    assert abs(t63 - params.visc_tau) <= 0.1 * params.visc_tau


def test_slow_ramp_is_quasi_static():
    dt, ramp = 0.25, 1000.0
    V0, V, xi = 1.0, 1.0, 0.0
    worst = 0.0
    for k in range(int(ramp / dt)):
        p = 20 * MBAR * (k + 1) * dt / ramp
        V_prev = V
        V = brentq(lambda v: total_pressure(v, V0, xi, V_prev, P, dt) - p, 0.2, 10.0, xtol=1e-15)
        xi = T.advance_visc_state(V, V0, xi, V_prev, P, dt)
        worst = max(worst, abs(V / T.volume_at_pressure(p, V0, P) - 1))
    assert worst < 0.01


@pytest.mark.parametrize("period", [0.5, 3.0, 20.0])
def test_maxwell_branch_dissipates(period):
    dt, V0, xi = 1e-3, 1.0, 0.0
    n = int(round(period / dt))
    V_prev = 1.5
    work = 0.0
    for cycle in range(3):
        work = 0.0
        for k in range(n):
            V = 1.5 + 0.3 * np.sin(2 * np.pi * (k + 1) / n)
            p, _ = T.maxwell_pressure(V, V0, xi, V_prev, P, dt)
            work += p * (V - V_prev)
            xi = T.advance_visc_state(V, V0, xi, V_prev, P, dt)
            V_prev = V
    assert work > 0


def two_unit_tree():
    t = build_tree(TreeConfig(max_generation=1))
    area = np.array(t.supplied_area)
    area[t.leaves] = [2.0, 1.0]
    return t.replace(supplied_area=area, lobe=np.zeros_like(t.lobe))


def test_tissue_split_by_supplied_area():
    t = two_unit_tree()
    v_ct, v_tis, v0 = T.initialize_volumes(t, {0: 10 * ML}, {0: 3 * ML}, [-800.0, -800.0],
                                           5 * MBAR, P, np.zeros(2, bool))
    np.testing.assert_allclose(v_tis, [2 * ML, 1 * ML], rtol=1e-14)
    # equal densities keep the same air/tissue ratio
    np.testing.assert_allclose((v_ct - v_tis) / v_tis, 10 / 3, rtol=1e-12)


def test_pure_air_unit_has_no_tissue_share():
    assert T.hu_to_air_fraction(-1000.0) == 1.0
    assert T.hu_to_air_fraction(0.0) == 0.0
    assert T.hu_to_air_fraction(-250.0) == pytest.approx(0.25)


def test_back_substitution_of_reference_volume():
    t = two_unit_tree()
    v_ct, _, v0 = T.initialize_volumes(t, {0: 10 * ML}, {0: 3 * ML}, [-700.0, -900.0],
                                       5 * MBAR, P, np.zeros(2, bool))
    res = T.elastic_pressure(v_ct, v0, P) - 5 * MBAR
    assert np.max(np.abs(res)) / MBAR < 1e-10


def test_trapped_units_are_stress_free():
    t = two_unit_tree()
    v_ct, _, v0 = T.initialize_volumes(t, {0: 10 * ML}, {0: 3 * ML}, [-700.0, -900.0],
                                       5 * MBAR, P, np.array([True, False]))
    assert v0[0] == v_ct[0] and v0[1] < v_ct[1]


def test_lobar_totals_conserved(small_tree):
    n = len(small_tree.leaves)
    hu = np.random.default_rng(4).uniform(-950, -100, n)
    lobes = np.unique(small_tree.unit_lobe)
    air = {int(lb): (1 + i) * 100 * ML for i, lb in enumerate(lobes)}
    tis = {int(lb): (1 + i) * 30 * ML for i, lb in enumerate(lobes)}
    v_ct, v_tis, _ = T.initialize_volumes(small_tree, air, tis, hu, 5 * MBAR, P, np.zeros(n, bool))
    for lb in lobes:
        sel = small_tree.unit_lobe == lb
        assert v_tis[sel].sum() == pytest.approx(tis[int(lb)], rel=1e-14)
        assert (v_ct - v_tis)[sel].sum() == pytest.approx(air[int(lb)], rel=1e-13)


def test_inversion_failure_names_unit():
    t = two_unit_tree()
    with pytest.raises(T.VolumeInitError) as err:
        T.initialize_volumes(t, {0: 10 * ML}, {0: 3 * ML}, [-700.0, -900.0],
                             np.array([5 * MBAR, np.nan]), P, np.zeros(2, bool))
    assert err.value.unit == 1


def test_invalid_density_rejected():
    t = two_unit_tree()
    with pytest.raises(ValueError):
        T.initialize_volumes(t, {0: ML}, {0: ML}, [-1200.0, -500.0], 0.0, P, np.zeros(2, bool))


def test_strain():
    assert T.unit_strain(2.0, 2.0) == 1.0
    assert T.unit_strain(1.6, 1.0) > T.HARMFUL_STRAIN
