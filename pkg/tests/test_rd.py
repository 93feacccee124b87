import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdlung import rd
from rdlung.tree import TreeConfig, build_tree, mark_collapsible
from rdlung.units import CMH2O


def cgs_opening_pressure(gamma_dyn_cm, r_mm):
    # dyn/cm^2 -> Pa is a factor 0.1
    return 8.3 * gamma_dyn_cm / (r_mm / 10.0) * 0.1


def single(open_, x, p_o=2000.0, s_o=0.04, s_c=0.004):
    return rd.RdState(
        airway=np.array([0]), x=np.array([float(x)]), open=np.array([open_]),
        P_o=np.array([p_o]), P_c=np.array([p_o - 4 * CMH2O]),
        s_o=np.array([s_o / CMH2O]), s_c=np.array([s_c / CMH2O]),
    )


def test_opening_pressure_values():
    assert rd.opening_pressure(70.0, 0.4e-3) == pytest.approx(1452.5, rel=1e-12)
    assert rd.opening_pressure(130.0, 0.4e-3) == pytest.approx(2697.5, rel=1e-12)
    assert rd.opening_pressure(100.0, 0.3e-3) == pytest.approx(cgs_opening_pressure(100.0, 0.3), rel=1e-12)


@settings(max_examples=50)
@given(st.floats(1.0, 300.0), st.floats(1e-5, 1e-2), st.floats(0.1, 10.0))
def test_opening_pressure_homogeneity(gamma, r, k):
    p = rd.opening_pressure(gamma, r)
    assert rd.opening_pressure(gamma, 2 * r) == pytest.approx(p / 2, rel=1e-12)
    assert rd.opening_pressure(k * gamma, r) == pytest.approx(k * p, rel=1e-12)


def test_opening_pressure_rejects_bad_radius():
    with pytest.raises(ValueError):
        rd.opening_pressure(70.0, 0.0)


def test_closing_offset():
    assert rd.closing_pressure(2000.0) == pytest.approx(2000.0 - 392.266, abs=1e-12)


def test_velocity_constants():
    assert rd.velocity_constants_from_uniform(1.0) == pytest.approx((0.04, 0.004))
    assert rd.velocity_constants_from_uniform(0.5) == pytest.approx((0.08, 0.008))
    with pytest.raises(ValueError):
        rd.velocity_constants_from_uniform(0.0)
    with pytest.raises(ValueError):
        rd.velocity_constants_from_uniform(0.5, S_o=0.04, S_c=0.01)


def test_velocity_constant_distribution():
    rng = np.random.default_rng(11)
    s_o, s_c = rd.sample_velocity_constants(0.04, 0.004, rng, 1_000_000)
    assert abs(np.mean(s_o <= 0.08) - 0.5) < 0.002
    assert np.all(s_o >= 0.04) and np.allclose(s_o, 10 * s_c)


def test_dead_band_keeps_state():
    s = single(False, 0.3)
    new, opened, closed = rd.step_trajectory(s, np.array([2000.0 - 100.0]), 0.01)
    assert new.x[0] == 0.3 and not opened.any() and not closed.any()


@pytest.mark.parametrize("dt", [1e-3, 1e-2])
def test_opening_time(dt):
    s = single(False, 0.0)
    p = np.array([2000.0 + CMH2O])
    t = 0.0
    while not s.open[0]:
        s, _, _ = rd.step_trajectory(s, p, dt)
        t += dt
    assert abs(t - 25.0) <= dt + 1e-9


@pytest.mark.parametrize("dt", [1e-3, 1e-2])
def test_closing_time(dt):
    s = single(True, 1.0)
    p = np.array([s.P_c[0] - 10 * CMH2O])
    t = 0.0
    while s.open[0]:
        s, _, _ = rd.step_trajectory(s, p, dt)
        t += dt
    assert abs(t - 25.0) <= dt + 1e-9


@settings(max_examples=100)
@given(st.floats(0, 1), st.booleans(), st.floats(0, 6000), st.floats(1e-4, 1.0))
def test_trajectory_clamped_and_monotone(x, is_open, p, dt):
    s = single(is_open, x)
    new, _, _ = rd.step_trajectory(s, np.array([p]), dt)
    assert 0.0 <= new.x[0] <= 1.0
    if p > s.P_o[0]:
        assert new.x[0] >= x
    if p < s.P_c[0]:
        assert new.x[0] <= x


def test_initialize_states_threshold():
    t = mark_collapsible(build_tree(TreeConfig()), fraction=1.0)
    st70 = rd.initialize_states(t, rd.RdConfig(gamma=70.0))
    closed70 = ~st70.open
    r = t.radius[st70.airway]
    # inverted threshold radius 8.3 * gamma / 2400 Pa
    assert np.array_equal(closed70, r < 8.3 * 70e-3 / 2400.0)
    assert np.all(st70.x[closed70] == 0) and np.all(st70.x[~closed70] == 1)
    st130 = rd.initialize_states(t, rd.RdConfig(gamma=130.0))
    assert np.all(~st130.open[closed70])
    assert (~st130.open).sum() > closed70.sum()
    assert np.allclose(st70.P_o - st70.P_c, 4 * CMH2O)
    assert np.allclose(st70.s_o, 10 * st70.s_c)


def test_non_collapsible_always_open(small_tree):
    s = rd.initialize_states(small_tree, rd.RdConfig())
    mask = rd.open_mask(small_tree, s)
    assert mask[~small_tree.collapsible].all()
    assert len(s) == small_tree.collapsible.sum()


def test_draws_do_not_depend_on_subset():
    t = build_tree(TreeConfig(max_generation=8))
    a = rd.initialize_states(mark_collapsible(t, fraction=0.5, seed=1), rd.RdConfig(seed=3))
    b = rd.initialize_states(mark_collapsible(t, fraction=1.0), rd.RdConfig(seed=3))
    common = np.isin(b.airway, a.airway)
    assert np.array_equal(a.s_o, b.s_o[common])


def test_reproducible(small_tree):
    cfg = rd.RdConfig(seed=9)
    a, b = rd.initialize_states(small_tree, cfg), rd.initialize_states(small_tree, cfg)
    for f in ("x", "open", "P_o", "s_o"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
