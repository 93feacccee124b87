import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdlung import boundary as B
from rdlung.units import CM, CMH2O, LITER, MBAR

MODEL = B.PleuralModel(V_PEEP=3.0 * LITER, V_max=4.5 * LITER)


def test_volume_component_endpoints():
    assert MODEL.volume_pressure(MODEL.V_PEEP) == pytest.approx(10.15 * MBAR, rel=1e-15)
    assert MODEL.volume_pressure(MODEL.V_max) == pytest.approx(19.5 * MBAR, rel=1e-15)


def test_reference_point_is_exact():
    assert B.pleural_pressure(MODEL.V_PEEP, MODEL.h_balloon, MODEL) == MODEL.P_pl0


def test_weight_component():
    m = B.PleuralModel(V_PEEP=1.0, V_max=2.0, h_balloon=5 * CM)
    assert m.weight_pressure(10 * CM) / CMH2O == pytest.approx(3.83, rel=1e-12)
    assert m.weight_pressure(5 * CM) == 0.0


def test_weight_monotone_in_height():
    z = np.linspace(0, 0.3, 1001)
    assert np.all(np.diff(MODEL.weight_pressure(z)) > 0)


@settings(max_examples=50)
@given(st.floats(1e-3, 1e-2), st.floats(1e-3, 1e-2), st.floats(-5, 5))
def test_volume_component_is_affine(v1, v2, a):
    f = MODEL.volume_pressure
    lhs = f(a * v1 + (1 - a) * v2)
    assert lhs == pytest.approx(a * f(v1) + (1 - a) * f(v2), rel=1e-9, abs=1e-6)


def test_invalid_model():
    with pytest.raises(ValueError):
        B.PleuralModel(V_PEEP=2.0, V_max=1.0)
    with pytest.raises(ValueError):
        B.PleuralModel(V_PEEP=1.0, V_max=2.0, grav_a=np.inf)


def test_constant_waveform():
    wf = B.constant(12 * MBAR, 5.0)
    assert np.all(wf(np.linspace(0, 5, 11)) == 12 * MBAR)


def test_linear_interpolation_and_csv(tmp_path):
    path = tmp_path / "wf.csv"
    path.write_text("t_s,p_ao_mbar\n0,10\n1,20\n")
    wf = B.Waveform.from_csv(path)
    assert B.airway_opening_pressure(0.5, wf) == pytest.approx(15 * MBAR)
    wf.to_csv(tmp_path / "copy.csv")
    again = B.Waveform.from_csv(tmp_path / "copy.csv")
    np.testing.assert_array_equal(again.t, wf.t)
    np.testing.assert_array_equal(again.p, wf.p)


def test_outside_domain():
    wf = B.constant(0.0, 1.0)
    with pytest.raises(B.WaveformError):
        wf(1.5)
    with pytest.raises(B.WaveformError):
        wf(-0.1)


def test_bad_csv(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("time,p\n0,1\n")
    with pytest.raises(B.WaveformError):
        B.Waveform.from_csv(path)
    path.write_text("t_s,p_ao_mbar\n0,1\n1,x\n")
    with pytest.raises(B.WaveformError):
        B.Waveform.from_csv(path)
    with pytest.raises(B.WaveformError):
        B.Waveform([1.0, 0.0], [0.0, 0.0])


def test_sustained_inflation_hold():
    wf = B.sustained_inflation(breaths_after=3, driving_pressure=16 * MBAR)
    t_hold = 1.0 + 0.5
    hold = np.linspace(t_hold, t_hold + 32.0, 200)
    assert np.all(wf(hold) == 40 * MBAR)
    after = wf(np.linspace(t_hold + 32.5, wf.end, 400))
    assert after.min() == pytest.approx(19 * MBAR)


def test_ventilation_shape():
    wf = B.ventilation(peep=5 * MBAR, driving_pressure=15 * MBAR, rate=20, ie_ratio=0.5, breaths=4)
    assert wf.duration == pytest.approx(12.0)
    assert wf(0.5) == pytest.approx(20 * MBAR)
    assert wf(2.5) == pytest.approx(5 * MBAR)
    half = B.halved_driving_pressure(peep=5 * MBAR, driving_pressure=15 * MBAR, breaths=4)
    assert half(0.5) == pytest.approx(12.5 * MBAR)


def test_quasi_static_peak_and_protocol():
    wf = B.quasi_static(10 * MBAR, 40 * MBAR, ramp_time=30.0, settle=2.0)
    assert wf(32.0) == pytest.approx(40 * MBAR)
    assert wf(17.0) == pytest.approx(25 * MBAR)
    p = B.protocol(breaths=2)
    assert p.p.max() == pytest.approx(45 * MBAR)
    assert np.all(np.diff(p.t) >= 0)
