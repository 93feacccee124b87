import pytest

from rdlung import config
from rdlung.units import MBAR


def test_defaults():
    cfg = config.resolve()
    assert cfg["gamma"] == 100.0 and cfg["dt"] == 1e-3 and cfg["theta"] == 1.0
    assert cfg["newton_max_iter"] == 30 and cfg["newton_tol"] == 1e-8


def test_precedence(tmp_path):
    a = tmp_path / "a.cfg"
    b = tmp_path / "b.cfg"
    a.write_text("gamma = 70  # first file\nseed = 3\ndt = 0.002\n")
    b.write_text("gamma = 130\n")
    cfg = config.resolve([a, b], {"seed": "9"})
    assert cfg["gamma"] == 130.0
    assert cfg["seed"] == 9
    assert cfg["dt"] == 0.002


def test_unknown_and_bad_values(tmp_path):
    with pytest.raises(config.ConfigError):
        config.resolve(overrides={"gama": "70"})
    with pytest.raises(config.ConfigError):
        config.resolve(overrides={"gamma": "abc"})
    with pytest.raises(config.ConfigError):
        config.resolve(overrides={"gamma": "-1"})
    with pytest.raises(config.ConfigError):
        config.resolve(overrides={"theta": "0.3"})
    with pytest.raises(config.ConfigError):
        config.resolve(overrides={"tree_file": str(tmp_path / "missing.csv")})
    bad = tmp_path / "bad.cfg"
    bad.write_text("no equals sign here\n")
    with pytest.raises(config.ConfigError):
        config.resolve([bad])
    with pytest.raises(FileNotFoundError):
        config.resolve([tmp_path / "nope.cfg"])


def test_waveform_keys():
    cfg = config.resolve(overrides={"wf_peep_mbar": "13", "wf_breaths": "4"})
    kw = config.waveform_kwargs(cfg)
    assert kw == {"peep": 13 * MBAR, "breaths": 4}


def test_snapshot_times():
    assert config.snapshot_times(config.resolve(overrides={"snapshot_times": "3, 1.5"})) == [1.5, 3.0]
    assert config.snapshot_times(config.resolve()) == []
    with pytest.raises(config.ConfigError):
        config.resolve(overrides={"snapshot_times": "1,x"})


def test_dump_round_trip(tmp_path):
    cfg = config.resolve(overrides={"gamma": "70", "wf_peep_mbar": "12.5"})
    path = tmp_path / "echo.cfg"
    path.write_text(config.dump(cfg))
    assert config.resolve([path]) == cfg
