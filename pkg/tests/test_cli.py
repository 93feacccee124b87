import csv

import numpy as np
import pytest

from rdlung import calibrate, cli, config, solver, tree
from rdlung.units import MBAR

SMALL = ["--set", "max_generation=6", "--set", "root_radius=0.0025", "--set", "dt=0.005"]


def run_small(tmp_path, *extra):
    out = tmp_path / "run"
    code = cli.main(["simulate", *SMALL, "--set", "wf_breaths=2", "--output", str(out), *extra])
    return code, out


def test_generate_round_trip(tmp_path, capsys):
    path = tmp_path / "tree.csv"
    assert cli.main(["generate", "--set", "max_generation=6", "--seed", "4", "--out", str(path)]) == 0
    t = tree.deserialize_tree(path)
    assert t.n_airways == 127 and t.n_units == 64
    assert "127 airways" in capsys.readouterr().out
    again = tree.build_tree(tree.TreeConfig(max_generation=6, asymmetry_seed=4))
    np.testing.assert_array_equal(t.radius, again.radius)


def test_simulate_outputs_and_summary(tmp_path, capsys):
    code, out = run_small(tmp_path, "--snapshots", "1.0,2.5", "--seed", "3")
    assert code == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["config_resolved.txt", "metrics.csv", "strain_t1.csv", "strain_t2.5.csv", "summary.txt"]
    assert "seed = 3" in (out / "config_resolved.txt").read_text()
    with open(out / "metrics.csv") as fh:
        assert next(csv.reader(fh)) == ["t_s", "v_total_m3", "q_ao_m3s", "p_ao_mbar", "p_pl_mbar", "pct_open"]
    # summary equals an independent recomputation from the written CSV
    m = np.loadtxt(out / "metrics.csv", delimiter=",", skiprows=1)
    t, v, q = m[:, 0], m[:, 1], m[:, 2]
    thr = 0.05 * np.abs(q).max()
    onsets, armed = [], True
    for i in range(1, len(q)):
        if q[i] < -thr:
            armed = True
        elif armed and q[i] > thr >= q[i - 1]:
            onsets.append(i)
            armed = False
    expected = [v[a:b].max() - v[a:b].min() for a, b in zip(onsets[:-1], onsets[1:])]
    summary = (out / "summary.txt").read_text().splitlines()
    rows = [line.split() for line in summary[1:1 + len(expected)]]
    assert [float(r[2]) for r in rows] == pytest.approx([e * 1e6 for e in expected], abs=0.006)
    strain = np.genfromtxt(out / "strain_t1.csv", delimiter=",", names=True)["strain"]
    n_harm = int(np.sum(strain > 1.5))
    assert f"snapshot t=1 s: {n_harm} units with strain > 1.5" in summary
    assert f"open airways: min {m[:, 5].min():.3f}% max {m[:, 5].max():.3f}%" in summary


def test_empty_snapshot_list_writes_no_strain_files(tmp_path):
    code, out = run_small(tmp_path)
    assert code == 0
    assert not list(out.glob("strain_*.csv"))


def test_sustained_inflation_waveform(tmp_path):
    out = tmp_path / "si"
    code = cli.main(["simulate", *SMALL, "--waveform", "sustained-inflation", "--duration", "3",
                     "--set", "wf_breaths_after=1", "--output", str(out)])
    assert code == 0
    m = solver.read_metrics(out / "metrics.csv")
    assert m["p_ao"].max() == pytest.approx(40 * MBAR)


def test_exit_codes(tmp_path):
    assert cli.main(["simulate", "--set", "gamma=-5", "--output", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["simulate", "--set", "nonsense=1"]) == cli.EXIT_CONFIG
    assert cli.main(["simulate", *SMALL, "--waveform", "square-dance"]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad_tree.csv"
    bad.write_text("garbage\n")
    assert cli.main(["simulate", "--tree-file", str(bad)]) == cli.EXIT_IO
    assert cli.main(["calibrate", str(tmp_path / "missing.csv")]) == cli.EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        cli.main(["simulate", "--dt"])
    assert exc.value.code == 2


def test_solver_failure_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise solver.NewtonFailure("forced")
    monkeypatch.setattr(solver, "run_scenario", boom)
    code, out = run_small(tmp_path)
    assert code == cli.EXIT_SOLVER
    assert "forced" in (out / "failure.txt").read_text()


def test_calibrate(tmp_path, capsys):
    pv_path = tmp_path / "pv.csv"
    calibrate.write_pv_csv(calibrate.synthetic_pv(), pv_path)
    out = tmp_path / "fit.cfg"
    code = cli.main(["calibrate", str(pv_path), "--v0", "2e-3", "--cutoff-mbar", "2",
                     "--out", str(out), "--monte-carlo", "3"])
    assert code == 0
    cfg = config.resolve([out])
    assert cfg["kappa_mbar"] == pytest.approx(3.7, rel=1e-6)
    assert cfg["beta"] == pytest.approx(-2.4, rel=1e-6)
    assert cfg["p_pl0_mbar"] == pytest.approx(10.15, rel=1e-10)
    assert "noisy recovery (3 seeds" in capsys.readouterr().out


def test_sweep(tmp_path):
    out = tmp_path / "sweep"
    code = cli.main(["sweep", *SMALL, "--set", "wf_breaths=2", "--workers", "1", "--output", str(out)])
    assert code == 0
    with open(out / "comparison.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["gamma_dyn_cm"]) for r in rows] == [70.0, 100.0, 130.0]
    for g in ("70", "100", "130"):
        assert (out / f"gamma_{g}" / "metrics.csv").is_file()


def test_density_file(tmp_path):
    dens = tmp_path / "hu.csv"
    dens.write_text("unit_id,hu\n" + "".join(f"{i},-700\n" for i in range(64)))
    cfg = config.resolve(overrides={"max_generation": "6", "density_file": str(dens)})
    model, *_ = cli.build_scenario(cfg)
    # uniform density and a fixed split give every unit the same air fraction
    ratio = (model.V_CT - model.V_tissue) / model.V_tissue
    assert np.allclose(ratio, ratio[0], rtol=1e-12)
    dens.write_text("unit_id,hu\n0,-700\n")
    assert cli.main(["simulate", "--set", "max_generation=6", "--set", f"density_file={dens}",
                     "--output", str(tmp_path / "o")]) == cli.EXIT_IO
