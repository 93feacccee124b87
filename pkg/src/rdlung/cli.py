"""Command-line front end: generate, calibrate, simulate, sweep."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import boundary, calibrate, config, rd, solver, tissue, tree
from .units import MBAR

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_SOLVER = 4

log = logging.getLogger("rdlung")


class CliError(Exception):
    def __init__(self, message, code):
        self.code = code
        super().__init__(message)


# ---------------------------------------------------------------------------
# scenario assembly

def tree_config(cfg):
    return tree.TreeConfig(
        root_length=cfg["root_length"], root_radius=cfg["root_radius"],
        length_ratio=cfg["length_ratio"],
        diameter_ratios=(cfg["diameter_ratio_major"], cfg["diameter_ratio_minor"]),
        min_length=cfg["min_length"], min_diameter=cfg["min_diameter"],
        max_generation=cfg["max_generation"], asymmetry_seed=cfg["seed"],
        collapsible_fraction=cfg["collapsible_fraction"], height_extent=cfg["height_extent"],
    )


def load_tree(cfg):
    if cfg["tree_file"]:
        return tree.deserialize_tree(cfg["tree_file"])
    tc = tree_config(cfg)
    tc.validate()
    return tree.build_tree(tc)


def make_waveform(cfg):
    name = cfg["waveform"]
    kwargs = config.waveform_kwargs(cfg)
    if name in boundary.GENERATORS:
        try:
            return boundary.GENERATORS[name](**kwargs)
        except TypeError as exc:
            raise config.ConfigError(f"waveform {name}: {exc}") from None
    path = Path(name)
    if path.suffix.lower() == ".csv" or path.exists():
        if kwargs:
            raise config.ConfigError("wf_* parameters apply to generators, not waveform files")
        return boundary.Waveform.from_csv(path)
    names = ", ".join(sorted(boundary.GENERATORS))
    raise config.ConfigError(f"unknown waveform {name!r}; choose one of {names} or a CSV path")


class DensityFormatError(ValueError):
    pass


def read_density(path, n_units):
    """Per-unit densities (HU) from a CSV with header unit_id,hu."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["unit_id", "hu"]:
            raise DensityFormatError(f"{path}: expected header 'unit_id,hu'")
        hu = np.full(n_units, np.nan)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                uid, value = int(row[0]), float(row[1])
            except (ValueError, IndexError):
                raise DensityFormatError(f"{path}: line {lineno}: bad row {row!r}") from None
            if not 0 <= uid < n_units:
                raise DensityFormatError(f"{path}: line {lineno}: unit {uid} outside 0..{n_units - 1}")
            hu[uid] = value
    if np.isnan(hu).any():
        missing = int(np.flatnonzero(np.isnan(hu))[0])
        raise DensityFormatError(f"{path}: no density for unit {missing}")
    return hu


def build_scenario(cfg, airway_tree=None):
    airway_tree = load_tree(cfg) if airway_tree is None else airway_tree
    tis = tissue.TissueParams(
        kappa=cfg["kappa_mbar"] * MBAR, beta=cfg["beta"],
        visc_modulus=cfg["visc_modulus_mbar"] * MBAR, visc_tau=cfg["visc_tau"],
    )
    rd_cfg = rd.RdConfig(gamma=cfg["gamma"], S_o=cfg["s_o"], S_c=cfg["s_c"], seed=cfg["seed"],
                         initial_closed_threshold=cfg["initial_closed_mbar"] * MBAR)
    pleural = dict(P_pl0=cfg["p_pl0_mbar"] * MBAR, P_pl_lin=cfg["p_pl_lin_mbar"] * MBAR,
                   h_balloon=cfg["h_balloon"])
    unit_hu = None
    if cfg["density_file"]:
        unit_hu = read_density(cfg["density_file"], airway_tree.n_units)
    model, rd_state = solver.build_model(
        airway_tree, tis, rd_cfg, lung_air=cfg["lung_air"], lung_tissue=cfg["lung_tissue"],
        inspiratory_capacity=cfg["inspiratory_capacity"], p_ct=cfg["p_ct_mbar"] * MBAR,
        unit_hu=unit_hu, pleural_kwargs=pleural,
    )
    wf = make_waveform(cfg)
    warmup = None
    if cfg["warmup_breaths"]:
        warmup = boundary.ventilation(peep=wf(wf.start), breaths=cfg["warmup_breaths"])
    sc = solver.SolverConfig(dt=cfg["dt"], newton_tol=cfg["newton_tol"],
                             newton_max_iter=cfg["newton_max_iter"], theta=cfg["theta"])
    return model, rd_state, wf, warmup, sc


# ---------------------------------------------------------------------------
# summaries (always recomputed from the written files)

def read_snapshot(path):
    data = np.genfromtxt(path, delimiter=",", names=True)
    return np.atleast_1d(data)


def summarize(metrics, snapshot_files=()):
    breaths = solver.detect_breaths(metrics["t"], metrics["v_total"], metrics["q_ao"],
                                    metrics["p_pl"], metrics["pct_open"])
    out = {
        "breaths": breaths,
        "pct_open_min": float(metrics["pct_open"].min()),
        "pct_open_max": float(metrics["pct_open"].max()),
        "harmful": [],
    }
    for t, path in snapshot_files:
        strain = read_snapshot(path)["strain"]
        out["harmful"].append((t, int(np.sum(strain > tissue.HARMFUL_STRAIN))))
    return out


def format_summary(summary):
    lines = ["breath  start_s  tidal_ml  eelv_ml  dPpl_mbar  open_min%  open_max%"]
    for i, b in enumerate(summary["breaths"], start=1):
        lines.append(f"{i:6d} {b.start:8.3f} {b.tidal_volume * 1e6:9.2f} {b.eelv * 1e6:8.1f} "
                     f"{b.delta_p_pl / MBAR:10.3f} {b.pct_open_min:10.3f} {b.pct_open_max:10.3f}")
    lines.append(f"open airways: min {summary['pct_open_min']:.3f}% "
                 f"max {summary['pct_open_max']:.3f}%")
    for t, n in summary["harmful"]:
        lines.append(f"snapshot t={t:g} s: {n} units with strain > {tissue.HARMFUL_STRAIN}")
    return "\n".join(lines)


def simulate(cfg, quiet=False):
    """Run one scenario into cfg['output_dir']; returns the summary dict."""
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.txt").write_text(config.dump(cfg))
    model, rd_state, wf, warmup, sc = build_scenario(cfg)
    duration = cfg["duration"] or None
    t0 = time.perf_counter()
    try:
        res = solver.run_scenario(
            model, wf, sc, rd_state=rd_state, duration=duration, warmup=warmup,
            snapshot_times=config.snapshot_times(cfg), strain_mode=cfg["strain_mode"],
            record_every=cfg["record_every"],
        )
    except (solver.SolverError, tissue.VolumeInitError) as exc:
        diag = out / "failure.txt"
        diag.write_text(f"solver failure: {exc}\n\n" + config.dump(cfg))
        raise CliError(f"solver failure: {exc} (diagnostics in {diag})", EXIT_SOLVER) from None
    elapsed = time.perf_counter() - t0
    metrics_path = out / "metrics.csv"
    res.write_metrics(metrics_path)
    snaps = []
    for t, snap in sorted(res.snapshots.items()):
        path = out / f"strain_t{t:g}.csv"
        solver.write_snapshot(snap, path)
        snaps.append((t, path))
    summary = summarize(solver.read_metrics(metrics_path), snaps)
    summary["elapsed_s"] = elapsed
    summary["seed"] = cfg["seed"]
    text = format_summary(summary) + f"\nseed {cfg['seed']}, wall time {elapsed:.1f} s\n"
    (out / "summary.txt").write_text(text)
    if not quiet:
        print(text, end="")
    return summary


def _sweep_worker(cfg):
    summary = simulate(cfg, quiet=True)
    steady = summary["breaths"][-1] if summary["breaths"] else None
    return cfg["gamma"], summary, steady


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(args):
    cfg = config.resolve(args.config, _overrides(args))
    t = load_tree(cfg)
    tree.serialize_tree(t, args.out)
    print(f"{t.n_airways} airways, {t.n_units} terminal units, "
          f"{int(t.collapsible.sum())} collapsible -> {args.out}")
    return EXIT_OK


def cmd_calibrate(args):
    if not Path(args.pv).is_file():
        raise config.ConfigError(f"PV file {args.pv} does not exist")
    pv = calibrate.read_pv_csv(args.pv, cutoff_mbar=args.cutoff_mbar)
    fit_v0 = args.v0 is None
    tis = calibrate.fit_tissue(pv, V0=args.v0, fit_v0=fit_v0)
    chest = calibrate.fit_chest_wall(pv)
    params = calibrate.calibration_config(tis, chest)
    text = "".join(f"{k} = {v!r}\n" for k, v in params.items())
    Path(args.out).write_text(text)
    err = tis.stderr
    print(f"kappa = {tis.kappa / MBAR:.6g} mbar (+/- {err[0] / MBAR:.2g})")
    print(f"beta = {tis.beta:.6g} (+/- {err[1]:.2g})")
    print(f"V0 = {tis.V0:.6g} m^3{' (fitted)' if fit_v0 else ''}")
    print(f"residual norm = {tis.residual_norm:.4g} m^6 over {tis.n_points} samples")
    print(f"P_pl0 = {chest.P_pl0 / MBAR:.6g} mbar, P_pl_lin = {chest.P_pl_lin / MBAR:.6g} mbar, "
          f"R^2 = {chest.r_squared:.6f}")
    if args.monte_carlo:
        errs = []
        for seed in range(args.monte_carlo):
            syn = calibrate.synthetic_pv(tis.kappa, tis.beta, tis.V0, chest.P_pl0,
                                         chest.P_pl_lin, p_low=pv.p_tp.min(),
                                         p_high=pv.p_tp.max(), noise=args.noise, seed=seed)
            f = calibrate.fit_tissue(syn, V0=tis.V0)
            errs.append([f.kappa / tis.kappa - 1.0, f.beta / tis.beta - 1.0])
        e = np.abs(np.array(errs))
        print(f"noisy recovery ({args.monte_carlo} seeds, {args.noise:.1%} volume noise): "
              f"max |rel err| kappa {e[:, 0].max():.3%}, beta {e[:, 1].max():.3%}")
    print(f"parameters written to {args.out}")
    return EXIT_OK


def cmd_simulate(args):
    cfg = config.resolve(args.config, _overrides(args))
    simulate(cfg)
    return EXIT_OK


def cmd_sweep(args):
    base = config.resolve(args.config, _overrides(args))
    gammas = [float(g) for g in args.gammas.split(",")]
    jobs = []
    for g in gammas:
        cfg = dict(base, gamma=g, output_dir=str(Path(base["output_dir"]) / f"gamma_{g:g}"))
        config.validate(cfg)
        jobs.append(cfg)
    workers = max(1, min(args.workers, len(jobs)))
    if workers == 1:
        results = [_sweep_worker(c) for c in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    header = ["gamma_dyn_cm", "pct_open_min", "pct_open_max", "last_tidal_ml", "last_eelv_ml",
              "last_dPpl_mbar", "last_open_min", "last_open_max"]
    rows = []
    for g, summary, last in results:
        row = [g, summary["pct_open_min"], summary["pct_open_max"]]
        if last is None:
            row += [float("nan")] * 5
        else:
            row += [last.tidal_volume * 1e6, last.eelv * 1e6, last.delta_p_pl / MBAR,
                    last.pct_open_min, last.pct_open_max]
        rows.append(row)
    out = Path(base["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    print("  ".join(f"{h:>14s}" for h in header))
    for row in rows:
        print("  ".join(f"{v:14.4f}" for v in row))
    return EXIT_OK


def _overrides(args):
    out = {}
    for item in args.set or ():
        if "=" not in item:
            raise config.ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


FLAG_KEYS = {
    "seed": "seed", "gamma": "gamma", "waveform": "waveform", "duration": "duration",
    "dt": "dt", "output": "output_dir", "snapshots": "snapshot_times",
    "tree_file": "tree_file", "warmup_breaths": "warmup_breaths",
}


def build_parser():
    p = argparse.ArgumentParser(prog="rdlung", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", action="append", default=[],
                        help="key = value config file (repeatable, later files win)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("generate", help="grow a synthetic airway tree")
    common(g)
    g.add_argument("--out", required=True, help="tree CSV to write")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("calibrate", help="fit tissue and chest-wall parameters to PV data")
    c.add_argument("pv", help="CSV with columns t_s,p_tp_mbar,p_pl_mbar,v_m3")
    c.add_argument("--v0", type=float, help="lumped stress-free volume, m^3 (fitted if omitted)")
    c.add_argument("--cutoff-mbar", type=float, help="exclude pressures below this value")
    c.add_argument("--out", default="calibration.cfg", help="parameter file to write")
    c.add_argument("--monte-carlo", type=int, default=0, metavar="N",
                   help="also run N noisy synthetic refits around the estimate")
    c.add_argument("--noise", type=float, default=0.01, help="relative volume noise for --monte-carlo")
    c.set_defaults(func=cmd_calibrate)

    for name, func, helptext in (("simulate", cmd_simulate, "run one scenario"),
                                 ("sweep", cmd_sweep, "run one scenario for several gamma values")):
        s = sub.add_parser(name, help=helptext)
        common(s)
        s.add_argument("--gamma", type=float, help="surface tension, dyn/cm")
        s.add_argument("--waveform", help="generator name or waveform CSV")
        s.add_argument("--duration", type=float, help="simulated time, s")
        s.add_argument("--dt", type=float)
        s.add_argument("--tree-file", dest="tree_file")
        s.add_argument("--warmup-breaths", dest="warmup_breaths", type=int)
        s.add_argument("--snapshots", help="comma separated snapshot times, s")
        s.add_argument("--output", "-o", help="output directory")
        if name == "sweep":
            s.add_argument("--gammas", default="70,100,130")
            s.add_argument("--workers", type=int, default=3)
        s.set_defaults(func=func)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (config.ConfigError, tree.TreeFormatError, boundary.WaveformError,
            DensityFormatError, calibrate.FitFailure) as exc:
        io_errors = (tree.TreeFormatError, boundary.WaveformError, DensityFormatError)
        code = EXIT_SOLVER if isinstance(exc, calibrate.FitFailure) else (
            EXIT_IO if isinstance(exc, io_errors) else EXIT_CONFIG)
        print(f"error: {exc}", file=sys.stderr)
        return code
    except calibrate.CalibrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
