"""Flat ``key = value`` scenario configuration.

Resolution order: command-line overrides, then config files (later files
win), then the defaults below. Pressures carry an ``_mbar`` suffix, all other
quantities are SI unless the key says otherwise. Keys starting with ``wf_``
are passed to the waveform generator (``wf_peep_mbar = 13`` becomes
``peep=13 mbar``).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .units import MBAR


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    type: type
    default: object
    help: str


SCHEMA = {
    # randomness
    "seed": Key(int, 0, "single seed for tree asymmetry, collapsible marking and R/D draws"),
    # tree
    "tree_file": Key(str, "", "tree CSV; empty means generate"),
    "root_length": Key(float, 0.12, "trachea length, m"),
    "root_radius": Key(float, 0.009, "trachea radius, m"),
    "length_ratio": Key(float, 0.76, "daughter/parent length ratio"),
    "diameter_ratio_major": Key(float, 0.86, "major daughter diameter ratio"),
    "diameter_ratio_minor": Key(float, 0.70, "minor daughter diameter ratio"),
    "min_length": Key(float, 1.2e-3, "branching stops below this length, m"),
    "min_diameter": Key(float, 0.4e-3, "branching stops below this diameter, m"),
    "max_generation": Key(int, 17, "deepest generation"),
    "collapsible_fraction": Key(float, 0.2, "share of airways flagged collapsible (generated trees)"),
    "height_extent": Key(float, 0.18, "ventral-dorsal extent, m"),
    # recruitment
    "gamma": Key(float, 100.0, "surface tension, dyn/cm"),
    "s_o": Key(float, 0.04, "opening velocity scale, 1/(cmH2O s)"),
    "s_c": Key(float, 0.004, "closing velocity scale, 1/(cmH2O s)"),
    "initial_closed_mbar": Key(float, 24.0, "airways with higher opening pressure start closed"),
    # tissue
    "kappa_mbar": Key(float, 3.7, "elastic modulus"),
    "beta": Key(float, -2.4, "elastic exponent"),
    "visc_modulus_mbar": Key(float, 2.0, "Maxwell spring modulus per unit strain"),
    "visc_tau": Key(float, 2.0, "Maxwell time constant, s"),
    # pleura and volumes
    "p_pl0_mbar": Key(float, 10.15, "pleural pressure at V_PEEP"),
    "p_pl_lin_mbar": Key(float, 9.35, "pleural pressure rise from V_PEEP to V_max"),
    "h_balloon": Key(float, 0.09, "balloon height, m"),
    "lung_air": Key(float, 3.21e-3, "air volume at scan load, m^3"),
    "lung_tissue": Key(float, 1.0e-3, "tissue volume, m^3"),
    "inspiratory_capacity": Key(float, 1.5e-3, "V_max - V_PEEP, m^3"),
    "p_ct_mbar": Key(float, 10.0, "airway pressure during the scan"),
    "density_file": Key(str, "", "per-unit CSV unit_id,hu; empty means a synthetic gradient"),
    # solver
    "dt": Key(float, 1e-3, "time step, s"),
    "newton_tol": Key(float, 1e-8, "relative Newton tolerance"),
    "newton_max_iter": Key(int, 30, "Newton iteration cap"),
    "theta": Key(float, 1.0, "time integration blend in [0.5, 1]"),
    # scenario
    "waveform": Key(str, "ventilation", "generator name or waveform CSV path"),
    "duration": Key(float, 0.0, "simulated time, s; 0 means the whole waveform"),
    "warmup_breaths": Key(int, 0, "unrecorded ventilation cycles before the waveform"),
    "snapshot_times": Key(str, "", "comma separated times for strain snapshots, s"),
    "strain_mode": Key(str, "v0", "strain reference: v0 or eelv"),
    "record_every": Key(int, 1, "keep every n-th step in the metric stream"),
    "output_dir": Key(str, "out", "output directory"),
}

WAVEFORM_PREFIX = "wf_"


def _convert(key, raw):
    spec = SCHEMA[key]
    if isinstance(raw, spec.type) and not isinstance(raw, bool):
        return raw
    text = str(raw).strip()
    try:
        if spec.type is int:
            return int(text)
        if spec.type is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {spec.type.__name__}, got {text!r}") from None
    return text


def parse_text(text, source="<text>"):
    """Parse ``key = value`` lines; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_file(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_text(text, str(path))


def resolve(files=(), overrides=None):
    """Merged, typed configuration dict."""
    raw = {}
    for f in files:
        raw.update(load_file(f))
    raw.update(overrides or {})
    cfg = {k: spec.default for k, spec in SCHEMA.items()}
    for key, value in raw.items():
        if key.startswith(WAVEFORM_PREFIX):
            cfg[key] = _waveform_value(key, value)
        elif key in SCHEMA:
            cfg[key] = _convert(key, value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    validate(cfg)
    return cfg


def _waveform_value(key, value):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    return int(v) if v.is_integer() and not key.endswith("_mbar") else v


def validate(cfg):
    if not cfg["gamma"] > 0:
        raise ConfigError("gamma must be positive")
    if not cfg["dt"] > 0:
        raise ConfigError("dt must be positive")
    if not 0.5 <= cfg["theta"] <= 1.0:
        raise ConfigError("theta must lie in [0.5, 1]")
    if cfg["strain_mode"] not in ("v0", "eelv"):
        raise ConfigError("strain_mode must be v0 or eelv")
    if cfg["duration"] < 0 or cfg["warmup_breaths"] < 0 or cfg["record_every"] < 1:
        raise ConfigError("duration and warmup_breaths must be >= 0, record_every >= 1")
    for key in ("tree_file", "density_file"):
        if cfg[key] and not Path(cfg[key]).is_file():
            raise ConfigError(f"{key} {cfg[key]} does not exist")
    snapshot_times(cfg)


def snapshot_times(cfg):
    text = cfg["snapshot_times"].strip()
    if not text:
        return []
    try:
        return sorted(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"snapshot_times: bad list {text!r}") from None


def waveform_kwargs(cfg):
    """Generator keyword arguments, pressures converted to Pa."""
    out = {}
    for key, value in cfg.items():
        if not key.startswith(WAVEFORM_PREFIX):
            continue
        name = key[len(WAVEFORM_PREFIX):]
        if name.endswith("_mbar"):
            out[name[: -len("_mbar")]] = value * MBAR
        else:
            out[name] = value
    return out


def dump(cfg):
    lines = [f"{k} = {v}" for k, v in cfg.items()]
    return "\n".join(lines) + "\n"
