"""Strict line-oriented experiment configuration.

Files use ``[section]`` headers and ``key = value`` lines (``#`` or ``;``
comments).  Every key must be known; unknown sections or keys, duplicates
and unparsable values are rejected with the offending name and line number.
"""
from __future__ import annotations

import configparser
import copy
from dataclasses import dataclass, field
from pathlib import Path

from .grid import Grid
from .integrators import TimeGrid
from .operators import PhysParams

SCENARIOS = (
    "forward",
    "backward-uniqueness",
    "duality-check",
    "stochastic",
    "lagrangian",
    "continuity",
    "attractor",
    "verify-operators",
)

# CLI subcommand -> scenario name
SUBCOMMANDS = {
    "simulate": "forward",
    "buniq": "backward-uniqueness",
    "duality": "duality-check",
    "stochastic": "stochastic",
    "lagrangian": "lagrangian",
    "continuity": "continuity",
    "attractor": "attractor",
    "verify-operators": "verify-operators",
}


class ConfigError(ValueError):
    """Invalid configuration (maps to exit status 2)."""


# schema: section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "run": {
        "scenario": (str, "forward"),
        "seed": (int, 0),
        "out": (str, "cbf_out"),
        "stride": (int, 10),
        "unsafe_regime": (bool, False),
        "max_halvings": (int, 8),
    },
    "grid": {"d": (int, 2), "L": (float, 1.0), "N": (int, 64)},
    "physics": {
        "mu": (float, 1e-2),
        "alpha": (float, 0.1),
        "beta": (float, 1.0),
        "r": (float, 3.0),
        "sigma": (float, 0.0),
    },
    "time": {"t0": (float, 0.0), "T": (float, 2.0), "dt": (float, 1e-3)},
    "initial": {
        "kind": (str, "taylor_green"),
        "amplitude": (float, 0.25),
        "wavenumber": (int, 1),
        "h_norm": (float, 0.25),
        "slope": (float, 3.0),
        "kmax": (int, 0),
    },
    "forcing": {
        "kind": (str, "zero"),
        "amplitude": (float, 1.0),
        "wavenumber": (int, 2),
    },
    "experiment": {
        "pairs": (int, 10),
        "perturbation": (float, 1e-2),
        "perturbation_kmax": (int, 8),
        "tolerance": (float, 1e-3),
        "paths": (int, 10),
        "particles": (int, 4),
        "pair_offset": (float, 1e-3),
        "truncations": (str, "4,8,16,32"),
        "n_initial": (int, 8),
        "burn_in": (float, 0.0),
        "n_snapshots": (int, 4),
        "spacing": (float, 1.0),
        "cutoffs": (str, "4,8,16,32"),
        "M0": (float, 0.0),
        "fields": (int, 20),
    },
}

# per-scenario overrides of the defaults above
PRESETS: dict[str, dict[str, dict[str, object]]] = {
    "forward": {},
    "backward-uniqueness": {},
    "duality-check": {"grid": {"N": 32}, "time": {"T": 0.5}, "initial": {"kind": "random", "h_norm": 0.5}, "experiment": {"pairs": 20, "tolerance": 1e-6}},
    "stochastic": {"physics": {"sigma": 0.5}},
    "lagrangian": {},
    "continuity": {"initial": {"kind": "tg_random", "h_norm": 0.1}},
    "attractor": {
        "grid": {"N": 32},
        "physics": {"mu": 1e-3},
        "time": {"dt": 5e-3},
        "initial": {"kind": "random", "h_norm": 1.0},
        "forcing": {"kind": "kolmogorov", "amplitude": 0.5, "wavenumber": 2},
    },
    "verify-operators": {"grid": {"N": 16}},
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class ExperimentConfig:
    scenario: str
    grid: Grid
    params: PhysParams
    tg: TimeGrid
    initial: dict
    forcing: dict
    experiment: dict
    seed: int = 0
    out: str = "cbf_out"
    stride: int = 10
    unsafe_regime: bool = False
    max_halvings: int = 8
    text: str = ""
    values: dict = field(default_factory=dict)

    @property
    def M0(self) -> float | None:
        m = self.experiment.get("M0", 0.0)
        return float(m) if m and m > 0 else None


def _convert(typ: type, raw: str, key: str, line: int):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {line}: cannot parse {key} = {raw!r} as {typ.__name__}") from None


def _locate(text: str) -> dict[tuple[str, str], int]:
    """Line numbers of ``key = value`` lines, keyed by (section, key)."""
    where: dict[tuple[str, str], int] = {}
    section = None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            where[(section, "")] = i
            continue
        for sep in ("=", ":"):
            if sep in s:
                where.setdefault((section, s.split(sep, 1)[0].strip().lower()), i)
                break
    return where


def default_values(scenario: str) -> dict:
    if scenario not in PRESETS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    vals = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    for sec, over in PRESETS[scenario].items():
        vals[sec].update(copy.deepcopy(over))
    vals["run"]["scenario"] = scenario
    return vals


def parse_config_text(text: str, scenario: str | None = None) -> dict:
    """Parse config text into a nested dict of typed values (preset defaults filled in)."""
    cp = configparser.ConfigParser(interpolation=None, strict=True, default_section="__none__")
    cp.optionxform = str.lower
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"parse error: {exc}") from None
    where = _locate(text)
    lower_schema = {sec: {k.lower(): k for k in keys} for sec, keys in SCHEMA.items()}
    file_scenario = None
    if cp.has_section("run") and cp.has_option("run", "scenario"):
        file_scenario = cp.get("run", "scenario").strip()
    if scenario and file_scenario and file_scenario != scenario:
        raise ConfigError(
            f"line {where.get(('run', 'scenario'), '?')}: config scenario {file_scenario!r} "
            f"does not match requested {scenario!r}"
        )
    vals = default_values(scenario or file_scenario or "forward")
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"line {where.get((sec, ''), '?')}: unknown section [{sec}]")
        for key, raw in cp.items(sec):
            line = where.get((sec, key), "?")
            if key not in lower_schema[sec]:
                raise ConfigError(f"line {line}: unknown key {key!r} in section [{sec}]")
            name = lower_schema[sec][key]
            typ = SCHEMA[sec][name][0]
            vals[sec][name] = _convert(typ, raw, name, line)
    return vals


def build_config(vals: dict, text: str = "") -> ExperimentConfig:
    run = vals["run"]
    if run["scenario"] not in SCENARIOS:
        raise ConfigError(f"unknown scenario {run['scenario']!r}")
    try:
        grid = Grid(vals["grid"]["d"], vals["grid"]["L"], vals["grid"]["N"])
        params = PhysParams(**vals["physics"])
        tg = TimeGrid(vals["time"]["t0"], vals["time"]["T"], vals["time"]["dt"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if run["stride"] < 1:
        raise ConfigError("stride must be >= 1")
    return ExperimentConfig(
        scenario=run["scenario"],
        grid=grid,
        params=params,
        tg=tg,
        initial=dict(vals["initial"]),
        forcing=dict(vals["forcing"]),
        experiment=dict(vals["experiment"]),
        seed=run["seed"],
        out=run["out"],
        stride=run["stride"],
        unsafe_regime=run["unsafe_regime"],
        max_halvings=run["max_halvings"],
        text=text,
        values=vals,
    )


def load_config(path=None, scenario: str | None = None) -> ExperimentConfig:
    """Load a config file (or the preset defaults when ``path`` is ``None``)."""
    if path is None:
        text = ""
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return build_config(parse_config_text(text, scenario), text)


def render_config(vals: dict) -> str:
    """Canonical text form of a value dict; parses back to the same values."""
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        for k in keys:
            v = vals[sec][k]
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


def int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in str(text).replace(" ", "").split(",") if s]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None
