"""INI scenario files with ``--set section.key=value`` overrides.

Every value is parsed as JSON when possible (numbers, lists, quoted strings)
and taken verbatim otherwise.  Recognised keys::

    [scenario]  base name bfield bfield_entries lo hi T inner
    [grid]      dx dt
    [coupling]  V G rho_width g_rho_width f_cutoff g_cutoff
    [m0]        kind lo hi mean std components weights
    [particles] n seed
    [picard]    theta fp_tol max_iter
    [shooting]  bvp_tol n_starts
    [validate]  scenarios
"""

from __future__ import annotations

import configparser
import json
from pathlib import Path

from .coupling import ScenarioConfig, scenario_by_name
from .errors import ConfigError, ConfigNotFoundError

_SCENARIO_KEYS = {
    ("scenario", "name"): "name",
    ("scenario", "bfield"): "bfield",
    ("scenario", "bfield_entries"): "bfield_entries",
    ("scenario", "lo"): "lo",
    ("scenario", "hi"): "hi",
    ("scenario", "t"): "T",
    ("scenario", "inner"): "inner",
    ("grid", "dx"): "dx",
    ("grid", "dt"): "dt",
    ("particles", "n"): "n_particles",
    ("particles", "seed"): "seed",
    ("picard", "theta"): "theta",
    ("picard", "fp_tol"): "fp_tol",
    ("picard", "max_iter"): "max_iter",
    ("shooting", "bvp_tol"): "bvp_tol",
    ("shooting", "n_starts"): "n_starts",
}
_COUPLING_KEYS = {"v": "V", "g": "G", "rho_width": "rho_width", "g_rho_width": "g_rho_width",
                  "f_cutoff": "f_cutoff", "g_cutoff": "g_cutoff"}
_M0_KEYS = {"kind", "lo", "hi", "mean", "std", "components", "weights"}


def parse_value(text: str):
    try:
        return json.loads(text)
    except (json.JSONDecodeError, TypeError):
        return text.strip()


def parse_override(item: str) -> tuple[str, str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    path, value = item.split("=", 1)
    if "." not in path:
        raise ConfigError(f"override key {path!r} needs a section prefix")
    section, key = path.strip().split(".", 1)
    return section.strip().lower(), key.strip().lower(), parse_value(value)


def read_ini(path) -> dict[str, dict[str, object]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigNotFoundError(f"config file {str(path)!r} not found")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return {s.lower(): {k.lower(): parse_value(v) for k, v in parser[s].items()} for s in parser.sections()}


def apply_entries(sc: ScenarioConfig, entries: dict[str, dict[str, object]]) -> ScenarioConfig:
    data = sc.to_dict()
    coupling = data["coupling"]
    m0 = dict(data["m0"])
    m0_new: dict = {}
    for section, items in entries.items():
        for key, value in items.items():
            if section == "scenario" and key == "base":
                continue
            if section == "validate":
                continue
            if section == "coupling":
                if key not in _COUPLING_KEYS:
                    raise ConfigError(f"unknown key coupling.{key}")
                coupling[_COUPLING_KEYS[key]] = value
            elif section == "m0":
                if key not in _M0_KEYS:
                    raise ConfigError(f"unknown key m0.{key}")
                m0_new[key] = value
            elif (section, key) in _SCENARIO_KEYS:
                data[_SCENARIO_KEYS[(section, key)]] = value
            else:
                raise ConfigError(f"unknown key {section}.{key}")
    if m0_new:
        m0 = m0_new if "kind" in m0_new else {**m0, **m0_new}
    data["m0"] = m0
    dim = len(data["lo"])
    coupling["dim"] = dim
    try:
        return ScenarioConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid scenario: {exc}") from None


def load_scenario(config_path=None, scenario: str | None = None, overrides=()) -> tuple[ScenarioConfig, dict]:
    """Resolve builtin base, file entries and overrides (in that order)."""
    entries = read_ini(config_path) if config_path is not None else {}
    base_name = scenario or entries.get("scenario", {}).get("base")
    if base_name is None:
        base_name = "identity2d-decoupled"
    sc = scenario_by_name(str(base_name))
    over: dict[str, dict[str, object]] = {}
    for item in overrides:
        section, key, value = parse_override(item)
        over.setdefault(section, {})[key] = value
    sc = apply_entries(sc, entries)
    sc = apply_entries(sc, over)
    return sc, {"entries": entries, "overrides": list(overrides), "base": base_name}
