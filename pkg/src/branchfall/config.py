"""Run configuration: line-oriented parsing, per-kind schemas, builders.

The file format is one `key = value` pair per line; blank lines and lines
starting with # are skipped.  Every experiment kind declares its full key
set below; unknown keys are rejected by name so typos cannot silently fall
back to defaults.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

from .dynamics import (
    Potential,
    double_well_potential,
    free_potential,
    harmonic_potential,
)
from .pointer import PhasePartition, POVMSet, build_povm
from .qstate import GridSpec, PhasePoint

__all__ = [
    "ConfigError",
    "REQUIRED",
    "SCHEMAS",
    "parse_config",
    "validate_config",
    "load_config",
    "make_grid",
    "make_potential",
    "make_povm",
]


class ConfigError(ValueError):
    """Raised for malformed files, unknown keys, bad types, missing keys."""


REQUIRED = object()


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _pairs(s: str) -> tuple:
    """Semicolon-separated comma pairs: 'a,b; c,d' -> ((a, b), (c, d))."""
    out = []
    for chunk in s.split(";"):
        parts = [p.strip() for p in chunk.split(",")]
        if len(parts) != 2:
            raise ValueError(f"expected 'a,b' pair, got {chunk.strip()!r}")
        out.append((float(parts[0]), float(parts[1])))
    return tuple(out)


def _floats(s: str) -> tuple:
    return tuple(float(p.strip()) for p in s.split(",") if p.strip())


_BASE = {
    "kind": (str, REQUIRED),
    "seed": (int, 0),
    "out": (str, "runs"),
}

_GRID = {
    "grid_n": (int, 128),
    "x_min": (float, -10.0),
    "x_max": (float, 10.0),
    "mass": (float, 1.0),
}

_POTENTIAL = {
    "potential": (str, "harmonic"),
    "omega": (float, 1.0),
    "barrier": (float, 1.0),
    "half_separation": (float, 2.0),
}

_PACKET = {
    "q0": (float, 0.0),
    "p0": (float, 0.0),
    "sigma_x": (float, 1.0),
}

_WINDOW = {
    "window_x_lo": (float, REQUIRED),
    "window_x_hi": (float, REQUIRED),
    "window_p_lo": (float, REQUIRED),
    "window_p_hi": (float, REQUIRED),
    "cells_x": (int, REQUIRED),
    "cells_p": (int, REQUIRED),
    "povm_sigma_x": (float, None),
}

SCHEMAS = {
    "evolve": {
        **_BASE, **_GRID, **_POTENTIAL, **_PACKET,
        "lambda": (float, 0.0),
        "dt": (float, 0.01),
        "n_steps": (int, 100),
        "record_every": (int, 1),
    },
    "sieve": {
        **_BASE, **_GRID, **_POTENTIAL,
        "lambda": (float, REQUIRED),
        "sigma_list": (_floats, REQUIRED),
        "q0": (float, 0.0),
        "p0": (float, 0.0),
        "horizon": (float, 1.0),
        "dt": (float, 0.01),
    },
    "branch": {
        **_BASE, **_GRID, **_POTENTIAL, **_PACKET, **_WINDOW,
        "lambda": (float, REQUIRED),
        "dt": (float, REQUIRED),
        "n_steps": (int, REQUIRED),
        "dt_int": (float, None),
        "prune_epsilon": (float, 1e-4),
        "escape_tol": (float, 0.05),
        "leaf_cap": (int, 256),
    },
    "sample": {
        **_BASE, **_GRID, **_POTENTIAL, **_PACKET, **_WINDOW,
        "lambda": (float, REQUIRED),
        "dt": (float, REQUIRED),
        "n_steps": (int, REQUIRED),
        "dt_int": (float, None),
        "n_traj": (int, 100),
    },
    "explicit": {
        **_BASE, **_GRID, **_POTENTIAL, **_PACKET,
        "couplings": (_floats, REQUIRED),
        "env_energies": (_floats, None),
        "dt": (float, REQUIRED),
        "n_steps": (int, REQUIRED),
        "bins": (_pairs, None),
    },
    "grw": {
        **_BASE, **_GRID, **_POTENTIAL, **_PACKET,
        "hit_rate": (float, REQUIRED),
        "r_c": (float, REQUIRED),
        "total_time": (float, REQUIRED),
        "dt_int": (float, 0.01),
    },
    "bohm": {
        **_BASE, **_GRID, **_POTENTIAL, **_PACKET,
        "total_time": (float, REQUIRED),
        "dt": (float, 0.05),
        "ode_dt": (float, 0.0125),
        "n_traj": (int, 1000),
        "checkpoints": (_floats, None),
    },
    "ehrenfest": {
        **_BASE, **_GRID, **_POTENTIAL, **_PACKET,
        "lambda": (float, 0.0),
        "dt": (float, 0.01),
        "n_steps": (int, 100),
        "record_every": (int, 1),
        "delta_x": (float, REQUIRED),
        "delta_p": (float, REQUIRED),
        "l_v": (float, math.inf),
    },
    "reduce": {
        **_BASE, **_GRID, **_POTENTIAL, **_WINDOW,
        "sigma_x": (float, 1.0),
        "lambda": (float, REQUIRED),
        "delta_x": (float, REQUIRED),
        "delta_p": (float, REQUIRED),
        "tau_c": (float, REQUIRED),
        "epsilon": (float, 0.05),
        "n_traj": (int, 100),
        "dt": (float, REQUIRED),
        "dt_int": (float, REQUIRED),
        "d_c": (_pairs, REQUIRED),
        "l_v": (float, math.inf),
    },
}


def parse_config(text: str) -> dict:
    """Raw key -> string-value mapping; no typing or schema checks yet."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        raw[key] = value
    return raw


def validate_config(raw: dict) -> dict:
    """Type every value against the kind's schema; reject unknowns by name."""
    kind = raw.get("kind")
    if kind is None:
        raise ConfigError("missing required key 'kind'")
    if kind not in SCHEMAS:
        raise ConfigError(
            f"unknown kind '{kind}' (choose from {', '.join(sorted(SCHEMAS))})"
        )
    schema = SCHEMAS[kind]
    for key in raw:
        if key not in schema:
            raise ConfigError(f"unknown key '{key}' for kind '{kind}'")
    cfg = {}
    for key, (caster, default) in schema.items():
        if key in raw:
            try:
                cfg[key] = caster(raw[key])
            except (TypeError, ValueError) as err:
                raise ConfigError(f"bad value for key '{key}': {err}") from err
        elif default is REQUIRED:
            raise ConfigError(f"missing required key '{key}' for kind '{kind}'")
        else:
            cfg[key] = default
    if "povm_sigma_x" in cfg and cfg["povm_sigma_x"] is None:
        cfg["povm_sigma_x"] = cfg.get("sigma_x", 1.0)
    return cfg


def load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return validate_config(parse_config(fh.read()))


def make_grid(cfg: dict) -> GridSpec:
    return GridSpec(cfg["grid_n"], cfg["x_min"], cfg["x_max"], cfg["mass"])


def make_potential(cfg: dict) -> Potential:
    name = cfg["potential"]
    if name == "free":
        return free_potential()
    if name == "harmonic":
        return harmonic_potential(mass=cfg["mass"], omega=cfg["omega"])
    if name == "double_well":
        return double_well_potential(cfg["barrier"], cfg["half_separation"])
    raise ConfigError(
        f"unknown potential '{name}' (choose from free, harmonic, double_well)"
    )


def make_povm(cfg: dict, grid: GridSpec) -> POVMSet:
    partition = PhasePartition(
        (cfg["window_x_lo"], cfg["window_x_hi"]),
        (cfg["window_p_lo"], cfg["window_p_hi"]),
        cfg["cells_x"],
        cfg["cells_p"],
    )
    sigma = cfg["povm_sigma_x"]
    if sigma is None:
        sigma = cfg.get("sigma_x", 1.0)
    return build_povm(grid, partition, sigma)
