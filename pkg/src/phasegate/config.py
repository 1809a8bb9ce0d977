"""Run configuration: TOML file -> validated nested dict -> domain objects.

Every physical quantity carries its unit in the key name.  Unknown blocks
or keys are rejected with the line they appear on.  A fully resolved
config is plain JSON-serializable data and is echoed into each run
manifest, which can itself be passed back as a config.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import re
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .compiler import DEFAULT_DELTA, DEFAULT_F, CompileConfig
from .dynamics import TWO_PI, StageTiming
from .lattice import BeamSpec, LatticeConfig
from .noise import NoiseConfig

ENV_VAR = "PHASEGATE_CONFIG"

EXPERIMENTS = ("fringe", "rb", "robustness", "spectrum", "phase-curve", "pattern", "echo-stress", "budget")

DEFAULTS: dict = {
    "run": {"experiment": "fringe", "seed": 0, "workers": 1, "out": "runs", "chunk": 25},
    "lattice": {"dims": [5, 5, 5], "spacing_um": 5.0, "fill_probability": 0.40, "occupancy": [],
                "neighbor_leakage": False},
    "beams": {"waist_um": 2.7, "rayleigh_range_um": 26.0},
    "gate": {"f_khz": DEFAULT_F / 1e3, "k": 1.8, "delta_khz": DEFAULT_DELTA / 1e3, "t_address_us": 120.0,
             "t_pi_us": 80.0, "ramp_us": 62.0, "settle_us": 70.0, "transfer_budget": 0.1,
             "omega_max_khz": 0.0},
    "noise": {"amplitude_jitter": 3e-3, "inhom_broadening_hz": 130.0, "f_spread": 0.02,
              "scattering_per_khz_s": 3.1e-2, "t2prime_s": 7.0, "spam_loss": 0.03, "spam_transfer": 0.02,
              "spam_clearing": 0.005},
    "analysis": {"norm_max": 0.95, "norm_min": 0.01, "bootstrap": 200},
    "fringe": {"theta_rad": math.pi / 2, "n_targets": 48, "alpha_points": 12, "shots": 100},
    "rb": {"lengths": [1, 2, 4, 6, 8, 12, 16, 24, 32], "cg_randomizations": 3, "pg_randomizations": 3,
           "pg_randomizations_nontarget": 4, "shots": 100, "targets": [[1, 1, 1], [3, 3, 3]],
           "classes": ["target", "nontarget"]},
    "robustness": {"frac_min": -0.1, "frac_max": 0.1, "points": 21, "shots": 100, "vary": "f",
                   "theta_rad": math.pi / 2},
    "spectrum": {"min_khz": -20.0, "max_khz": 120.0, "step_khz": 0.25, "probe_us": 400.0, "shots": 50},
    "phase_curve": {"step_khz": 0.1, "guard_khz": 3.0, "theta_rad": math.pi / 2},
    "pattern": {"theta_rad": math.pi, "shots": 100, "file": ""},
    "echo_stress": {"n_pulses": 100, "rabi_error_max": 0.01, "points": 21, "spacing_us": 314.0,
                    "schemes": ["cycled", "naive", "xy"]},
    "budget": {"theta_rad": math.pi / 2, "mc_shots": 0, "measure": False},
}


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<config>'}:{line}: " if line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


def _find_line(text: str, block: str | None, key: str | None) -> int | None:
    lines = text.splitlines()
    in_block = block is None
    for i, ln in enumerate(lines, 1):
        s = ln.strip()
        m = re.match(r"^\[\s*([^\]]+?)\s*\]", s)
        if m:
            in_block = m.group(1) == block
            if key is None and in_block:
                return i
            continue
        if in_block and key is not None and re.match(rf"^{re.escape(key)}\s*=", s):
            return i
        if block is not None and key is not None and re.match(rf"^{re.escape(block)}\.{re.escape(key)}\s*=", s):
            return i
    return None


def _check_type(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(f"{where} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise TypeError(f"{where} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise TypeError(f"{where} must be a list")
        return value
    return value


def merge(data: dict, text: str = "", path: str | None = None, base: dict | None = None) -> dict:
    """Overlay user data on defaults, rejecting unknown names and wrong types."""
    cfg = copy.deepcopy(base if base is not None else DEFAULTS)
    for block, body in data.items():
        if block not in DEFAULTS:
            raise ConfigError(f"unknown block [{block}]", _find_line(text, block, None), path)
        if not isinstance(body, dict):
            raise ConfigError(f"[{block}] must be a table", _find_line(text, None, block), path)
        for key, value in body.items():
            if key not in DEFAULTS[block]:
                raise ConfigError(f"unknown key {key!r} in [{block}]", _find_line(text, block, key), path)
            try:
                cfg[block][key] = _check_type(value, DEFAULTS[block][key], f"{block}.{key}")
            except TypeError as exc:
                raise ConfigError(str(exc), _find_line(text, block, key), path) from None
    validate(cfg, text, path)
    return cfg


def validate(cfg: dict, text: str = "", path: str | None = None) -> None:
    def bad(block, key, msg):
        raise ConfigError(f"{block}.{key}: {msg}", _find_line(text, block, key), path)

    if cfg["run"]["experiment"] not in EXPERIMENTS:
        bad("run", "experiment", f"must be one of {', '.join(EXPERIMENTS)}")
    if cfg["run"]["workers"] < 1:
        bad("run", "workers", "must be at least 1")
    if cfg["run"]["chunk"] < 1:
        bad("run", "chunk", "must be at least 1")
    if len(cfg["lattice"]["dims"]) != 3 or any(not isinstance(d, int) or d < 1 for d in cfg["lattice"]["dims"]):
        bad("lattice", "dims", "must be three positive integers")
    if not 0 <= cfg["lattice"]["fill_probability"] <= 1:
        bad("lattice", "fill_probability", "must lie in [0, 1]")
    for s in cfg["lattice"]["occupancy"]:
        if not (isinstance(s, list) and len(s) == 3 and all(isinstance(c, int) for c in s)):
            bad("lattice", "occupancy", "entries must be [x, y, z] integer triples")
    for key in ("f_khz", "t_address_us", "t_pi_us"):
        if not cfg["gate"][key] > 0:
            bad("gate", key, "must be positive")
    if not cfg["gate"]["k"] > 1:
        bad("gate", "k", "must exceed 1")
    if cfg["noise"]["t2prime_s"] < 0:
        bad("noise", "t2prime_s", "must be non-negative")
    lengths = cfg["rb"]["lengths"]
    if not lengths or any(not isinstance(l, int) or l < 1 for l in lengths) or \
            any(b <= a for a, b in zip(lengths, lengths[1:])):
        bad("rb", "lengths", "must be strictly increasing integers >= 1")
    if cfg["robustness"]["vary"] not in ("f", "delta"):
        bad("robustness", "vary", "must be 'f' or 'delta'")
    if not -0.1 - 1e-12 <= cfg["robustness"]["frac_min"] <= cfg["robustness"]["frac_max"] <= 0.1 + 1e-12:
        bad("robustness", "frac_min", "grid must lie within [-0.1, 0.1]")
    if cfg["echo_stress"]["n_pulses"] < 1:
        bad("echo_stress", "n_pulses", "must be positive")
    for name in cfg["echo_stress"]["schemes"]:
        if name not in ("cycled", "naive", "xy"):
            bad("echo_stress", "schemes", f"unknown scheme {name!r}")
    if "cycled" in cfg["echo_stress"]["schemes"] and cfg["echo_stress"]["n_pulses"] % 4:
        bad("echo_stress", "n_pulses", "must be a multiple of 4 for the cycled scheme")


def parse_value(text: str):
    """Parse an override value as a TOML scalar or array, else a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``block.key=value`` strings on top of a resolved config."""
    data: dict = {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        name, value = item.split("=", 1)
        if "." not in name:
            raise ConfigError(f"override {name!r} needs a block, e.g. gate.f_khz")
        block, key = name.strip().split(".", 1)
        data.setdefault(block, {})[key] = parse_value(value.strip())
    return merge(data, base=cfg) if data else cfg


def load(path: str | os.PathLike | None = None, overrides=()) -> dict:
    """Resolve a config from a TOML file or an emitted manifest (.json).

    Without a path the env var is consulted, then the built-in defaults.
    """
    if path is None:
        path = os.environ.get(ENV_VAR) or None
    if path is None:
        cfg = merge({})
    else:
        p = Path(path)
        text = p.read_text()
        if p.suffix == ".json":
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(exc.msg, exc.lineno, str(p)) from None
            cfg = merge(data.get("config", data), path=str(p))
        else:
            try:
                data = tomllib.loads(text)
            except tomllib.TOMLDecodeError as exc:
                m = re.search(r"line (\d+)", str(exc))
                raise ConfigError(str(exc), int(m.group(1)) if m else None, str(p)) from None
            cfg = merge(data, text, str(p))
    return apply_overrides(cfg, overrides)


def config_hash(cfg: dict, extra: bytes = b"") -> str:
    """Content hash of the resolved config plus any input files."""
    h = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode())
    h.update(extra)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Builders


def timing_of(cfg: dict) -> StageTiming:
    g = cfg["gate"]
    return StageTiming(g["ramp_us"] * 1e-6, g["settle_us"] * 1e-6, g["t_address_us"] * 1e-6, g["t_pi_us"] * 1e-6)


def lattice_of(cfg: dict) -> LatticeConfig:
    lat = cfg["lattice"]
    occ = tuple(tuple(s) for s in lat["occupancy"]) or None
    return LatticeConfig(tuple(lat["dims"]), lat["spacing_um"], lat["fill_probability"], occ,
                         lat["neighbor_leakage"])


def compile_config_of(cfg: dict) -> CompileConfig:
    g = cfg["gate"]
    b = cfg["beams"]
    beam = BeamSpec("x", 0, 0, waist=b["waist_um"], rayleigh_range=b["rayleigh_range_um"])
    om = g["omega_max_khz"]
    return CompileConfig(g["f_khz"] * 1e3, g["k"], g["delta_khz"] * 1e3, timing_of(cfg), g["transfer_budget"],
                         TWO_PI * om * 1e3 if om > 0 else None, lattice_of(cfg), beam)


def noise_of(cfg: dict) -> NoiseConfig:
    n = cfg["noise"]
    return NoiseConfig(n["amplitude_jitter"], n["inhom_broadening_hz"], n["f_spread"], n["scattering_per_khz_s"],
                       n["t2prime_s"], n["spam_loss"], n["spam_transfer"], n["spam_clearing"])


def setup_of(cfg: dict):
    from .experiments import Setup

    cc = compile_config_of(cfg)
    return Setup(cc, cc.lattice, noise_of(cfg), cfg["run"]["seed"], cfg["run"]["workers"], cfg["run"]["chunk"])


def with_run(cfg: dict, **kw) -> dict:
    out = copy.deepcopy(cfg)
    out["run"].update({k: v for k, v in kw.items() if v is not None})
    validate(out)
    return out
