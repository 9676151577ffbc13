"""Run configuration: strict JSON schema, defaults and byte-stable echo.

Every section is optional except ``geometry`` and ``materials``.  Unknown keys
are rejected: a silent typo costs more than an error message.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import ConfigError

REQUIRED = ("geometry", "materials")

DEFAULTS = {
    "geometry": {"inclusion": {"type": "disk", "center": [0.5, 0.5], "radius": 0.25}, "h": 0.05},
    "materials": {"c_g": 1.0, "c_s": 1.0, "lambda_g": 1.0, "lambda_s": 1.0, "D": 1.0},
    "kinetics": {"A": 1.0, "T_a": 1.0, "Q": 1.0},
    "velocity": {"type": "zero"},
    "scales": {"L": 1.0, "b_c": 1.0, "D_c": 1.0, "lambda_gc": 1.0, "c_gc": 1.0, "c_sc": 1.0,
               "lambda_sc": 1.0, "A_c": 1.0, "Q_c": 1.0, "C_c": 1.0, "epsilon": 0.1,
               "T_a": None, "t_c": None},
    "cell": {"T0": 1.0, "C0": 0.5},
    "table": {"T0_range": [0.9, 1.4], "n_T0": 3, "C0_range": [0.4, 0.9], "n_C0": 3,
              "midpoint_check": False, "assert_upper_bound": True,
              "peclet_scales": [0.0, 0.5, 1.0, 2.0]},
    "macro": {"N": 128, "L": 1.0, "dt": 1e-3, "t_end": 0.05, "snapshot_every": 10,
              "epsilon": 0.25, "frames": "offset",
              "T0": {"type": "gaussian", "center": [0.5, 0.5], "width": 0.1, "amplitude": 0.2,
                     "floor": 1.0},
              "C0": {"type": "gaussian", "center": [0.5, 0.5], "width": 0.1, "amplitude": 0.3,
                     "floor": 0.5}},
    "micro": {"eps": [4, 8, 16], "dt": 1e-3, "T_f": 0.05, "snapshot_every": 1},
    "seed": 0,
    "threads": 1,
}

# sections whose values are free-form objects validated by their own parser
_OPAQUE = {("geometry", "inclusion"), ("velocity",), ("macro", "T0"), ("macro", "C0")}

_VELOCITY_KEYS = {"zero": {"type"}, "constant": {"type", "value"},
                  "cellular": {"type", "amplitude", "mean"}, "custom": {"type", "path"}}
_PROFILE_KEYS = {"constant": {"type", "value"},
                 "gaussian": {"type", "center", "width", "amplitude", "floor"},
                 "gaussian_periodic": {"type", "center", "width", "amplitude", "floor"}}


def _merge(base, user, path=()):
    if path in _OPAQUE:
        if not isinstance(user, dict):
            raise ConfigError(f"{'.'.join(path)} must be an object")
        return copy.deepcopy(user)
    if isinstance(base, dict):
        if not isinstance(user, dict):
            raise ConfigError(f"{'.'.join(path) or 'config'} must be an object")
        unknown = sorted(set(user) - set(base))
        if unknown:
            where = ".".join(path) or "top level"
            raise ConfigError(f"unknown key(s) {unknown} at {where}")
        out = copy.deepcopy(base)
        for k, v in user.items():
            out[k] = _merge(base[k], v, path + (k,))
        return out
    return copy.deepcopy(user)


def _num(d, key, path, *, lo=None, lo_open=True, hyp=None, integer=False, allow_none=False):
    v = d[key]
    name = f"{path}.{key}"
    if v is None and allow_none:
        return
    ok = isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
    if integer:
        ok = ok and float(v).is_integer()
    if not ok:
        raise ConfigError(f"{name} must be a finite {'integer' if integer else 'number'}, got {v!r}")
    if lo is not None and (v <= lo if lo_open else v < lo):
        cite = f" per {hyp}" if hyp else ""
        raise ConfigError(f"{name} must be {'>' if lo_open else '>='} {lo:g}{cite}, got {v!r}")


def _pair(v, name):
    if not (isinstance(v, list) and len(v) == 2
            and all(isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)
                    for x in v)):
        raise ConfigError(f"{name} must be a list of two finite numbers, got {v!r}")


def _check_keys(d, allowed, name):
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) {extra} in {name}")


def validate(data: dict) -> None:
    """Semantic checks; raises ConfigError naming the field and the hypothesis."""
    for k in ("c_g", "c_s", "lambda_g", "lambda_s", "D"):
        _num(data["materials"], k, "materials", lo=0, hyp="(H1)")
    kin = data["kinetics"]
    _num(kin, "A", "kinetics", lo=0, lo_open=False, hyp="(H1)")
    _num(kin, "T_a", "kinetics", lo=0, hyp="(H1)")
    _num(kin, "Q", "kinetics", lo=0, hyp="(H1)")
    _num(data["geometry"], "h", "geometry", lo=0)
    if data["geometry"]["h"] > 0.25:
        raise ConfigError(f"geometry.h must be <= 0.25, got {data['geometry']['h']}")

    vel = data["velocity"]
    kind = vel.get("type")
    if kind not in _VELOCITY_KEYS:
        raise ConfigError(f"velocity.type must be one of {sorted(_VELOCITY_KEYS)}, got {kind!r}")
    _check_keys(vel, _VELOCITY_KEYS[kind], "velocity")
    if kind == "constant":
        _pair(vel.get("value"), "velocity.value")
    elif kind == "cellular":
        amp = vel.get("amplitude", 1.0)
        if not (isinstance(amp, (int, float)) and math.isfinite(amp)):
            raise ConfigError(f"velocity.amplitude must be bounded per (H2), got {amp!r}")
        _pair(vel.get("mean", [0.0, 0.0]), "velocity.mean")
    elif kind == "custom" and not isinstance(vel.get("path"), str):
        raise ConfigError("velocity.path must name a CSV or .npy file with columns x, y, bx, by")

    for k, v in data["scales"].items():
        _num(data["scales"], k, "scales", lo=0, allow_none=k in ("T_a", "t_c"))
    if not data["scales"]["epsilon"] < 1:
        raise ConfigError("scales.epsilon must lie in (0, 1)")

    _num(data["cell"], "T0", "cell", lo=0, hyp="(H3)")
    _num(data["cell"], "C0", "cell", lo=0, lo_open=False, hyp="(H3)")

    tab = data["table"]
    _pair(tab["T0_range"], "table.T0_range")
    _pair(tab["C0_range"], "table.C0_range")
    if not 0 < tab["T0_range"][0] <= tab["T0_range"][1]:
        raise ConfigError(f"table.T0_range must be increasing and > 0 per (H3), got {tab['T0_range']}")
    if not 0 <= tab["C0_range"][0] <= tab["C0_range"][1]:
        raise ConfigError(f"table.C0_range must be increasing and >= 0 per (H3), got {tab['C0_range']}")
    for k in ("n_T0", "n_C0"):
        _num(tab, k, "table", lo=1, lo_open=False, integer=True)
    for k in ("midpoint_check", "assert_upper_bound"):
        if not isinstance(tab[k], bool):
            raise ConfigError(f"table.{k} must be true or false")
    ps = tab["peclet_scales"]
    if not (isinstance(ps, list) and all(isinstance(s, (int, float)) and not isinstance(s, bool)
                                         and math.isfinite(s) and s >= 0 for s in ps)):
        raise ConfigError("table.peclet_scales must be a list of nonnegative numbers")

    mac = data["macro"]
    _num(mac, "N", "macro", lo=4, lo_open=False, integer=True)
    for k in ("L", "dt", "epsilon"):
        _num(mac, k, "macro", lo=0)
    _num(mac, "t_end", "macro", lo=0, lo_open=False)
    _num(mac, "snapshot_every", "macro", lo=1, lo_open=False, integer=True)
    if mac["frames"] not in ("offset", "identified"):
        raise ConfigError(f"macro.frames must be 'offset' or 'identified', got {mac['frames']!r}")
    for k in ("T0", "C0"):
        prof = mac[k]
        pk = prof.get("type", "constant")
        if pk not in _PROFILE_KEYS:
            raise ConfigError(f"macro.{k}.type must be one of {sorted(_PROFILE_KEYS)}, got {pk!r}")
        _check_keys(prof, _PROFILE_KEYS[pk], f"macro.{k}")

    mic = data["micro"]
    eps = mic["eps"]
    if not (isinstance(eps, list) and eps and all(isinstance(n, int) and not isinstance(n, bool)
                                                  and n >= 2 for n in eps)):
        raise ConfigError(f"micro.eps must list integers n >= 2 (epsilon = 1/n), got {eps!r}")
    _num(mic, "dt", "micro", lo=0)
    _num(mic, "T_f", "micro", lo=0, lo_open=False)
    _num(mic, "snapshot_every", "micro", lo=1, lo_open=False, integer=True)
    _num(data, "seed", "config", lo=0, lo_open=False, integer=True)
    _num(data, "threads", "config", lo=1, lo_open=False, integer=True)


@dataclass
class RunConfig:
    data: dict
    base_dir: Path = dc_field(default_factory=Path.cwd)

    def __getitem__(self, key):
        return self.data[key]

    def section_hash_input(self, keys) -> str:
        return json.dumps({k: self.data[k] for k in keys}, sort_keys=True)

    def echo(self) -> str:
        return dump_json(self.data)

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dump_json(obj) -> str:
    """Sorted keys, two-space indent, shortest round-trip floats."""
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default, allow_nan=True) + "\n"


def from_dict(user: dict, base_dir=None) -> RunConfig:
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    missing = [k for k in REQUIRED if k not in user]
    if missing:
        raise ConfigError(f"config is missing required section(s) {missing}")
    data = _merge(DEFAULTS, user)
    validate(data)
    return RunConfig(data, Path(base_dir) if base_dir else Path.cwd())


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: "
                          f"{exc.msg}") from exc
    return from_dict(user, path.resolve().parent)
