"""Run configuration: a strict INI schema and the shipped scenario presets."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .grid import Grid
from .model import BiChannelSystem, PotentialSpec, build_system


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _arcs(s: str):
    s = s.strip()
    if s.lower() in ("", "none", "empty"):
        return ()
    out = []
    for part in s.split(","):
        a, b = part.split(":")
        out.append((float(a), float(b)))
    return tuple(out)


def _auto_float(s: str):
    return None if s.strip().lower() == "auto" else float(s)


def _files(s: str):
    if s.strip().lower() == "none":
        return ()
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _choice(*options):
    def parse(s):
        v = s.strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return v

    return parse


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "mode": (_choice("pde", "sde", "both"), "pde"),
        "label": (str, ""),
    },
    "potential": {
        "family": (_choice("gaussian-channel", "double-well", "tabulated"), "gaussian-channel"),
        "a": (float, 0.5),
        "h": (float, 1.0),
        "sigma": (float, 1.0),
        "beta": (float, 4.0),
        "lambda": (float, 1.0),
        "exclusion": (_arcs, ((0.25, 0.75),)),
        "files": (_files, ()),
    },
    "grid": {
        "n_x": (int, 128),
        "n_y": (int, 128),
        "L": (_auto_float, None),
    },
    "initial": {
        "kind": (_choice("concentrated", "stationary", "cosine"), "concentrated"),
        "x0": (float, 0.5),
        "kappa": (float, 1.0),
        "channel": (int, 0),
        "amplitude": (float, 0.5),
    },
    "pde": {
        "t_end": (float, 1.0),
        "dt": (_auto_float, None),
        "record_every": (int, 1000),
        "snapshots": (_choice("all", "final", "none"), "final"),
        "adaptive_bias": (_bool, True),
    },
    "sde": {
        "N": (int, 100_000),
        "dt": (float, 1e-3),
        "t_end": (float, 0.5),
        "record_every": (int, 100),
        "n_bins": (int, 64),
        "n_min": (int, 10),
        "n_ramp": (int, 100),
        "seed": (int, 0),
        "adaptive_bias": (_bool, True),
        "hist_nx": (int, 8),
        "hist_ny": (int, 8),
    },
    "diagnostics": {
        "fit_fraction": (float, 0.5),
        "floor": (float, 1e-12),
        "l1_tolerance": (float, 0.05),
    },
    "spectral": {
        "epsilon_fraction": (float, 0.05),
        "alpha": (_choice("fixed", "optimal"), "fixed"),
        "slack": (float, 0.95),
    },
}

POSITIVE = {
    ("grid", "n_x"), ("grid", "n_y"), ("pde", "t_end"), ("pde", "record_every"),
    ("sde", "N"), ("sde", "dt"), ("sde", "t_end"), ("sde", "record_every"), ("sde", "n_bins"),
    ("sde", "hist_nx"), ("sde", "hist_ny"), ("potential", "sigma"), ("potential", "beta"),
    ("diagnostics", "fit_fraction"), ("diagnostics", "l1_tolerance"),
    ("spectral", "epsilon_fraction"), ("spectral", "slack"),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    source: str = ""

    def get(self, section: str, key: str):
        return self.values[section][key]

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def mode(self) -> str:
        return self.values["run"]["mode"]

    def potential_spec(self) -> PotentialSpec:
        p = dict(self.values["potential"])
        family = p.pop("family")
        return PotentialSpec(family, p)

    def system(self) -> BiChannelSystem:
        return build_system(self.potential_spec())

    def grid(self, system: Optional[BiChannelSystem] = None) -> Grid:
        g = self.values["grid"]
        L = g["L"]
        if L is None:
            system = system or self.system()
            if system.channels[0].extendable:
                L = system.default_half_extent()
            else:
                L = system.channels[0].grid.L
        return Grid(g["n_x"], g["n_y"], float(L))

    def with_overrides(self, **kv) -> "RunConfig":
        vals = {s: dict(d) for s, d in self.values.items()}
        for dotted, v in kv.items():
            s, k = dotted.split(".")
            vals[s][k] = v
        return replace(self, values=vals)

    def to_ini(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for k in keys:
                lines.append(f"{k} = {_format(self.values[section][k])}")
            lines.append("")
        return "\n".join(lines)


def _format(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ", ".join(f"{a!r}:{b!r}" for a, b in v)
        return ", ".join(str(x) for x in v) if v else "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _defaults() -> dict:
    return {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}


def parse_config(text: str, base: Optional[RunConfig] = None, source: str = "<string>") -> RunConfig:
    """Parse INI text on top of ``base`` (or the defaults); unknown sections and keys are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    vals = {s: dict(d) for s, d in (base.values if base else _defaults()).items()}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            parser = SCHEMA[section][key][0]
            try:
                v = parser(raw)
            except (ValueError, TypeError) as e:
                raise ConfigError(f"{source}: bad value for {section}.{key}: {e}") from e
            if (section, key) in POSITIVE and not v > 0:
                raise ConfigError(f"{source}: {section}.{key} must be positive, got {raw!r}")
            vals[section][key] = v
    if vals["potential"]["lambda"] < 0:
        raise ConfigError(f"{source}: potential.lambda must be nonnegative")
    if not 0 <= vals["sde"]["seed"] < 2**64:
        raise ConfigError(f"{source}: sde.seed must be a 64-bit unsigned integer")
    if vals["initial"]["channel"] not in (0, 1):
        raise ConfigError(f"{source}: initial.channel must be 0 or 1")
    return RunConfig(vals, source)


def load_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), base, str(path))


PRESETS = {
    "bichannel-default": """
[run]
label = bichannel-default
[potential]
family = gaussian-channel
a = 0.5
h = 2.0
sigma = 1.0
lambda = 5.0
exclusion = 0.25:0.75
[grid]
n_x = 128
n_y = 128
[initial]
kind = concentrated
[pde]
t_end = 8.0
record_every = 4096
""",
    "bichannel-h4": """
[run]
label = bichannel-h4
[potential]
family = gaussian-channel
a = 0.02
h = 0.05
sigma = 1.0
lambda = 20.0
exclusion = 0.25:0.75
[grid]
n_x = 128
n_y = 128
[initial]
kind = concentrated
kappa = 0.1
[pde]
t_end = 3.0
record_every = 2048
""",
    "remark2-lambda": """
[run]
label = remark2-lambda
[potential]
family = gaussian-channel
a = 0.5
h = 0.0
sigma = 1.0
lambda = 1.0
exclusion = none
[grid]
n_x = 64
n_y = 64
[initial]
kind = concentrated
[pde]
t_end = 4.0
record_every = 1024
""",
    "heat-only": """
[run]
label = heat-only
[potential]
family = gaussian-channel
a = 0.0
h = 0.0
sigma = 1.0
lambda = 1.0
exclusion = none
[grid]
n_x = 256
n_y = 8
[initial]
kind = cosine
amplitude = 0.5
[pde]
t_end = 0.1
record_every = 512
""",
    "doublewell-lsi": """
[run]
label = doublewell-lsi
[potential]
family = double-well
beta = 4.0
a = 0.5
lambda = 1.0
exclusion = 0.25:0.75
[grid]
n_x = 64
n_y = 128
[initial]
kind = concentrated
[pde]
t_end = 1.0
record_every = 1024
""",
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return parse_config(PRESETS[name], source=f"preset:{name}")
