"""Line-oriented run configuration.

Each non-blank line is ``section.key = value`` (a few top-level keys have no
section). ``#`` starts a comment. Lists are comma separated. Every key is
validated; unknown and repeated keys are errors reported with line numbers.

Example::

    domain = torus
    grid.nx = 64
    grid.ny = 64
    species.D = 1.0, 1.0
    species.z = 1, -1
    noise.modes = 8
    noise.amplitude = 0.1
    forcing.preset = taylor_green
    time.dt = 0.01
    time.T = 1.0
    run.experiment = simulate
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .dynamics.initial import (Neutral, SteadyPlusPerturbation, TwoSpeciesPaper, make_initial_data,
                               neutral_means)
from .dynamics.model import BC, Model, NoiseSpec, SpeciesParams, SystemState, forcing_preset
from .errors import ConfigError
from .fields import Domain, Grid

LOCATION_KEYS = ("run.out", "run.threads")

EXPERIMENTS = ("simulate", "decay", "picard", "identities", "elliptic", "kb", "couple",
               "expergo", "moments")


def _num(kind: type) -> Callable[[str], Any]:
    def conv(v: str):
        try:
            if kind is int:
                f = float(v)
                if f != int(f):
                    raise ValueError
                return int(f)
            return float(v)
        except ValueError:
            raise ValueError(f"expected {kind.__name__}, got {v!r}") from None
    return conv


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _list(conv: Callable) -> Callable[[str], list]:
    def parse(v: str):
        items = [x.strip() for x in v.split(",")]
        if items == [""]:
            return []
        return [conv(x) for x in items]
    return parse


def _choice(*options: str) -> Callable[[str], str]:
    def parse(v: str):
        low = v.strip().lower()
        if low not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {v!r}")
        return low
    return parse


def _preset(v: str):
    m = re.fullmatch(r"\s*([a-z_]+)\s*(?:\(([^)]*)\))?\s*", v.lower())
    if not m:
        raise ValueError(f"malformed forcing preset {v!r}")
    name, args = m.group(1), m.group(2)
    if name not in ("none", "taylor_green", "single_mode", "bump"):
        raise ValueError(f"unknown forcing preset {name!r}")
    params = [float(a) for a in args.split(",")] if args and args.strip() else []
    return name, params


_float, _int = _num(float), _num(int)

# key -> (converter, default)
SCHEMA: dict[str, tuple[Callable, Any]] = {
    "domain": (_choice("torus", "square"), "torus"),
    "grid.nx": (_int, 64),
    "grid.ny": (_int, None),
    "species.D": (_list(_float), [1.0, 1.0]),
    "species.z": (_list(_float), [1.0, -1.0]),
    "species.bc": (_list(_choice("periodic", "dirichlet", "blocking")), None),
    "species.gamma": (_list(_float), None),
    "species.means": (_list(_float), None),
    "boundary.gamma": (_float, 0.0),
    "noise.modes": (_int, 0),
    "noise.amplitude": (_float, 0.0),
    "forcing.preset": (_preset, ("none", [])),
    "forcing.amplitude": (_float, 1.0),
    "initial.kind": (_choice("neutral", "steady", "two_species"), "neutral"),
    "initial.amplitude": (_float, 0.5),
    "initial.velocity": (_float, 1.0),
    "initial.eps": (_float, 0.0),
    "initial.kmax": (_int, 3),
    "initial.seed": (_int, None),
    "time.dt": (_float, 0.01),
    "time.T": (_float, 1.0),
    "time.record_every": (_int, 10),
    "run.seed": (_int, 0),
    "run.experiment": (_choice(*EXPERIMENTS), "simulate"),
    "run.out": (str, "out"),
    "run.threads": (_int, None),
    "run.n_paths": (_int, 1),
    "run.nonlinear": (_bool, True),
    "run.clamp": (_bool, False),
    "run.checkpoint_every": (_int, 0),
    "decay.p": (_int, 4),
    "decay.eps": (_float, 0.05),
    "decay.window": (_list(_float), []),
    "picard.T0": (_float, 0.05),
    "picard.m_max": (_int, 40),
    "picard.tol": (_float, 1e-12),
    "identities.samples": (_int, 50),
    "identities.kmax": (_int, 8),
    "elliptic.samples": (_int, 100),
    "elliptic.resolutions": (_list(_int), [64, 128, 256]),
    "elliptic.spectrum": (_choice("pink", "white"), "pink"),
    "kb.T_list": (_list(_float), [50.0, 100.0, 200.0]),
    "kb.other_seed": (_int, 1),
    "couple.lambda": (_float, 64.0),
    "couple.n_modes": (_int, 16),
    "couple.n_sweep": (_list(_int), []),
    "couple.budget": (_float, 10.0),
    "couple.threshold": (_float, 1e-6),
    "couple.other_seed": (_int, 1),
    "expergo.t_grid": (_list(_float), [1.0, 2.0, 4.0, 8.0]),
    "expergo.reference_T": (_float, 50.0),
    "expergo.spacing": (_float, 1.0),
    "expergo.n_spacings": (_int, 10),
    "moments.quantity": (_choice("energylinear", "energyquartic", "chargeexp", "torusquadratic",
                                 "logh1"), "energylinear"),
    "moments.eta": (_float, None),
}


@dataclass
class RunConfig:
    """Fully resolved configuration; ``values`` maps every schema key to its value."""

    values: dict[str, Any]
    lines: dict[str, int] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    # -- derived views ------------------------------------------------------

    @property
    def domain(self) -> Domain:
        return Domain.parse(self.values["domain"])

    @property
    def experiment(self) -> str:
        return self.values["run.experiment"]

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    @property
    def dt(self) -> float:
        return self.values["time.dt"]

    @property
    def T(self) -> float:
        return self.values["time.T"]

    @property
    def grid(self) -> Grid:
        return Grid(self.values["grid.nx"], self.values["grid.ny"], self.domain)

    @property
    def species(self) -> tuple[SpeciesParams, ...]:
        v = self.values
        return _species(v)

    def to_dict(self) -> dict:
        out = {}
        for k, val in self.values.items():
            out[k] = list(val) if isinstance(val, tuple) else val
        return out

    def to_text(self, full: bool = False) -> str:
        """Canonical text form; parsing it gives back an equal configuration.

        The output directory and thread count do not affect results and are
        left out unless ``full`` is set, so the text (and :meth:`digest`)
        depends only on what determines the numbers.
        """
        rows = []
        for k in SCHEMA:
            v = self.values[k]
            if v is None or (k in LOCATION_KEYS and not full):
                continue
            rows.append(f"{k} = {_format(k, v)}")
        return "\n".join(rows) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "RunConfig":
        vals = dict(self.values)
        for k, v in kw.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            vals[key] = v
        return RunConfig(vals, dict(self.lines))

    # -- construction of the numerical objects --------------------------------

    def build_model(self) -> Model:
        v = self.values
        grid = self.grid
        noise = NoiseSpec.lowest(grid, v["noise.modes"], v["noise.amplitude"]) if v["noise.modes"] \
            else NoiseSpec.none(grid)
        name, params = v["forcing.preset"]
        f = forcing_preset(grid, name, v["forcing.amplitude"], params)
        return Model(grid, self.species, noise, f, v["boundary.gamma"], v["run.nonlinear"], v["run.clamp"])

    def initial_kind(self, seed: int | None = None):
        v = self.values
        s = v["initial.seed"] if seed is None else seed
        s = self.seed if s is None else s
        kind = v["initial.kind"]
        if kind == "steady":
            return SteadyPlusPerturbation(v["initial.eps"], s)
        if kind == "two_species":
            return TwoSpeciesPaper(s)
        return Neutral(s)

    def initial_state(self, model: Model | None = None, seed: int | None = None) -> SystemState:
        v = self.values
        model = model or self.build_model()
        return make_initial_data(self.initial_kind(seed), model, v["species.means"],
                                 v["initial.amplitude"], v["initial.velocity"], v["initial.kmax"],
                                 noise_seed=self.seed)


def _format(key: str, v) -> str:
    if key == "forcing.preset":
        name, params = v
        return name if not params else f"{name}({', '.join(repr(p) for p in params)})"
    if isinstance(v, (list, tuple)):
        return ", ".join(_format("", x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _species(v: dict) -> tuple[SpeciesParams, ...]:
    # gamma only applies to Dirichlet species; the list entry is ignored otherwise
    return tuple(SpeciesParams(D, z, BC.parse(bc), g if bc == "dirichlet" else None)
                 for D, z, bc, g in zip(v["species.D"], v["species.z"], v["species.bc"],
                                        v["species.gamma"]))


def _resolve(values: dict[str, Any], lines: dict[str, int]) -> None:
    """Fill dependent defaults and check cross-field consistency."""
    def fail(msg, *keys):
        ln = min((lines[k] for k in keys if k in lines), default=None)
        raise ConfigError(msg, ln)

    if values["grid.ny"] is None:
        values["grid.ny"] = values["grid.nx"]
    try:
        Grid(values["grid.nx"], values["grid.ny"], Domain.parse(values["domain"]))
    except ValueError as exc:
        fail(str(exc), "grid.nx", "grid.ny", "domain")
    torus = values["domain"] == "torus"
    n = len(values["species.D"])
    if n == 0:
        fail("at least one species is required", "species.D")
    if len(values["species.z"]) != n:
        fail(f"species.z has {len(values['species.z'])} entries for {n} species", "species.z")
    if values["species.bc"] is None:
        values["species.bc"] = ["periodic" if torus else "blocking"] * n
    if len(values["species.bc"]) != n:
        fail(f"species.bc has {len(values['species.bc'])} entries for {n} species", "species.bc")
    for bc in values["species.bc"]:
        if torus and bc != "periodic":
            fail(f"boundary condition {bc!r} is not available on the torus", "species.bc", "domain")
        if not torus and bc == "periodic":
            fail("periodic species are not available on the square", "species.bc", "domain")
    if values["species.gamma"] is None:
        values["species.gamma"] = [0.0] * n
    if len(values["species.gamma"]) != n:
        fail(f"species.gamma has {len(values['species.gamma'])} entries for {n} species", "species.gamma")
    if values["species.means"] is None:
        values["species.means"] = [1.0] * n
    if len(values["species.means"]) not in (1, n):
        fail(f"species.means has {len(values['species.means'])} entries for {n} species", "species.means")
    for key in ("species.D",):
        if any(d <= 0 for d in values[key]):
            fail("diffusivities must be positive", key)
    for key in ("time.dt", "picard.T0"):
        if values[key] <= 0:
            fail(f"{key} must be positive", key)
    for key in ("time.T", "noise.amplitude"):
        if values[key] < 0:
            fail(f"{key} must be nonnegative", key)
    for key in ("time.record_every", "run.n_paths", "identities.samples", "elliptic.samples"):
        if values[key] < 1:
            fail(f"{key} must be at least 1", key)
    if values["run.threads"] is None:
        values["run.threads"] = os.cpu_count() or 1
    try:
        species = _species(values)
    except (ValueError, ConfigError) as exc:
        fail(str(exc), "species.D", "species.z", "species.bc", "species.gamma")
    if values["initial.kind"] == "two_species":
        if not torus or n != 2 or list(values["species.z"]) != [1.0, -1.0] \
                or values["species.D"][0] != values["species.D"][1]:
            fail("two_species initial data needs two torus species with z = 1, -1 and equal D",
                 "initial.kind")
    else:
        # electroneutrality feasibility, before any compute
        stub = _StubModel(species)
        try:
            values["species.means"] = [float(x) for x in neutral_means(stub, values["species.means"])]
        except ConfigError as exc:
            fail(str(exc), "species.means", "species.z", "species.gamma")


class _StubModel:
    """Just enough of :class:`Model` for :func:`neutral_means`."""

    def __init__(self, species):
        self.species = species
        self.n_species = len(species)
        self.z = np.array([s.z for s in species])


def parse_config(text: str) -> RunConfig:
    """Parse and validate configuration text; see the module docstring for the format."""
    seen: dict[str, int] = {}
    values: dict[str, Any] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", ln)
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", ln)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", ln)
        seen[key] = ln
        conv = SCHEMA[key][0]
        try:
            values[key] = conv(val)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", ln) from None
    full = {k: (values[k] if k in values else _copy(default)) for k, (_, default) in SCHEMA.items()}
    _resolve(full, seen)
    return RunConfig(full, seen)


def _copy(v):
    return list(v) if isinstance(v, list) else v


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, default=str)


__all__ = ["EXPERIMENTS", "SCHEMA", "RunConfig", "parse_config", "load_config", "config_json"]
