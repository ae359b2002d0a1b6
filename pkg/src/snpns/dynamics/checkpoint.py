"""Checkpoints: field records plus a JSON sidecar.

``<name>.bin`` holds the velocity, the concentrations, the body force and the
noise shapes as consecutive field records; ``<name>.json`` holds the clock,
the parameters, the amplitudes and the exact bit-generator states, so a
resumed run reproduces the uninterrupted one bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..fields import Grid, decode_records, encode_records
from .model import CouplingClock, Model, NoiseSpec, SpeciesParams, SystemState

VERSION = 1


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".bin", ".json"):
        p = p.with_suffix("")
    return p.with_suffix(".bin"), p.with_suffix(".json")


def save_checkpoint(path, state: SystemState, extra: dict | None = None) -> Path:
    """Write ``state`` to ``path.bin``/``path.json``; returns the sidecar path."""
    binp, jsonp = _paths(path)
    binp.parent.mkdir(parents=True, exist_ok=True)
    m = state.model
    g = m.grid
    blob = b"".join([encode_records(g, state.u), encode_records(g, state.c),
                     encode_records(g, m.forcing), encode_records(g, m.noise.modes)])
    binp.write_bytes(blob)
    meta = {
        "version": VERSION,
        "grid": g.describe(),
        "t": state.t,
        "step_index": state.step_index,
        "n_paths": state.n_paths if state.batched else None,
        "species": [s.to_dict() for s in m.species],
        "gamma": m.gamma,
        "nonlinear": m.nonlinear,
        "clamp": m.clamp,
        "noise": {"amplitudes": m.noise.amplitudes.tolist(),
                  "eigenvalues": m.noise.eigenvalues.tolist(), "label": m.noise.label,
                  "count": m.noise.count},
        "rng": [r.bit_generator.state for r in state.rngs],
        "clamp_events": state.clamp_events,
        "clock": None if state.clock is None else {
            "integral": state.clock.integral.tolist(), "fired": state.clock.fired.tolist(),
            "tau": [None if np.isnan(x) else x for x in state.clock.tau]},
        "extra": extra or {},
    }
    jsonp.write_text(json.dumps(meta, indent=1, sort_keys=True))
    return jsonp


def load_checkpoint(path) -> tuple[SystemState, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(state, extra)``."""
    binp, jsonp = _paths(path)
    meta = json.loads(jsonp.read_text())
    if meta.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    g = Grid(**meta["grid"])
    grid, slabs = decode_records(binp.read_bytes())
    if grid != g:
        raise ValueError("checkpoint records do not match the sidecar grid")
    species = tuple(SpeciesParams.from_dict(d) for d in meta["species"])
    N = len(species)
    P = meta["n_paths"]
    nu = 2 * (P or 1)
    nc = N * (P or 1)
    M = meta["noise"]["count"]
    u = slabs[:nu]
    c = slabs[nu:nu + nc]
    f = slabs[nu + nc:nu + nc + 2]
    modes = slabs[nu + nc + 2:nu + nc + 2 + 2 * M].reshape((M, 2) + g.shape)
    if P:
        u = u.reshape((P, 2) + g.shape)
        c = c.reshape((P, N) + g.shape)
    else:
        c = c.reshape((N,) + g.shape)
    noise = NoiseSpec(g, modes, meta["noise"]["amplitudes"], meta["noise"]["eigenvalues"],
                      meta["noise"]["label"])
    model = Model(g, species, noise, f, meta["gamma"], meta["nonlinear"], meta["clamp"])
    rngs = []
    for st in meta["rng"]:
        bg = getattr(np.random, st["bit_generator"])()
        bg.state = st
        rngs.append(np.random.Generator(bg))
    clock = None
    if meta["clock"] is not None:
        clock = CouplingClock(np.array(meta["clock"]["integral"]), np.array(meta["clock"]["fired"]),
                              np.array([np.nan if x is None else x for x in meta["clock"]["tau"]]))
    state = SystemState(model, u, c, meta["t"], tuple(rngs), meta["step_index"],
                        clamp_events=meta["clamp_events"], clock=clock)
    return state, meta["extra"]
