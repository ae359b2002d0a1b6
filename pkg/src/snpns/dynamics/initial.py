"""Initial-data generators that respect the neutrality constraints."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from ..fields import torus_ops
from .model import BC, Model, NoiseSpec, SystemState, path_rngs

# spawn key reserved for drawing initial fields, kept apart from path streams
_DATA_KEY = 2**30


@dataclass(frozen=True)
class Neutral:
    seed: int = 0


@dataclass(frozen=True)
class SteadyPlusPerturbation:
    eps: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class TwoSpeciesPaper:
    seed: int = 0


def neutral_means(model: Model, means: Sequence[float] | None) -> np.ndarray:
    """Adjust the requested means of the mean-conserving species.

    Torus: ``sum z_i m_i = 0``. Square: ``sum_Dir z_i gamma_i + sum_Blk z_i m_i = 0``.
    Species of one sign keep their means and the opposite sign is rescaled;
    if no rescaling with a nonnegative factor works the request is rejected.
    """
    n = model.n_species
    m = np.ones(n) if means is None else np.array(means, dtype=float).reshape(-1)
    if m.size == 1:
        m = np.full(n, m[0])
    if m.size != n:
        raise ConfigError(f"{m.size} means given for {n} species")
    if np.any(m < 0):
        raise ConfigError("species means must be nonnegative")
    z = model.z
    free = np.array([s.bc is not BC.DIRICHLET for s in model.species])
    fixed = sum(s.z * s.gamma for s in model.species if s.bc is BC.DIRICHLET)
    pos = free & (z > 0)
    neg = free & (z < 0)
    P = float(np.sum(z[pos] * m[pos]))
    N = float(np.sum(-z[neg] * m[neg]))
    if fixed + P - N == 0:
        return m
    # a zero factor would empty a whole sign class; treat that as infeasible
    if N > 0 and fixed + P > 0:
        m[neg] *= (fixed + P) / N
    elif P > 0 and N - fixed > 0:
        m[pos] *= (N - fixed) / P
    else:
        raise ConfigError("cannot make the configuration electroneutral with nonnegative means")
    return m


def _smooth_torus(grid, rng, kmax: int) -> np.ndarray:
    ops = torus_ops(grid)
    band = (ops.kabs >= 1) & (ops.kabs <= kmax)
    coeffs = (rng.standard_normal(ops.kabs.shape) + 1j * rng.standard_normal(ops.kabs.shape)) * band
    v = ops.ifft(coeffs)
    return v / max(np.abs(v).max(), 1e-300)


def _smooth_square_cos(grid, rng, kmax: int) -> np.ndarray:
    """Random ``cos(pi k x) cos(pi l y)`` sum (trapezoid mean exactly zero), max 1."""
    X, Y = grid.coordinates()
    v = np.zeros(grid.shape)
    for k in range(kmax + 1):
        for l in range(kmax + 1):
            if k == 0 and l == 0:
                continue
            v += rng.standard_normal() * np.cos(np.pi * k * X) * np.cos(np.pi * l * Y)
    return v / max(np.abs(v).max(), 1e-300)


def _bump_square(grid, rng, kmax: int) -> np.ndarray:
    """Nonnegative field vanishing on the boundary, max 1."""
    X, Y = grid.coordinates()
    q = np.zeros(grid.shape)
    for k in range(1, kmax + 1):
        for l in range(1, kmax + 1):
            q += rng.standard_normal() * np.sin(np.pi * k * X) * np.sin(np.pi * l * Y)
    q /= max(np.abs(q).max(), 1e-300)
    v = np.sin(np.pi * X) * np.sin(np.pi * Y) * (1.0 + 0.5 * q)
    return v / v.max()


def random_velocity(model: Model, rng, amplitude: float, n_modes: int = 16) -> np.ndarray:
    """Divergence-free velocity from the lowest modes with ``||u||_2 = amplitude``."""
    if amplitude == 0:
        return np.zeros((2,) + model.grid.shape)
    basis = NoiseSpec.lowest(model.grid, n_modes).modes
    w = rng.standard_normal(n_modes)
    u = np.einsum("m,mcxy->cxy", w, basis)
    nrm = np.sqrt(np.sum(model.grid.weights * np.sum(u**2, axis=0)))
    return u * (amplitude / nrm)


def make_initial_data(kind, model: Model, means: Sequence[float] | None = None,
                      amplitude: float = 0.5, velocity_amplitude: float = 1.0,
                      kmax: int = 3, noise_seed: int | None = None) -> SystemState:
    """Build a single-path initial state.

    ``amplitude`` is the relative size of the concentration perturbation
    (``c = m (1 + a q)`` with ``max|q| = 1``) and must be below 1 to keep
    the data positive. ``SteadyPlusPerturbation(eps)`` scales both the
    concentration perturbation and the velocity by ``eps``; ``eps = 0`` gives
    the exact steady data. The state's random stream is path 0 of
    ``noise_seed`` (default: the kind's seed).
    """
    if not 0 <= amplitude < 1:
        raise ConfigError("perturbation amplitude must lie in [0, 1)")
    grid = model.grid
    seed = kind.seed
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_DATA_KEY,)))
    if isinstance(kind, TwoSpeciesPaper):
        if not grid.is_torus or model.n_species != 2 or tuple(model.z) != (1.0, -1.0) \
                or model.D[0] != model.D[1]:
            raise ConfigError("TwoSpeciesPaper needs two torus species with z = (1, -1) and equal D")
        m0 = 1.0 if means is None else float(np.atleast_1d(means)[0])
        m = np.array([m0, m0])
        scale, vel = amplitude, velocity_amplitude
    elif isinstance(kind, SteadyPlusPerturbation):
        m = neutral_means(model, means)
        scale, vel = amplitude * kind.eps, velocity_amplitude * kind.eps
        if not 0 <= scale < 1:
            raise ConfigError("eps * amplitude must lie in [0, 1)")
    elif isinstance(kind, Neutral):
        m = neutral_means(model, means)
        scale, vel = amplitude, velocity_amplitude
    else:
        raise ConfigError(f"unknown initial-data kind {kind!r}")

    c = np.empty((model.n_species,) + grid.shape)
    ref = max(float(np.max(m)), max((s.gamma or 0.0) for s in model.species), 1e-3)
    for i, s in enumerate(model.species):
        if s.bc is BC.DIRICHLET:
            c[i] = s.gamma + scale * ref * _bump_square(grid, rng, kmax)
        elif grid.is_torus:
            c[i] = m[i] * (1.0 + scale * _smooth_torus(grid, rng, kmax))
        else:
            c[i] = m[i] * (1.0 + scale * _smooth_square_cos(grid, rng, kmax))
    u = random_velocity(model, rng, vel)
    rngs = path_rngs(seed if noise_seed is None else noise_seed, 1)
    return SystemState(model, u, c, 0.0, rngs)


def lowest_mode_data(model: Model, means: Sequence[float], eps: float,
                     velocity: np.ndarray | None = None, noise_seed: int = 0) -> SystemState:
    """Species ``i`` perturbed by a single lowest mode: ``m_i (1 + eps * mode_i)``.

    Torus modes alternate ``cos x``, ``cos y``; square Blocking species use
    ``cos(pi x)``, ``cos(pi y)``; Dirichlet species ``sin(pi x) sin(pi y)``.
    """
    grid = model.grid
    X, Y = grid.coordinates()
    m = np.asarray(means, dtype=float)
    c = np.empty((model.n_species,) + grid.shape)
    for i, s in enumerate(model.species):
        if s.bc is BC.DIRICHLET:
            c[i] = s.gamma + eps * max(s.gamma, 1.0) * np.sin(np.pi * X) * np.sin(np.pi * Y)
        elif grid.is_torus:
            c[i] = m[i] * (1.0 + eps * (np.cos(X) if i % 2 == 0 else np.cos(Y)))
        else:
            c[i] = m[i] * (1.0 + eps * (np.cos(np.pi * X) if i % 2 == 0 else np.cos(np.pi * Y)))
    u = np.zeros((2,) + grid.shape) if velocity is None else velocity
    return SystemState(model, u, c, 0.0, path_rngs(noise_seed, 1))
