"""Energies, entropy, discrete identities and decay-rate measurements.

Every inner product and norm here uses the grid quadrature of
:func:`snpns.fields.integrate`, the same rule as :func:`snpns.fields.lp_norm`.
Functions taking a :class:`SystemState` return a float for a single path and
an array with one entry per path for an ensemble.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dynamics.model import BC, SystemState
from .errors import PreconditionError
from .fields import ScalarField, VectorField, _same_grid, integrate, ops_for, torus_ops

ENTROPY_FLOOR = 1e-14


class PreconditionWarning(UserWarning):
    """An input violates an operation's precondition; the result is still returned."""


def _out(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x


# --------------------------------------------------------------------------
# Series container


@dataclass
class ObservableSeries:
    """A named scalar time series with strictly increasing, finite samples."""

    name: str
    times: np.ndarray
    values: np.ndarray
    run_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.times.shape != self.values.shape:
            raise ValueError("times and values must have the same length")
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError(f"series {self.name!r}: times must be strictly increasing")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.values))):
            raise ValueError(f"series {self.name!r}: samples must be finite")

    @classmethod
    def from_samples(cls, name: str, samples: Iterable[tuple[float, float]], run_id: str = "",
                     meta: dict | None = None) -> "ObservableSeries":
        pts = list(samples)
        t = [p[0] for p in pts]
        v = [p[1] for p in pts]
        return cls(name, np.array(t, dtype=float), np.array(v, dtype=float), run_id, dict(meta or {}))

    @property
    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self.times.tolist(), self.values.tolist()))

    def __len__(self) -> int:
        return self.times.size

    def window(self, t0: float, t1: float) -> "ObservableSeries":
        # endpoints are inclusive up to accumulated clock rounding
        tol = 1e-9 * max(1.0, abs(t0), abs(t1))
        keep = (self.times >= t0 - tol) & (self.times <= t1 + tol)
        return ObservableSeries(self.name, self.times[keep], self.values[keep], self.run_id, self.meta)

    def header(self) -> dict:
        return {"name": self.name, "run_id": self.run_id, "meta": self.meta}

    def to_csv(self, path) -> Path:
        """Write ``t,value`` rows below a ``#``-prefixed JSON header line."""
        path = Path(path)
        lines = ["# " + json.dumps(self.header(), sort_keys=True, default=_json_default), "t,value"]
        lines += [f"{t!r},{v!r}" for t, v in zip(self.times.tolist(), self.values.tolist())]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read_csv(cls, path) -> "ObservableSeries":
        text = Path(path).read_text().splitlines()
        if not text or not text[0].startswith("#"):
            raise ValueError(f"{path}: missing '#' header line")
        head = json.loads(text[0][1:])
        rows = [ln.split(",") for ln in text[2:] if ln.strip()]
        t = np.array([float(r[0]) for r in rows])
        v = np.array([float(r[1]) for r in rows])
        return cls(head["name"], t, v, head.get("run_id", ""), head.get("meta", {}))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


# --------------------------------------------------------------------------
# Energies and entropy


def kinetic_energy(state: SystemState):
    """``||u||^2`` in L2."""
    return _out(integrate(state.grid, np.sum(state.u**2, axis=-3)))


def potential_energy(state: SystemState):
    """``||grad Phi||^2`` in L2."""
    _, gphi = state.model.scheme.potential(state.c)
    return _out(integrate(state.grid, np.sum(gphi**2, axis=-3)))


def charge_norm_sq(state: SystemState):
    """``||rho||^2`` in L2."""
    rho = np.einsum("i,...ixy->...xy", state.model.z, state.c)
    return _out(integrate(state.grid, rho**2))


def species_means(state: SystemState) -> np.ndarray:
    """Spatial averages ``c_bar_i`` with shape ``(..., N)``."""
    return integrate(state.grid, state.c) / state.grid.area


def deviation_norm_sq(state: SystemState):
    """``sum_i ||c_i - c_bar_i||^2``."""
    dev = state.c - species_means(state)[..., None, None]
    return _out(integrate(state.grid, dev**2).sum(axis=-1))


def velocity_gradient_norm_sq(state: SystemState):
    """``||grad u||^2``."""
    ops = ops_for(state.grid)
    g = ops.grad(state.u)
    return _out(integrate(state.grid, np.sum(g**2, axis=(-4, -3))))


class EntropyValue(float):
    """A float carrying ``floored``: whether some concentration hit the floor."""

    floored: bool

    def __new__(cls, value: float, floored: bool):
        obj = super().__new__(cls, value)
        obj.floored = bool(floored)
        return obj


def _entropy_parts(grid, c: np.ndarray):
    mean = integrate(grid, c) / grid.area
    floored = np.any(c < ENTROPY_FLOOR, axis=(-3, -2, -1))
    cc = np.maximum(c, ENTROPY_FLOOR)
    m = np.maximum(mean, ENTROPY_FLOOR)[..., None, None]
    dens = cc * np.log(cc / m) - cc + m
    return integrate(grid, dens).sum(axis=-1), floored


def entropy(state: SystemState):
    """``sum_i int (c_i log(c_i / c_bar_i) - c_i + c_bar_i)``.

    Entries below ``1e-14`` are raised to ``1e-14``; a single-path result is
    an :class:`EntropyValue` whose ``floored`` attribute records this. For an
    ensemble use :func:`entropy_with_flags`.
    """
    val, floored = _entropy_parts(state.grid, state.c)
    if state.batched:
        return np.maximum(val, 0.0)
    return EntropyValue(max(float(val), 0.0), bool(floored))


def entropy_with_flags(state: SystemState):
    val, floored = _entropy_parts(state.grid, state.c)
    return np.maximum(val, 0.0), floored


# --------------------------------------------------------------------------
# Discrete identities


def _dealiased(grid, a: np.ndarray) -> np.ndarray:
    if not grid.is_torus:
        return a
    ops = torus_ops(grid)
    return ops.ifft(ops.dealias_hat(ops.fft(a)))


def _inner(grid, a: np.ndarray, b: np.ndarray, vector: bool = False):
    prod = a * b
    if vector:
        prod = prod.sum(axis=-3)
    return integrate(grid, prod)


def _norm(grid, a: np.ndarray, vector: bool = False):
    return np.sqrt(_inner(grid, a, a, vector))


def cancellation_residual_velocity(u: VectorField, rho: ScalarField, Phi: ScalarField,
                                   div_tol: float = 1e-8) -> float:
    """Normalized residual of ``<rho grad Phi, u> + <u . grad rho, Phi> = 0``.

    Products are dealiased on the torus. The normalization is
    ``1 + ||rho grad Phi|| ||u|| + ||u . grad rho|| ||Phi||``. A velocity that
    is not divergence-free triggers a :class:`PreconditionWarning`.
    """
    grid = u.grid
    _same_grid(grid, rho.grid)
    _same_grid(grid, Phi.grid)
    ops = ops_for(grid)
    uv = u.values
    div = ops.div(uv)
    scale = 1.0 + float(np.max(np.sqrt(integrate(grid, np.sum(ops.grad(uv) ** 2, axis=(-4, -3))))))
    if float(np.max(_norm(grid, div))) > div_tol * scale:
        warnings.warn("velocity is not divergence-free; the cancellation need not hold",
                      PreconditionWarning, stacklevel=2)
    force = _dealiased(grid, rho.values[..., None, :, :] * ops.grad(Phi.values))
    grho = ops.grad(rho.values)
    adv = _dealiased(grid, uv[..., 0, :, :] * grho[..., 0, :, :] + uv[..., 1, :, :] * grho[..., 1, :, :])
    a = _inner(grid, force, uv, vector=True)
    b = _inner(grid, adv, Phi.values)
    norm = 1.0 + _norm(grid, force, True) * _norm(grid, uv, True) + _norm(grid, adv) * _norm(grid, Phi.values)
    return _out(np.abs(a + b) / norm)


def two_species_identity_residual(rho: ScalarField, sigma: ScalarField, Phi: ScalarField) -> float:
    """Normalized residual of ``(div(sigma grad Phi), rho) + (div(rho grad Phi), sigma) = -(rho^2, sigma)``.

    ``Phi`` is expected to satisfy ``-Laplacian Phi = rho``.
    """
    grid = rho.grid
    _same_grid(grid, sigma.grid)
    _same_grid(grid, Phi.grid)
    ops = ops_for(grid)
    gphi = ops.grad(Phi.values)
    t1 = _inner(grid, ops.div(_dealiased(grid, sigma.values[..., None, :, :] * gphi)), rho.values)
    t2 = _inner(grid, ops.div(_dealiased(grid, rho.values[..., None, :, :] * gphi)), sigma.values)
    rhs = -_inner(grid, rho.values**2, sigma.values)
    norm = 1.0 + np.abs(t1) + np.abs(t2) + np.abs(rhs)
    return _out(np.abs(t1 + t2 - rhs) / norm)


# --------------------------------------------------------------------------
# Energy balance and decay


def _two_species_terms(state: SystemState):
    grid = state.grid
    ops = ops_for(grid)
    rho = state.c[..., 0, :, :] - state.c[..., 1, :, :]
    sigma = state.c[..., 0, :, :] + state.c[..., 1, :, :]
    sbar = integrate(grid, sigma) / grid.area
    energy = 0.5 * (integrate(grid, rho**2) + integrate(grid, (sigma - np.asarray(sbar)[..., None, None]) ** 2))
    diss = (integrate(grid, np.sum(ops.grad(rho) ** 2, axis=-3))
            + integrate(grid, np.sum(ops.grad(sigma) ** 2, axis=-3))
            + integrate(grid, sigma * rho**2))
    return energy, diss


def dissipation_balance_two_species(states: Sequence[SystemState], run_id: str = "") -> ObservableSeries:
    """Per-step residual of the two-species concentration energy equality.

    For consecutive states the residual is the difference quotient of
    ``(||rho||^2 + ||sigma - sigma_bar||^2) / 2`` plus ``D`` times the mean
    of the dissipation ``||grad rho||^2 + ||grad sigma||^2 + ||sqrt(sigma) rho||^2``
    at both ends. It is stamped at the later time. Single-path states only.
    """
    if len(states) < 2:
        raise ValueError("need at least two states")
    model = states[0].model
    if model.n_species != 2 or tuple(model.z) != (1.0, -1.0) or model.D[0] != model.D[1]:
        raise PreconditionError("the energy equality needs two species with z = (1, -1) and equal D")
    if not model.grid.is_torus:
        raise PreconditionError("the energy equality is stated on the torus")
    if np.any(model.forcing != 0) or (model.noise.count and np.any(model.noise.amplitudes != 0)):
        raise PreconditionError("the energy balance run must have f = 0 and g = 0")
    D = float(model.D[0])
    terms = [_two_species_terms(s) for s in states]
    times, res = [], []
    for (s0, (e0, d0)), (s1, (e1, d1)) in zip(zip(states, terms), zip(states[1:], terms[1:])):
        dt = s1.t - s0.t
        times.append(s1.t)
        res.append(float((e1 - e0) / dt + D * 0.5 * (d0 + d1)))
    return ObservableSeries("dissipation_residual", np.array(times), np.array(res), run_id)


@dataclass(frozen=True)
class DecayFit:
    rate: float
    r_squared: float
    intercept: float
    n_points: int


def fit_decay_rate(series: ObservableSeries, window: tuple[float, float] | None = None) -> DecayFit:
    """Least-squares fit of ``log(value)`` against ``t``; the rate is minus the slope."""
    s = series if window is None else series.window(*window)
    if len(s) < 2:
        raise ValueError("need at least two samples in the fit window")
    if np.any(s.values <= 0):
        raise ValueError("decay fit needs positive values in the window")
    t = s.times
    y = np.log(s.values)
    tc = t - t.mean()
    slope = float(np.dot(tc, y - y.mean()) / np.dot(tc, tc))
    intercept = float(y.mean() - slope * t.mean())
    resid = y - (intercept + slope * t)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot <= 1e-30 * max(1.0, float(np.sum(y**2))) else 1.0 - ss_res / ss_tot
    return DecayFit(-slope, r2, intercept, len(s))


def default_targets(state: SystemState) -> np.ndarray:
    """``gamma_i`` for Dirichlet species and the current mean otherwise."""
    means = np.atleast_2d(species_means(state))[0]
    return np.array([s.gamma if s.bc is BC.DIRICHLET else m for s, m in zip(state.params, means)])


def lp_deviation(state: SystemState, p: float, targets: Sequence[float] | None = None):
    """``sum_i ||c_i - target_i||_{L^p}``."""
    tg = default_targets(state) if targets is None else np.asarray(targets, dtype=float)
    dev = np.abs(state.c - tg[:, None, None])
    scale = max(float(dev.max()), 1e-300)
    return _out(scale * (integrate(state.grid, (dev / scale) ** p) ** (1.0 / p)).sum(axis=-1))


def lp_decay_series(states: Iterable[SystemState], p: int = 4,
                    targets: Sequence[float] | None = None, run_id: str = "") -> ObservableSeries:
    """Record ``sum_i ||c_i - target_i||_{L^p}`` over a stream of states.

    ``p`` must be an even integer. Targets default to ``gamma_i`` for Dirichlet
    species and the initial means for the others (which are conserved).
    """
    if p != int(p) or int(p) < 2 or int(p) % 2:
        raise ValueError(f"p must be an even integer >= 2, got {p}")
    times, vals = [], []
    tg = None if targets is None else np.asarray(targets, dtype=float)
    for s in states:
        if tg is None:
            tg = default_targets(s)
        times.append(s.t)
        vals.append(float(lp_deviation(s, int(p), tg)))
    return ObservableSeries(f"L{int(p)}_deviation", np.array(times), np.array(vals), run_id,
                            {"p": int(p), "targets": tg.tolist() if tg is not None else []})


# --------------------------------------------------------------------------
# Lipschitz dependence on initial data


def h_distance_sq(a: SystemState, b: SystemState):
    """``||u^a - u^b||^2 + sum_i ||c^a_i - c^b_i||^2``."""
    g = a.grid
    return _out(integrate(g, np.sum((a.u - b.u) ** 2, axis=-3))
                + integrate(g, (a.c - b.c) ** 2).sum(axis=-1))


def kappa_integrand(s1: SystemState, s2: SystemState) -> float:
    """Integrand of the Lipschitz exponent (with unit constant) at one time.

    Uses the L2 norms of trajectory 1's concentrations and, from trajectory 2,
    the L4 norms of the concentrations, the grid maximum of ``|grad Phi|``
    and ``||grad u||^2``.
    """
    g = s1.grid
    c1 = integrate(g, s1.c**2)
    c2_4 = integrate(g, s2.c**4)
    _, gphi = s2.model.scheme.potential(s2.c)
    gmax = float(np.sqrt(np.max(np.sum(gphi**2, axis=-3))))
    return float(np.sum(c1 + c1**2) + np.sum(c2_4) + gmax**2 + velocity_gradient_norm_sq(s2))


@dataclass
class LipschitzReport:
    ratio: ObservableSeries
    kappa: ObservableSeries
    C: float
    holds: bool
    exact_match: bool


def lipschitz_growth_check(traj1: Sequence[SystemState], traj2: Sequence[SystemState],
                           C: float = 2.0, kappa_constant: float = 1.0,
                           run_id: str = "") -> LipschitzReport:
    """Compare ``r(t) = |w1 - w2|^2 / |w1_0 - w2_0|^2`` with ``C exp(kappa_hat(t))``.

    ``kappa_hat`` is the trapezoid quadrature of :func:`kappa_integrand` times
    ``kappa_constant``. The trajectories must be sampled at the same times and
    driven by the same noise path (not checked). Identical initial data give
    ``exact_match=True`` and ``r`` reported as 0.
    """
    if len(traj1) != len(traj2) or not traj1:
        raise ValueError("trajectories must be nonempty and of equal length")
    t = np.array([s.t for s in traj1])
    if not np.allclose(t, [s.t for s in traj2], rtol=0, atol=1e-12):
        raise ValueError("trajectories are sampled at different times")
    d0 = float(h_distance_sq(traj1[0], traj2[0]))
    dist = np.array([float(h_distance_sq(a, b)) for a, b in zip(traj1, traj2)])
    integrand = np.array([kappa_integrand(a, b) for a, b in zip(traj1, traj2)])
    kappa = kappa_constant * np.concatenate(
        [[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(t))])
    exact = d0 == 0.0
    ratio = np.zeros_like(dist) if exact else dist / d0
    # compare in log form so that large exponents do not overflow
    with np.errstate(divide="ignore"):
        holds = bool(np.all(np.log(np.maximum(ratio, 1e-300)) <= math.log(C) + kappa))
    meta = {"C": C, "kappa_constant": kappa_constant}
    return LipschitzReport(ObservableSeries("lipschitz_ratio", t, ratio, run_id, meta),
                           ObservableSeries("kappa_hat", t, kappa, run_id, meta), C,
                           holds or exact, exact)


__all__ = [
    "ENTROPY_FLOOR", "PreconditionWarning", "ObservableSeries", "EntropyValue", "DecayFit",
    "LipschitzReport", "kinetic_energy", "potential_energy", "charge_norm_sq", "species_means",
    "deviation_norm_sq", "velocity_gradient_norm_sq", "entropy", "entropy_with_flags",
    "cancellation_residual_velocity", "two_species_identity_residual",
    "dissipation_balance_two_species", "fit_decay_rate", "default_targets", "lp_deviation",
    "lp_decay_series", "h_distance_sq", "kappa_integrand", "lipschitz_growth_check",
]
