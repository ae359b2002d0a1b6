"""State and parameter types for the coupled velocity / concentration system."""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from ..fields import Domain, Grid, ScalarField, VectorField, h_seminorm, lp_norm, ops_for, torus_ops


class BC(enum.Enum):
    PERIODIC = "periodic"
    DIRICHLET = "dirichlet"
    BLOCKING = "blocking"

    @classmethod
    def parse(cls, value) -> "BC":
        if isinstance(value, BC):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigError(f"unknown boundary condition {value!r}") from None


@dataclass(frozen=True)
class SpeciesParams:
    """Diffusivity, valence and boundary behaviour of one ionic species.

    ``gamma`` is the boundary value of a Dirichlet species and must be
    nonnegative; it is ignored otherwise.
    """

    D: float
    z: float
    bc: BC = BC.PERIODIC
    gamma: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "bc", BC.parse(self.bc))
        if not (self.D > 0 and math.isfinite(self.D)):
            raise ConfigError(f"diffusivity must be positive, got {self.D}")
        if not math.isfinite(self.z):
            raise ConfigError(f"valence must be finite, got {self.z}")
        if self.bc is BC.DIRICHLET:
            if self.gamma is None or not self.gamma >= 0:
                raise ConfigError(f"Dirichlet species needs gamma >= 0, got {self.gamma}")

    def to_dict(self) -> dict:
        return {"D": self.D, "z": self.z, "bc": self.bc.value, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d: dict) -> "SpeciesParams":
        return cls(D=d["D"], z=d["z"], bc=d["bc"], gamma=d.get("gamma"))


# --------------------------------------------------------------------------
# Noise


def _half_plane_wavevectors(count: int) -> list[tuple[int, int]]:
    """Distinct wavevectors with kx > 0 or (kx = 0, ky > 0), by |k| then angle."""
    r = int(math.ceil(math.sqrt(count))) + 2
    ks = [(kx, ky) for kx in range(-r, r + 1) for ky in range(-r, r + 1)
          if (kx > 0 or (kx == 0 and ky > 0))]
    ks.sort(key=lambda k: (k[0] ** 2 + k[1] ** 2, math.atan2(k[1], k[0]) % math.pi, k))
    return ks[:count]


def torus_curl_mode(grid: Grid, k: tuple[int, int], phase: str) -> np.ndarray:
    """Unit-L2 divergence-free field ``curl(cos(k.x))`` or ``curl(sin(k.x))``."""
    X, Y = grid.coordinates()
    kx, ky = k
    arg = kx * X + ky * Y
    # curl(phi) = (d_y phi, -d_x phi)
    if phase == "cos":
        dphi = -np.sin(arg)
    else:
        dphi = np.cos(arg)
    v = np.stack([ky * dphi, -kx * dphi])
    return v / (math.sqrt(kx * kx + ky * ky) * math.sqrt(2.0) * math.pi)


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Finite set of divergence-free forcing shapes with per-mode amplitudes.

    ``modes`` has shape ``(M, 2, nx, ny)``; mode ``k`` is driven by its own
    standard Wiener process with amplitude ``amplitudes[k]``. ``eigenvalues``
    holds ``|k|^2`` (torus) or the discrete Stokes eigenvalue (square) of each
    shape, which is what the linear Ornstein-Uhlenbeck reduction needs.
    """

    grid: Grid
    modes: np.ndarray
    amplitudes: np.ndarray
    eigenvalues: np.ndarray
    label: str = "custom"

    def __post_init__(self):
        modes = np.asarray(self.modes, dtype=float).reshape((-1, 2) + self.grid.shape)
        amps = np.asarray(self.amplitudes, dtype=float).reshape(-1)
        eig = np.asarray(self.eigenvalues, dtype=float).reshape(-1)
        if not (modes.shape[0] == amps.size == eig.size):
            raise ConfigError("noise modes, amplitudes and eigenvalues differ in length")
        if not np.all(np.isfinite(amps)):
            raise ConfigError("noise amplitudes must be finite")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "eigenvalues", eig)
        self.validate()

    def validate(self) -> None:
        ops = ops_for(self.grid)
        for i, g in enumerate(self.modes):
            vf = VectorField(self.grid, g)
            h1 = float(h_seminorm(vf, 1)) + float(lp_norm(vf, 2))
            div = float(np.sqrt(ops.integrate(ops.div(g) ** 2)))
            if div > 1e-10 * max(h1, 1e-300):
                raise ConfigError(f"noise mode {i} is not divergence free (|div| = {div:.2e})")
            if self.grid.is_torus:
                if np.max(np.abs(g.mean(axis=(-2, -1)))) > 1e-12 * max(np.abs(g).max(), 1.0):
                    raise ConfigError(f"noise mode {i} has nonzero mean")
            else:
                edge = max(np.abs(g[:, [0, -1], :]).max(), np.abs(g[:, :, [0, -1]]).max())
                if edge > 1e-12 * max(np.abs(g).max(), 1.0):
                    raise ConfigError(f"noise mode {i} does not vanish on the boundary")

    @property
    def count(self) -> int:
        return self.modes.shape[0]

    @property
    def scaled_modes(self) -> np.ndarray:
        return self.modes * self.amplitudes[:, None, None, None]

    def h_norm_sq(self, k: int = 0) -> float:
        """``sum_k amp_k^2 ||g_k||_{H^k}^2`` (homogeneous seminorm for k >= 1)."""
        total = 0.0
        for a, g in zip(self.amplitudes, self.modes):
            vf = VectorField(self.grid, g)
            nrm = float(lp_norm(vf, 2)) if k == 0 else float(h_seminorm(vf, k))
            total += a * a * nrm * nrm
        return total

    def neg_power_norm_sq(self) -> float:
        """``sum amp^2 ||Lambda^-1 g||^2``, the quantity bounding the charge moment exponent."""
        return float(np.sum(self.amplitudes**2 * np.array(
            [float(lp_norm(VectorField(self.grid, g), 2)) ** 2 for g in self.modes])
            / np.maximum(self.eigenvalues, 1e-300)))

    def with_amplitudes(self, amplitudes) -> "NoiseSpec":
        amps = np.broadcast_to(np.asarray(amplitudes, dtype=float), (self.count,))
        return replace(self, amplitudes=amps.copy())

    def describe(self) -> dict:
        return {"label": self.label, "count": self.count,
                "amplitudes": [float(a) for a in self.amplitudes],
                "eigenvalues": [float(e) for e in self.eigenvalues]}

    @classmethod
    def none(cls, grid: Grid) -> "NoiseSpec":
        return cls(grid, np.zeros((0, 2) + grid.shape), np.zeros(0), np.zeros(0), "none")

    @classmethod
    def lowest(cls, grid: Grid, count: int = 8, amplitude=1.0) -> "NoiseSpec":
        """The ``count`` lowest divergence-free modes of the domain."""
        if count <= 0:
            return cls.none(grid)
        amps = np.broadcast_to(np.asarray(amplitude, dtype=float), (count,)).copy()
        if grid.is_torus:
            modes, eig = [], []
            for k in _half_plane_wavevectors((count + 1) // 2):
                for phase in ("cos", "sin"):
                    modes.append(torus_curl_mode(grid, k, phase))
                    eig.append(k[0] ** 2 + k[1] ** 2)
            modes, eig = np.array(modes[:count]), np.array(eig[:count], dtype=float)
            return cls(grid, modes, amps, eig, f"torus-lowest-{count}")
        from ..stokes import stokes_space
        mu, modes = stokes_space(grid).eigenpairs(count)
        return cls(grid, modes, amps, mu, f"stokes-lowest-{count}")


# --------------------------------------------------------------------------
# Body forces


def forcing_preset(grid: Grid, name: str, amplitude: float = 1.0,
                   params: Sequence[float] = ()) -> np.ndarray:
    """Divergence-free body force from a named analytic preset.

    Presets: ``none``, ``taylor_green``, ``single_mode`` (params ``kx, ky``),
    ``bump`` (params ``x0, y0, width`` optional). Square presets are built
    from clamped stream functions and projected into the discrete space.
    """
    name = name.strip().lower()
    if name == "none" or amplitude == 0:
        return np.zeros((2,) + grid.shape)
    X, Y = grid.coordinates()
    if grid.is_torus:
        if name == "taylor_green":
            v = np.stack([np.cos(X) * np.sin(Y), -np.sin(X) * np.cos(Y)])
        elif name == "single_mode":
            kx, ky = (int(p) for p in (params or (1, 0)))
            if kx == 0 and ky == 0:
                raise ConfigError("single_mode needs a nonzero wavevector")
            v = torus_curl_mode(grid, (kx, ky), "cos")
        elif name == "bump":
            x0, y0, w = (list(params) + [math.pi, math.pi, 0.6][len(params):])[:3]
            dx = np.angle(np.exp(1j * (X - x0)))
            dy = np.angle(np.exp(1j * (Y - y0)))
            psi = np.exp(-(dx**2 + dy**2) / (2 * w * w))
            ops = torus_ops(grid)
            g = ops.grad(psi)
            v = ops.leray(np.stack([g[1], -g[0]]))
        else:
            raise ConfigError(f"unknown forcing preset {name!r}")
        return amplitude * torus_ops(grid).leray(v)

    from ..fields import square_ops
    from ..stokes import stokes_space
    if name == "taylor_green":
        psi = (np.sin(np.pi * X) * np.sin(np.pi * Y)) ** 2 / np.pi
    elif name == "single_mode":
        kx, ky = (int(p) for p in (params or (1, 1)))
        psi = (np.sin(np.pi * max(kx, 1) * X) * np.sin(np.pi * max(ky, 1) * Y)) ** 2 / np.pi
    elif name == "bump":
        x0, y0, w = (list(params) + [0.5, 0.5, 0.15][len(params):])[:3]
        psi = np.exp(-((X - x0) ** 2 + (Y - y0) ** 2) / (2 * w * w)) * (X * (1 - X) * Y * (1 - Y)) ** 2 * 16
    else:
        raise ConfigError(f"unknown forcing preset {name!r}")
    ops = square_ops(grid)
    v = np.stack([ops.dy(psi), -ops.dx(psi)])
    return amplitude * stokes_space(grid).project(v)


# --------------------------------------------------------------------------
# Model


@dataclass(frozen=True, eq=False)
class Model:
    """Everything about a run except the evolving fields.

    ``gamma`` is the boundary value of the potential on the square.
    ``nonlinear=False`` drops advection, electromigration and the electric
    force, reducing the velocity to a linear Ornstein-Uhlenbeck process; it
    exists for oracle tests. ``clamp=True`` replaces negative concentrations
    by zero instead of rejecting the step.
    """

    grid: Grid
    species: tuple[SpeciesParams, ...]
    noise: NoiseSpec
    forcing: np.ndarray = None
    gamma: float = 0.0
    nonlinear: bool = True
    clamp: bool = False

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(self.species))
        if self.noise is None:
            object.__setattr__(self, "noise", NoiseSpec.none(self.grid))
        if self.noise.grid != self.grid:
            raise ConfigError("noise modes are defined on a different grid")
        f = np.zeros((2,) + self.grid.shape) if self.forcing is None else np.asarray(self.forcing, float)
        if f.shape != (2,) + self.grid.shape:
            raise ConfigError(f"forcing has shape {f.shape}")
        object.__setattr__(self, "forcing", f)
        if not self.species:
            raise ConfigError("at least one species is required")
        for i, s in enumerate(self.species):
            if self.grid.is_torus and s.bc is not BC.PERIODIC:
                raise ConfigError(f"species {i}: {s.bc.value} boundary condition on the torus")
            if not self.grid.is_torus and s.bc is BC.PERIODIC:
                raise ConfigError(f"species {i}: periodic boundary condition on the square")

    @property
    def n_species(self) -> int:
        return len(self.species)

    @property
    def D(self) -> np.ndarray:
        return np.array([s.D for s in self.species])

    @property
    def z(self) -> np.ndarray:
        return np.array([s.z for s in self.species])

    @functools.cached_property
    def scheme(self):
        from .schemes import SquareScheme, TorusScheme
        return TorusScheme(self) if self.grid.is_torus else SquareScheme(self)

    def describe(self) -> dict:
        return {"grid": self.grid.describe(), "species": [s.to_dict() for s in self.species],
                "noise": self.noise.describe(), "gamma": self.gamma,
                "nonlinear": self.nonlinear, "clamp": self.clamp}


# --------------------------------------------------------------------------
# State


@dataclass
class CouplingClock:
    """Per-path bookkeeping of the shadow control budget."""

    integral: np.ndarray
    fired: np.ndarray
    tau: np.ndarray

    @classmethod
    def fresh(cls, n: int) -> "CouplingClock":
        return cls(np.zeros(n), np.zeros(n, dtype=bool), np.full(n, np.nan))

    def copy(self) -> "CouplingClock":
        return CouplingClock(self.integral.copy(), self.fired.copy(), self.tau.copy())


@dataclass(eq=False)
class SystemState:
    """Velocity, concentrations, clock and random streams.

    ``u`` has shape ``(2, nx, ny)`` and ``c`` shape ``(N, nx, ny)`` for a single
    path; an ensemble adds a leading path axis to both and carries one
    generator per path. States are treated as immutable: stepping returns a
    new object, but the generators are shared and advance in place.
    """

    model: Model
    u: np.ndarray
    c: np.ndarray
    t: float = 0.0
    rngs: tuple = ()
    step_index: int = 0
    min_c: np.ndarray | float | None = None
    clamp_events: int = 0
    clock: CouplingClock | None = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        g = self.model.grid
        batched = self.u.ndim == 4
        if self.u.shape[-3:] != (2,) + g.shape:
            raise ValueError(f"velocity shape {self.u.shape} does not match grid")
        if self.c.shape[-3:] != (self.model.n_species,) + g.shape:
            raise ValueError(f"concentration shape {self.c.shape} does not match species/grid")
        if batched and (self.c.ndim != 4 or self.c.shape[0] != self.u.shape[0]):
            raise ValueError("batched state needs matching path axes")
        if isinstance(self.rngs, np.random.Generator):
            self.rngs = (self.rngs,)
        self.rngs = tuple(self.rngs)
        if self.rngs and len(self.rngs) != self.n_paths:
            raise ValueError(f"{len(self.rngs)} generators for {self.n_paths} paths")
        if self.min_c is None:
            self.min_c = self.c.min(axis=(-3, -2, -1))

    # -- shape helpers ------------------------------------------------------

    @property
    def batched(self) -> bool:
        return self.u.ndim == 4

    @property
    def n_paths(self) -> int:
        return self.u.shape[0] if self.batched else 1

    @property
    def grid(self) -> Grid:
        return self.model.grid

    # -- views with the documented field types --------------------------------

    @property
    def velocity(self) -> VectorField:
        return VectorField(self.grid, self.u)

    @property
    def concentrations(self) -> list[ScalarField]:
        return [ScalarField(self.grid, self.c[..., i, :, :]) for i in range(self.model.n_species)]

    @property
    def params(self) -> tuple[SpeciesParams, ...]:
        return self.model.species

    @property
    def f(self) -> VectorField:
        return VectorField(self.grid, self.model.forcing)

    @property
    def noise(self) -> NoiseSpec:
        return self.model.noise

    @property
    def rng(self) -> np.random.Generator | None:
        return self.rngs[0] if self.rngs else None

    def replace(self, **kw) -> "SystemState":
        data = dict(model=self.model, u=self.u, c=self.c, t=self.t, rngs=self.rngs,
                    step_index=self.step_index, min_c=self.min_c,
                    clamp_events=self.clamp_events, clock=self.clock)
        data.update(kw)
        return SystemState(**data)

    def path(self, i: int) -> "SystemState":
        """Single-path view of path ``i`` of an ensemble."""
        if not self.batched:
            if i != 0:
                raise IndexError(i)
            return self
        return SystemState(self.model, self.u[i], self.c[i], self.t,
                           (self.rngs[i],) if self.rngs else (), self.step_index,
                           clamp_events=self.clamp_events)

    def with_model(self, model: Model) -> "SystemState":
        return self.replace(model=model)

    @staticmethod
    def stack(states: Sequence["SystemState"]) -> "SystemState":
        """Combine single-path states that share a model and clock into an ensemble."""
        first = states[0]
        for s in states:
            if s.model is not first.model:
                raise ValueError("stacked states must share a model")
            if s.batched:
                raise ValueError("stack expects single-path states")
        rngs = tuple(r for s in states for r in s.rngs)
        return SystemState(first.model, np.stack([s.u for s in states]),
                           np.stack([s.c for s in states]), first.t,
                           rngs if len(rngs) == len(states) else (), first.step_index)


def path_rngs(seed: int, n_paths: int, start: int = 0) -> tuple[np.random.Generator, ...]:
    """Independent generators for paths ``start .. start+n_paths-1`` of a master seed."""
    return tuple(np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(start + i,)))
                 for i in range(n_paths))


def replicate(state: SystemState, n_paths: int, seed: int, start: int = 0) -> SystemState:
    """Ensemble of ``n_paths`` copies of a single-path state with fresh streams."""
    if state.batched:
        raise ValueError("replicate expects a single-path state")
    return SystemState(state.model, np.repeat(state.u[None], n_paths, axis=0),
                       np.repeat(state.c[None], n_paths, axis=0), state.t,
                       path_rngs(seed, n_paths, start), state.step_index)


# --------------------------------------------------------------------------
# Pointwise physics


def charge_density(state: SystemState) -> ScalarField:
    """``rho = sum_i z_i c_i``."""
    return ScalarField(state.grid, np.einsum("i,...ixy->...xy", state.model.z, state.c))


def total_concentration(state: SystemState) -> ScalarField:
    return ScalarField(state.grid, state.c.sum(axis=-3))


def potential(state: SystemState) -> ScalarField:
    """Electric potential of the state's charge density."""
    phi, _ = state.model.scheme.potential(state.c)
    return ScalarField(state.grid, phi)


def ionic_flux_divergence(c: ScalarField, phi: ScalarField, params: SpeciesParams) -> ScalarField:
    """``D div(grad c + z c grad Phi)``; the migration product is dealiased on the torus."""
    grid = c.grid
    if grid != phi.grid:
        from ..errors import DomainMismatchError
        raise DomainMismatchError("c and Phi on different grids")
    ops = ops_for(grid)
    if grid.is_torus:
        ch = ops.fft(c.values)
        gphi = ops.grad(phi.values)
        flux_h = ops.dealias_hat(ops.fft(c.values[..., None, :, :] * gphi))
        out = params.D * ops.ifft(-ops.k2 * ch + params.z * ops.div_hat(flux_h))
    else:
        g = ops.grad(c.values) + params.z * c.values[..., None, :, :] * ops.grad(phi.values)
        out = params.D * ops.div(g)
    return ScalarField(grid, out)


def navier_stokes_explicit_rhs(state: SystemState, phi: ScalarField | None = None) -> VectorField:
    """Projected explicit velocity drift ``P(-u.grad u - rho grad Phi + f)``."""
    scheme = state.model.scheme
    if phi is None:
        phi_v, gphi = scheme.potential(state.c)
    else:
        phi_v = phi.values
        gphi = ops_for(state.grid).grad(phi_v)
    rho = np.einsum("i,...ixy->...xy", state.model.z, state.c)
    return VectorField(state.grid, scheme.explicit_velocity_drift(state.u, rho, gphi))
