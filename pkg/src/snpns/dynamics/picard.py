"""Fixed-point (Picard) construction of a short-time solution.

Iterate 0 is identically zero. Iterate ``m`` starts from the true initial
data; its velocity feels its own advection and the electric force of
iterate ``m-1``, and its concentrations are advected by the new velocity
while migrating in the potential of iterate ``m-1``. Each iterate is
discretized with the same IMEX step and the same Wiener increments as the
direct integrator, so the fixed point of the iteration coincides with the
direct solution.

The stochastic convolution ``G`` enters implicitly: with a shared noise path
every velocity iterate is ``u = v + G`` where ``G`` solves the discrete
linear Stokes recursion ``G_{n+1} = (I - dt A)^{-1} (G_n + g dW_n)``, and the
differences of consecutive iterates are exactly those of the deterministic
``v`` iterates.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .model import SystemState
from .stepper import _check_cfl, draw_increments, max_stable_dt, step


@dataclass
class PicardResult:
    distances: list[float]
    converged: bool
    times: np.ndarray
    u: np.ndarray
    c: np.ndarray
    dt: float
    increments: np.ndarray | None = field(repr=False, default=None)

    @property
    def iterations(self) -> int:
        return len(self.distances)

    def ratios(self, floor: float = 0.0) -> np.ndarray:
        """Consecutive ratios ``d_{m+1}/d_m`` while ``d_m`` exceeds ``floor``."""
        d = np.asarray(self.distances)
        out = []
        for a, b in zip(d[:-1], d[1:]):
            if a <= floor or b <= floor:
                break
            out.append(b / a)
        return np.array(out)


def _sup_distance(u1, c1, u2, c2, weights) -> float:
    du = np.sum(weights * np.sum((u1 - u2) ** 2, axis=-3), axis=(-2, -1))
    dc = np.sum(weights * np.sum((c1 - c2) ** 2, axis=-3), axis=(-2, -1))
    return float(np.sqrt(np.max(du + dc)))


def _noise_path(state: SystemState, dt: float, n_steps: int):
    """Increments for the whole horizon, drawn from a copy of the state's stream."""
    if state.model.noise.count == 0:
        return None
    shadow = state.replace(rngs=tuple(copy.deepcopy(r) for r in state.rngs))
    return np.stack([draw_increments(shadow, dt) for _ in range(n_steps)])


def picard_solve(initial: SystemState, T0: float = 0.05, m_max: int = 40, tol: float = 1e-12,
                 dt: float | None = None, increments: np.ndarray | None = None) -> PicardResult:
    """Run the Picard iteration on ``[0, T0]`` with one shared noise path.

    Returns the sequence of sup-in-time L2 distances between consecutive
    iterates (velocity and all concentrations together). ``converged`` is set
    when a distance falls below ``tol``; exhausting ``m_max`` is reported,
    not raised.
    """
    if initial.batched:
        raise ValueError("picard_solve runs a single path")
    if dt is None:
        dt = min(max_stable_dt(initial), T0 / 50)
    n_steps = max(1, int(round(T0 / dt)))
    dt = T0 / n_steps
    _check_cfl(initial, dt)
    if increments is None:
        increments = _noise_path(initial, dt, n_steps)
    scheme = initial.model.scheme
    w = initial.grid.weights
    times = np.arange(n_steps + 1) * dt + initial.t

    u_prev = np.zeros((n_steps + 1,) + initial.u.shape)
    c_prev = np.zeros((n_steps + 1,) + initial.c.shape)
    distances: list[float] = []
    converged = False
    for _ in range(m_max):
        u = np.empty_like(u_prev)
        c = np.empty_like(c_prev)
        u[0], c[0] = initial.u, initial.c
        for n in range(n_steps):
            dW = None if increments is None else increments[n]
            u[n + 1], c[n + 1] = scheme.advance(u[n], c[n], dt, dW, charge_source=c_prev[n])
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(c))):
            break
        d = _sup_distance(u, c, u_prev, c_prev, w)
        distances.append(d)
        u_prev, c_prev = u, c
        if d < tol:
            converged = True
            break
    return PicardResult(distances, converged, times, u_prev, c_prev, dt, increments)


def direct_solution(initial: SystemState, result: PicardResult):
    """Integrate with :func:`step` on the Picard noise path; returns ``(u, c)`` histories."""
    n_steps = len(result.times) - 1
    s = initial
    us, cs = [s.u], [s.c]
    for n in range(n_steps):
        dW = None if result.increments is None else result.increments[n]
        s = step(s, result.dt, dW)
        us.append(s.u)
        cs.append(s.c)
    return np.stack(us), np.stack(cs)


def sup_l2_gap(u1, c1, u2, c2, weights) -> float:
    return _sup_distance(u1, c1, u2, c2, weights)


__all__ = ["PicardResult", "picard_solve", "direct_solution", "sup_l2_gap"]
