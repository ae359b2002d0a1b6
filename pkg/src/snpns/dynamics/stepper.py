"""Public stepping API: guarded steps, step halving, the controlled shadow step."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from ..errors import BlowUpError, PreconditionError, StepRejectedError
from ..fields import Domain
from .model import CouplingClock, SystemState
from .schemes import Control

MAX_HALVINGS = 6
POSITIVITY_TOL = 1e-8
CFL_NUMBER = 0.25


class _Undershoot(Exception):
    pass


def max_stable_dt(state: SystemState) -> float:
    """Largest dt allowed by the advective guard ``dt <= 0.25 h / max(1, |u|_inf)``."""
    umax = float(np.sqrt(np.max(np.sum(state.u**2, axis=-3)))) if state.u.size else 0.0
    return CFL_NUMBER * state.grid.spacing / max(1.0, umax)


def _check_cfl(state: SystemState, dt: float) -> None:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    limit = max_stable_dt(state)
    if dt > limit * (1 + 1e-12):
        raise StepRejectedError(
            f"dt={dt:.4g} violates the CFL guard at t={state.t:.4g}; use dt <= {limit:.4g}")


def draw_increments(state: SystemState, dt: float) -> np.ndarray | None:
    """Wiener increments ``N(0, dt)`` for every mode, from each path's own stream."""
    m = state.model.noise.count
    if m == 0:
        return None
    if not state.rngs:
        raise PreconditionError("state has noise modes but no random stream")
    sd = math.sqrt(dt)
    draws = [rng.standard_normal(m) * sd for rng in state.rngs]
    return np.stack(draws) if state.batched else draws[0]


def _bridge_split(rngs, dW: np.ndarray | None, dt: float, batched: bool):
    """Split an increment over ``dt`` into two halves by the Brownian bridge."""
    if dW is None:
        return None, None
    m = dW.shape[-1]
    z = np.stack([r.standard_normal(m) for r in rngs]) if batched else rngs[0].standard_normal(m)
    first = 0.5 * dW + 0.5 * math.sqrt(dt) * z
    return first, dW - first


def _finite_or_raise(state: SystemState, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise BlowUpError(f"non-finite values at step {state.step_index + 1} (t={state.t:.6g})",
                              step_index=state.step_index + 1)


def _positivity(model, c: np.ndarray):
    cmin = c.min(axis=(-3, -2, -1))
    cmax = c.max(axis=(-3, -2, -1))
    bad = cmin < -POSITIVITY_TOL * np.maximum(cmax, 0.0)
    return cmin, bool(np.any(bad))


def _raw_step(state: SystemState, dt: float, dW, control: Control | None = None,
              check_positivity: bool = True) -> SystemState:
    model = state.model
    u_new, c_new = model.scheme.advance(state.u, state.c, dt, dW, control)
    _finite_or_raise(state, u_new, c_new)
    cmin, bad = _positivity(model, c_new)
    clamps = state.clamp_events
    if bad:
        if model.clamp:
            clamps += int(np.sum(c_new < 0))
            c_new = np.maximum(c_new, 0.0)
        elif check_positivity:
            raise _Undershoot()
    return state.replace(u=u_new, c=c_new, t=state.t + dt, step_index=state.step_index + 1,
                         min_c=cmin, clamp_events=clamps)


def _with_halving(advance: Callable, states, dt: float, dW, rngs, batched: bool, depth: int = 0):
    try:
        return advance(states, dt, dW)
    except _Undershoot:
        if depth >= MAX_HALVINGS:
            raise StepRejectedError(
                f"concentration undershoot persists after {MAX_HALVINGS} halvings of dt") from None
        w1, w2 = _bridge_split(rngs, dW, dt, batched)
        mid = _with_halving(advance, states, dt / 2, w1, rngs, batched, depth + 1)
        return _with_halving(advance, mid, dt / 2, w2, rngs, batched, depth + 1)


def step(state: SystemState, dt: float, dW: np.ndarray | None = None) -> SystemState:
    """Advance the state by one IMEX Euler-Maruyama step of size ``dt``.

    ``dW`` overrides the increments normally drawn from the state's streams
    (shape ``(M,)`` or ``(paths, M)``). If a concentration dips below
    ``-1e-8 * max c`` the step is redone as two half steps, the increment
    being split by a Brownian bridge; this recurses up to six times. The
    returned state counts one step regardless of internal halvings.
    """
    _check_cfl(state, dt)
    if dW is None:
        dW = draw_increments(state, dt)
    index = state.step_index

    def advance(s, h, w):
        return _raw_step(s, h, w)

    out = _with_halving(advance, state, dt, dW, state.rngs, state.batched)
    out.step_index = index + 1
    out.t = state.t + dt
    return out


def step_bounded(state: SystemState, dt: float, dW: np.ndarray | None = None) -> SystemState:
    """:func:`step` restricted to unit-square configurations."""
    if state.grid.domain is not Domain.SQUARE:
        raise PreconditionError("step_bounded needs a unit-square configuration")
    return step(state, dt, dW)


def shadow_step(primary: SystemState, shadow: SystemState, dt: float, lam: float,
                n_modes: int, budget: float, dW: np.ndarray | None = None):
    """Advance a primary path and its controlled shadow with shared increments.

    The shadow feels the extra drift ``lam * P_n(u - u_shadow)`` while its
    budget lasts. The running integral of ``||P_n(u - u_shadow)||^2`` uses
    the left-endpoint rule: before each step the integral is compared with
    ``budget``; if it has reached it the control is switched off for good
    (recording ``tau``), otherwise the control acts during the step and the
    integral grows by ``dt * ||P_n(u - u_shadow)||^2`` at the step's start.

    Returns ``(primary_next, shadow_next)``; the shadow carries the clock.
    """
    if primary.model.grid != shadow.model.grid:
        raise PreconditionError("primary and shadow must share a grid")
    _check_cfl(primary, dt)
    _check_cfl(shadow, dt)
    if dW is None:
        dW = draw_increments(primary, dt)
    clock = shadow.clock.copy() if shadow.clock is not None else CouplingClock.fresh(shadow.n_paths)
    scheme = shadow.model.scheme

    pn = scheme.control_norm_sq(primary.u - shadow.u, n_modes)
    pn = np.atleast_1d(pn)
    newly = (~clock.fired) & (clock.integral >= budget)
    clock.fired |= newly
    clock.tau[newly] = shadow.t
    active = ~clock.fired
    clock.integral = clock.integral + np.where(active, dt * pn, 0.0)

    def advance(pair, h, w):
        p, s = pair
        p_next = _raw_step(p, h, w)
        ctrl = Control(lam, n_modes, p_next.u, active if shadow.batched else active[0])
        s_next = _raw_step(s, h, w, ctrl)
        return p_next, s_next

    p_next, s_next = _with_halving(advance, (primary, shadow), dt, dW, primary.rngs, primary.batched)
    for out, src in ((p_next, primary), (s_next, shadow)):
        out.step_index = src.step_index + 1
        out.t = src.t + dt
    s_next.clock = clock
    return p_next, s_next
