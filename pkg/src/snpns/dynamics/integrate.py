"""Fixed-step integration loops with periodic recording."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .model import SystemState
from .stepper import step

Observer = Callable[[SystemState], "np.ndarray | float"]


@dataclass
class Trajectory:
    """Recorded observables (and optionally states) at the sampling times."""

    times: np.ndarray
    records: dict[str, np.ndarray]
    final: SystemState
    states: list[SystemState] = field(default_factory=list)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.records[name]


def n_steps_for(T: float, dt: float) -> int:
    n = int(round(T / dt))
    if n < 0 or abs(n * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"T={T} is not a whole number of steps of dt={dt}")
    return n


def integrate(state: SystemState, dt: float, T: float,
              observers: Mapping[str, Observer] | None = None, record_every: int = 1,
              keep_states: bool = False,
              stepper: Callable[[SystemState, float], SystemState] = step) -> Trajectory:
    """Take ``T/dt`` steps, evaluating ``observers`` every ``record_every`` steps.

    The initial state is always recorded, and so is the final one.
    """
    observers = dict(observers or {})
    n = n_steps_for(T, dt)
    times, recs, states = [], {k: [] for k in observers}, []

    def record(s):
        times.append(s.t)
        for k, fn in observers.items():
            recs[k].append(np.asarray(fn(s), dtype=float))
        if keep_states:
            states.append(s)

    record(state)
    s = state
    for i in range(1, n + 1):
        s = stepper(s, dt)
        if i % record_every == 0 or i == n:
            record(s)
    return Trajectory(np.array(times), {k: np.array(v) for k, v in recs.items()}, s, states)
