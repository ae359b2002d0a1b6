"""Statistical experiments: time averages, coupling, Wasserstein decay, moments.

Ensembles are stepped as one batched state (the path axis is vectorized),
with path ``i`` driven by stream ``i`` of the master seed. Reductions over
paths always run in path order, so results are reproducible bitwise.
"""

from __future__ import annotations

import copy
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.integrate import trapezoid

from .dynamics.integrate import integrate, n_steps_for
from .dynamics.model import BC, CouplingClock, SystemState, replicate
from .dynamics.stepper import shadow_step, step
from .errors import PreconditionError, SnpnsError, UnderpoweredError
from .fields import integrate as quad, ops_for
from .observables import (ObservableSeries, charge_norm_sq, deviation_norm_sq, entropy_with_flags,
                          fit_decay_rate, kinetic_energy, potential_energy,
                          velocity_gradient_norm_sq)

MIN_SAMPLES = 100


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, enum.Enum):
        return o.value
    return str(o)


def _write(out_dir, stem: str, payload: dict, series: Mapping[str, tuple[np.ndarray, np.ndarray]]):
    """JSON summary plus one CSV per series (columns ``t`` then one per path)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable))
    for name, (t, v) in series.items():
        v = np.asarray(v, dtype=float)
        v = v.reshape(len(t), -1)
        cols = ["t"] + ([name] if v.shape[1] == 1 else [f"{name}_{j}" for j in range(v.shape[1])])
        head = "# " + json.dumps({"name": name, "experiment": stem}, sort_keys=True)
        rows = [",".join(repr(float(x)) for x in (ti, *vi)) for ti, vi in zip(t, v)]
        (out / f"{stem}_{name}.csv").write_text("\n".join([head, ",".join(cols)] + rows) + "\n")
    return out


# --------------------------------------------------------------------------
# Time averages and Wasserstein distance


def time_average(series: ObservableSeries, T: float, t0: float | None = None) -> float:
    """``(1/T) * integral`` of the series over ``[t0, t0 + T]`` by the trapezoid rule.

    ``t0`` defaults to the first sample time; the series must cover the window.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    t, v = series.times, series.values
    start = t[0] if t0 is None else t0
    end = start + T
    tol = 1e-9 * max(1.0, abs(end))
    if t[0] > start + tol or t[-1] < end - tol:
        raise ValueError(f"series covers [{t[0]}, {t[-1]}], not [{start}, {end}]")
    inside = (t > start + tol) & (t < end - tol)
    tt = np.concatenate([[start], t[inside], [end]])
    vv = np.concatenate([[np.interp(start, t, v)], v[inside], [np.interp(end, t, v)]])
    return float(trapezoid(vv, tt) / T)


def _running_averages(t: np.ndarray, values: np.ndarray, T_list: Sequence[float]) -> np.ndarray:
    """Time averages over ``[t0, t0+T]`` for each ``T`` and each column of ``values``."""
    out = []
    for T in T_list:
        end = t[0] + T
        k = int(np.searchsorted(t, end - 1e-9 * max(1.0, end))) + 1
        out.append(trapezoid(values[:k], t[:k], axis=0) / T)
    return np.array(out)


def empirical_wasserstein_1d(samples_a: Sequence[float], samples_b: Sequence[float]) -> float:
    """``W_1`` between two empirical distributions on the line.

    Equal lengths pair the sorted samples. For unequal lengths the longer
    sample is resampled at the mid-quantiles ``(j + 1/2)/n`` of the shorter
    length ``n`` before pairing.
    """
    a = np.sort(np.asarray(samples_a, dtype=float).reshape(-1))
    b = np.sort(np.asarray(samples_b, dtype=float).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise ValueError("both sample lists must be nonempty")
    n = min(a.size, b.size)
    q = (np.arange(n) + 0.5) / n
    if a.size != n:
        a = np.quantile(a, q)
    if b.size != n:
        b = np.quantile(b, q)
    return float(np.mean(np.abs(a - b)))


# --------------------------------------------------------------------------
# Observables used by the experiments

def _entropy_values(s: SystemState):
    return entropy_with_flags(s)[0]


KB_OBSERVABLES: dict[str, Callable[[SystemState], np.ndarray]] = {
    "kinetic": kinetic_energy,
    "charge": charge_norm_sq,
    "deviation": deviation_norm_sq,
    "entropy": _entropy_values,
}


def _paths(x, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(x, dtype=float), (n,)).copy() if np.ndim(x) == 0 \
        else np.asarray(x, dtype=float)


# --------------------------------------------------------------------------
# Krylov-Bogoliubov averages


@dataclass
class KBReport:
    T_list: list[float]
    observables: list[str]
    mu_a: dict[str, np.ndarray]          # (len(T_list), n_paths)
    mu_b: dict[str, np.ndarray]
    discrepancy: dict[str, list[float]]  # |mean_a - mean_b| per T
    long_run_mean: dict[str, float]
    meta: dict = field(default_factory=dict)

    def relative_discrepancy(self, name: str) -> list[float]:
        ref = abs(self.long_run_mean[name])
        return [d / ref if ref > 0 else math.inf for d in self.discrepancy[name]]

    def decreasing(self, name: str) -> bool:
        d = self.discrepancy[name]
        return all(b < a for a, b in zip(d[:-1], d[1:]))

    def to_dict(self) -> dict:
        return {"T_list": self.T_list, "observables": self.observables,
                "mean_a": {k: v.mean(axis=1).tolist() for k, v in self.mu_a.items()},
                "mean_b": {k: v.mean(axis=1).tolist() for k, v in self.mu_b.items()},
                "discrepancy": self.discrepancy,
                "relative_discrepancy": {k: self.relative_discrepancy(k) for k in self.observables},
                "long_run_mean": self.long_run_mean, "meta": self.meta}

    def write(self, out_dir) -> Path:
        series = {}
        for k in self.observables:
            series[f"mu_a_{k}"] = (np.array(self.T_list), self.mu_a[k])
            series[f"mu_b_{k}"] = (np.array(self.T_list), self.mu_b[k])
        return _write(out_dir, "kb", self.to_dict(), series)


def kb_convergence_experiment(state_a: SystemState, state_b: SystemState, T_list: Sequence[float],
                              n_paths: int, seed: int, dt: float, record_every: int = 5,
                              observables: Mapping[str, Callable] | None = None) -> KBReport:
    """Time averages ``mu_T(phi)`` from two initial states under common random numbers.

    Path ``i`` from either initial state uses stream ``i`` of ``seed``, so
    the two ensembles see the same noise realizations. The discrepancy for
    each observable and ``T`` is the absolute difference of the path means.
    """
    T_list = [float(T) for T in T_list]
    if not T_list or any(T <= 0 for T in T_list) or any(b <= a for a, b in zip(T_list, T_list[1:])):
        raise ValueError("T_list must be positive and strictly increasing")
    if state_a.batched or state_b.batched:
        raise ValueError("initial states must be single paths")
    obs = dict(observables or KB_OBSERVABLES)
    Tmax = T_list[-1]
    n_steps_for(Tmax, dt * record_every)
    runs = []
    for s0 in (state_a, state_b):
        ens = replicate(s0, n_paths, seed)
        tr = integrate(ens, dt, Tmax, obs, record_every=record_every)
        runs.append(tr)
    mu_a, mu_b, disc, lr = {}, {}, {}, {}
    for k in obs:
        ra = runs[0].records[k].reshape(len(runs[0].times), n_paths)
        rb = runs[1].records[k].reshape(len(runs[1].times), n_paths)
        mu_a[k] = _running_averages(runs[0].times - runs[0].times[0], ra, T_list)
        mu_b[k] = _running_averages(runs[1].times - runs[1].times[0], rb, T_list)
        disc[k] = [float(abs(a.mean() - b.mean())) for a, b in zip(mu_a[k], mu_b[k])]
        lr[k] = float(0.5 * (mu_a[k][-1].mean() + mu_b[k][-1].mean()))
    meta = {"seed": seed, "n_paths": n_paths, "dt": dt, "record_every": record_every,
            "model": state_a.model.describe()}
    return KBReport(T_list, list(obs), mu_a, mu_b, disc, lr, meta)


# --------------------------------------------------------------------------
# Coupling with a controlled shadow


def coupling_energy(primary: SystemState, shadow: SystemState) -> np.ndarray:
    """Difference energy ``Q``.

    Two-species torus (``z = (1, -1)``): ``|U|^2 + |R|^2 + |S|^2 + |grad Psi|^2``;
    otherwise ``|U|^2 + sum_i |C_i|^2``.
    """
    g = primary.grid
    model = primary.model
    dU = quad(g, np.sum((primary.u - shadow.u) ** 2, axis=-3))
    dc = primary.c - shadow.c
    if g.is_torus and model.n_species == 2 and tuple(model.z) == (1.0, -1.0):
        R = dc[..., 0, :, :] - dc[..., 1, :, :]
        S = dc[..., 0, :, :] + dc[..., 1, :, :]
        _, gpsi = model.scheme.potential(dc)
        return np.asarray(dU + quad(g, R**2) + quad(g, S**2) + quad(g, np.sum(gpsi**2, axis=-3)))
    return np.asarray(dU + quad(g, dc**2).sum(axis=-1))


@dataclass
class CouplingReport:
    times: np.ndarray
    Q: np.ndarray                 # (n_times, n_paths)
    fired: np.ndarray
    tau: np.ndarray
    failed: dict[int, str]
    threshold: float
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.Q.shape[1]

    @property
    def contracted(self) -> np.ndarray:
        q0, qT = self.Q[0], self.Q[-1]
        ok = (qT < self.threshold * q0) | (q0 == 0)
        ok[list(self.failed)] = False
        return ok

    @property
    def fraction_contracted(self) -> float:
        return float(np.mean(self.contracted))

    @property
    def fired_fraction(self) -> float:
        return float(np.mean(self.fired))

    def nonincreasing_after(self, t_transient: float, rtol: float = 1e-9) -> np.ndarray:
        """Per path: ``Q`` never grows (beyond ``rtol``) after ``t_transient``."""
        q = self.Q[self.times >= t_transient]
        return np.all(np.diff(q, axis=0) <= rtol * q[:-1], axis=0)

    def to_dict(self) -> dict:
        return {"fraction_contracted": self.fraction_contracted, "fired_fraction": self.fired_fraction,
                "threshold": self.threshold, "failed": {str(k): v for k, v in self.failed.items()},
                "Q0": self.Q[0].tolist(), "QT": self.Q[-1].tolist(),
                "tau": [None if np.isnan(x) else float(x) for x in self.tau], "meta": self.meta}

    def write(self, out_dir) -> Path:
        return _write(out_dir, "couple", self.to_dict(), {"Q": (self.times, self.Q)})


def _couple_batch(primary, shadow, dt, n_steps, lam, n_modes, budget, record_every):
    times, qs = [primary.t], [coupling_energy(primary, shadow)]
    for i in range(1, n_steps + 1):
        primary, shadow = shadow_step(primary, shadow, dt, lam, n_modes, budget)
        if i % record_every == 0 or i == n_steps:
            times.append(primary.t)
            qs.append(coupling_energy(primary, shadow))
    # a control that was still on at the end did not fire
    return np.array(times), np.array(qs).reshape(len(times), -1), shadow.clock


def coupling_experiment(primary: SystemState, shadow: SystemState, lam: float, n_modes: int,
                        k_budget: float, T: float, dt: float, n_paths: int = 64, seed: int = 0,
                        threshold: float = 1e-6, record_every: int = 1) -> CouplingReport:
    """Run ``n_paths`` primary/shadow pairs under shared noise and record ``Q``.

    ``primary`` and ``shadow`` are single-path initial states; both are
    replicated across paths and path ``i`` uses stream ``i`` of ``seed``. A
    numerical failure is confined to its path and reported in ``failed``.
    """
    if primary.batched or shadow.batched:
        raise ValueError("initial states must be single paths")
    n_steps = n_steps_for(T, dt)
    P = replicate(primary, n_paths, seed)
    S = replicate(shadow, n_paths, seed).replace(rngs=(), clock=CouplingClock.fresh(n_paths))
    saved = [copy.deepcopy(r) for r in P.rngs]
    failed: dict[int, str] = {}
    try:
        times, Q, clock = _couple_batch(P, S, dt, n_steps, lam, n_modes, k_budget, record_every)
        fired, tau = clock.fired, clock.tau
    except SnpnsError:
        # isolate the failing paths and rerun the others one at a time
        cols, fired, tau = [], np.zeros(n_paths, bool), np.full(n_paths, np.nan)
        times = None
        for i in range(n_paths):
            p = SystemState(primary.model, primary.u, primary.c, primary.t, (copy.deepcopy(saved[i]),))
            s = SystemState(shadow.model, shadow.u, shadow.c, shadow.t, clock=CouplingClock.fresh(1))
            try:
                t_i, q_i, clk = _couple_batch(p, s, dt, n_steps, lam, n_modes, k_budget, record_every)
                times = t_i
                cols.append(q_i[:, 0])
                fired[i], tau[i] = clk.fired[0], clk.tau[0]
            except SnpnsError as exc:
                failed[i] = f"{type(exc).__name__}: {exc}"
                cols.append(None)
        if times is None:
            times = np.array([primary.t])
        Q = np.column_stack([c if c is not None else np.full(len(times), np.nan) for c in cols])
    meta = {"lambda": lam, "n_modes": n_modes, "k_budget": k_budget, "T": T, "dt": dt,
            "n_paths": n_paths, "seed": seed, "model": primary.model.describe()}
    return CouplingReport(times, Q, np.asarray(fired), np.asarray(tau), failed, threshold, meta)


def coupling_mode_sweep(primary: SystemState, shadow: SystemState, lam: float,
                        n_list: Sequence[int], k_budget: float, T: float, dt: float,
                        n_paths: int = 64, seed: int = 0, threshold: float = 1e-6,
                        record_every: int = 1) -> dict:
    """Repeat :func:`coupling_experiment` over the controlled-mode counts in ``n_list``.

    The returned ``threshold_n`` is the smallest swept count from which every
    larger count contracts all paths, or ``None`` if the largest one does not.
    """
    ns = sorted(int(n) for n in n_list)
    if not ns:
        raise ValueError("n_list is empty")
    rows = []
    for n in ns:
        rep = coupling_experiment(primary, shadow, lam, n, k_budget, T, dt, n_paths, seed, threshold,
                                  record_every)
        rows.append({"n_modes": n, "fraction_contracted": rep.fraction_contracted,
                     "fired_fraction": rep.fired_fraction, "failed": len(rep.failed)})
    threshold_n = None
    for row in reversed(rows):
        if row["fraction_contracted"] < 1.0:
            break
        threshold_n = row["n_modes"]
    return {"rows": rows, "threshold_n": threshold_n, "lambda": lam, "T": T, "dt": dt,
            "n_paths": n_paths, "seed": seed, "threshold": threshold}


# --------------------------------------------------------------------------
# Exponential ergodicity via 1D marginals


@dataclass
class ErgodicityReport:
    t_grid: np.ndarray
    W: np.ndarray
    noise_floor: float
    rate: float | None
    r_squared: float | None
    control_W: np.ndarray | None
    meta: dict = field(default_factory=dict)

    def decreasing_beyond_floor(self, factor: float = 1.0) -> bool:
        """Each ``W(t)`` is below its predecessor or within ``factor * floor`` of the floor."""
        band = factor * self.noise_floor
        return all(b < a or b <= band for a, b in zip(self.W[:-1], self.W[1:])) \
            and self.W[0] > self.noise_floor + band

    def control_at_floor(self, factor: float = 3.0) -> bool:
        return self.control_W is not None and bool(np.all(self.control_W <= factor * self.noise_floor))

    def to_dict(self) -> dict:
        return {"t_grid": self.t_grid.tolist(), "W": self.W.tolist(), "noise_floor": self.noise_floor,
                "rate": self.rate, "r_squared": self.r_squared,
                "control_W": None if self.control_W is None else self.control_W.tolist(),
                "metric": "W1 on a scalar marginal (lower-bound proxy)", "meta": self.meta}

    def write(self, out_dir) -> Path:
        series = {"W": (self.t_grid, self.W)}
        if self.control_W is not None:
            series["control_W"] = (self.t_grid, self.control_W)
        return _write(out_dir, "expergo", self.to_dict(), series)


def _sample_at(state: SystemState, dt: float, t_grid: np.ndarray, observable) -> np.ndarray:
    """Observable values of a batched state at the (relative) times ``t_grid``."""
    out, s, t_now = [], state, 0.0
    for t in t_grid:
        n = n_steps_for(t - t_now, dt) if t > t_now else 0
        for _ in range(n):
            s = step(s, dt)
        t_now = t
        out.append(_paths(observable(s), s.n_paths))
    return np.array(out), s


def _burn(state: SystemState, n_paths: int, burn_in: float, dt: float, seed: int,
          start: int) -> SystemState:
    ens = replicate(state, n_paths, seed, start=start)
    for _ in range(n_steps_for(burn_in, dt)):
        ens = step(ens, dt)
    return ens


def long_run_samples(state: SystemState, observable, n_paths: int, burn_in: float,
                     spacing: float, n_spacings: int, dt: float, seed: int, start: int) -> np.ndarray:
    """Pool of observable samples after ``burn_in``, every ``spacing`` for ``n_spacings`` draws."""
    ens = _burn(state, n_paths, burn_in, dt, seed, start)
    vals, _ = _sample_at(ens, dt, np.arange(n_spacings) * spacing, observable)
    return vals.reshape(-1)


def exp_ergodicity_experiment(omega: SystemState, observable: Callable[[SystemState], np.ndarray],
                              t_grid: Sequence[float], n_paths: int, reference_T: float, seed: int,
                              dt: float, spacing: float = 1.0, n_spacings: int = 10,
                              n_reference_paths: int | None = None, control: bool = True,
                              floor_draws: int = 32) -> ErgodicityReport:
    """Wasserstein distance between ``P_t(omega, .)`` and the long-run law of one observable.

    The long-run law is sampled from ``n_reference_paths`` paths after a
    burn-in of ``reference_T``, every ``spacing`` time units. The noise floor
    is the mean ``W_1`` between random ``n_paths``-subsets of that pool and
    the pool itself. The stationarity control starts every path from its
    own long-run state (a separately burned-in ensemble) instead of
    ``omega``. Test, reference and control paths use disjoint streams.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if n_paths < MIN_SAMPLES:
        raise UnderpoweredError(f"{n_paths} paths per time; need at least {MIN_SAMPLES}")
    if t_grid.size == 0 or np.any(np.diff(t_grid) <= 0) or t_grid[0] < 0:
        raise ValueError("t_grid must be nonempty, nonnegative and increasing")
    n_ref = n_paths if n_reference_paths is None else n_reference_paths
    pool = long_run_samples(omega, observable, n_ref, reference_T, spacing, n_spacings,
                            dt, seed, start=n_paths)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2**30 + 1,)))
    floor = float(np.mean([empirical_wasserstein_1d(rng.choice(pool, n_paths, replace=False), pool)
                           for _ in range(floor_draws)]))

    def w_series(ens):
        vals, _ = _sample_at(ens, dt, t_grid, observable)
        return np.array([empirical_wasserstein_1d(v, pool) for v in vals])

    W = w_series(replicate(omega, n_paths, seed))
    control_W = None
    if control:
        start = n_paths + n_ref
        burned = _burn(omega, n_paths, reference_T, dt, seed, start)
        ens = burned.replace(t=0.0, step_index=0,
                             rngs=tuple(np.random.default_rng(np.random.SeedSequence(
                                 seed, spawn_key=(start + n_paths + i,))) for i in range(n_paths)))
        control_W = w_series(ens)
    excess = np.maximum(W - floor, 0.0)
    keep = excess > 0
    rate = r2 = None
    if keep.sum() >= 2:
        fit = fit_decay_rate(ObservableSeries("W_excess", t_grid[keep], excess[keep]))
        rate, r2 = fit.rate, fit.r_squared
    meta = {"seed": seed, "n_paths": n_paths, "reference_T": reference_T, "spacing": spacing,
            "n_spacings": n_spacings, "n_reference_paths": n_ref, "dt": dt, "pool_size": int(pool.size),
            "model": omega.model.describe()}
    return ErgodicityReport(t_grid, W, floor, rate, r2, control_W, meta)


# --------------------------------------------------------------------------
# Moment monitors


class MomentQuantity(enum.Enum):
    ENERGY_LINEAR = "EnergyLinear"
    ENERGY_QUARTIC = "EnergyQuartic"
    CHARGE_EXP = "ChargeExp"
    TORUS_QUADRATIC = "TorusQuadratic"
    LOG_H1 = "LogH1"

    @classmethod
    def parse(cls, value) -> "MomentQuantity":
        if isinstance(value, cls):
            return value
        for q in cls:
            if q.value.lower() == str(value).lower() or q.name.lower() == str(value).lower():
                return q
        raise ValueError(f"unknown moment quantity {value!r}")


def charge_exp_cap(state: SystemState) -> float:
    """Upper end of the admissible ``eta`` range for the charge exponential moment."""
    s = state.noise.neg_power_norm_sq()
    return math.inf if s == 0 else 1.0 / (4.0 * s)


def _energy(s):
    return _paths(kinetic_energy(s), s.n_paths) + _paths(potential_energy(s), s.n_paths)


def _log_h1(s):
    ops = ops_for(s.grid)
    g = ops.grad(s.c)
    return np.log1p(quad(s.grid, np.sum(g**2, axis=-3))).sum(axis=-1)


@dataclass
class MomentReport:
    quantity: str
    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    slope: float
    slope_stderr: float
    values: np.ndarray = field(repr=False)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"quantity": self.quantity, "slope": self.slope, "slope_stderr": self.slope_stderr,
                "mean": self.mean.tolist(), "stderr": self.stderr.tolist(),
                "times": self.times.tolist(), "meta": self.meta}

    def write(self, out_dir) -> Path:
        return _write(out_dir, f"moments_{self.quantity}", self.to_dict(),
                      {"mean": (self.times, self.mean), "stderr": (self.times, self.stderr)})


def moment_monitor(ensemble: SystemState, quantity, dt: float, T: float, record_every: int = 1,
                   eta: float | None = None, fit_from: float = 0.0) -> MomentReport:
    """Ensemble mean of a moment quantity over time, with a fitted growth slope.

    Quantities: ``EnergyLinear`` (``|u|^2 + |grad Phi|^2``), ``EnergyQuartic``
    (its square), ``ChargeExp`` (``exp(eta D/2 int |rho|^2)``, fitted in
    log scale, ``eta`` defaulting to half the admissible cap),
    ``TorusQuadratic`` (``int |grad u|^2/2 + D |rho|^2``) and ``LogH1``
    (``int sum_i log(1 + |grad c_i|^2)``). Time integrals use the left
    endpoint rule at every step. The slope is fitted on ``t >= fit_from``.
    """
    q = MomentQuantity.parse(quantity)
    if not ensemble.batched:
        raise ValueError("moment_monitor needs an ensemble state")
    n = ensemble.n_paths
    Dmin = float(np.min(ensemble.model.D))
    if q is MomentQuantity.CHARGE_EXP:
        cap = charge_exp_cap(ensemble)
        eta = 0.5 * cap if eta is None else eta
        if not 0 < eta < cap:
            raise PreconditionError(f"eta must lie in (0, {cap:.4g})")

    def density(s):
        if q is MomentQuantity.CHARGE_EXP:
            return 0.5 * eta * Dmin * _paths(charge_norm_sq(s), n)
        if q is MomentQuantity.TORUS_QUADRATIC:
            return 0.5 * _paths(velocity_gradient_norm_sq(s), n) + Dmin * _paths(charge_norm_sq(s), n)
        if q is MomentQuantity.LOG_H1:
            return _log_h1(s)
        return None

    def value(s, acc):
        if q is MomentQuantity.ENERGY_LINEAR:
            return _energy(s)
        if q is MomentQuantity.ENERGY_QUARTIC:
            return _energy(s) ** 2
        return acc

    n_steps = n_steps_for(T, dt)
    s, acc = ensemble, np.zeros(n)
    times, vals = [s.t], [value(s, acc)]
    for i in range(1, n_steps + 1):
        d = density(s)
        if d is not None:
            acc = acc + dt * d
        s = step(s, dt)
        if i % record_every == 0 or i == n_steps:
            times.append(s.t)
            vals.append(value(s, acc))
    times = np.array(times)
    vals = np.array(vals)
    if q is MomentQuantity.CHARGE_EXP:
        # fit log E[exp(.)] computed stably from the log values
        m = vals.max(axis=1, keepdims=True)
        e = np.exp(vals - m)
        mean = m[:, 0] + np.log(e.mean(axis=1))
        # delta method: stderr of log(mean) is stderr(mean)/mean
        stderr = e.std(axis=1, ddof=1) / np.sqrt(n) / e.mean(axis=1)
    else:
        mean = vals.mean(axis=1)
        stderr = vals.std(axis=1, ddof=1) / np.sqrt(n)
    sel = times >= fit_from
    fit = stats.linregress(times[sel], mean[sel])
    meta = {"dt": dt, "T": T, "n_paths": n, "eta": eta, "nonlinear": ensemble.model.nonlinear,
            "log_scale": q is MomentQuantity.CHARGE_EXP, "model": ensemble.model.describe()}
    return MomentReport(q.value, times, mean, stderr, float(fit.slope), float(fit.stderr), vals, meta)


def ou_mean_energy(noise, u0_coeffs: np.ndarray, dt: float, n_steps: int) -> np.ndarray:
    """Mean ``|u|^2`` of the linear scheme driven by orthonormal eigenmode noise.

    Each mode obeys ``a_{n+1} = (a_n + amp dW) / (1 + dt mu)``; the closed
    form is ``E a_n^2 = r^{2n} a_0^2 + amp^2 dt r^2 (1 - r^{2n}) / (1 - r^2)``
    with ``r = 1/(1 + dt mu)``. Returns the values at steps ``0..n_steps``.
    """
    r2 = (1.0 / (1.0 + dt * noise.eigenvalues)) ** 2
    k = np.arange(n_steps + 1)[:, None]
    rk = r2[None, :] ** k
    amp2 = noise.amplitudes**2
    return np.sum(rk * u0_coeffs**2 + amp2 * dt * r2 * (1.0 - rk) / (1.0 - r2), axis=1)


# --------------------------------------------------------------------------
# Equal-valence decay


@dataclass
class ValenceDecayReport:
    series: ObservableSeries
    monotone: bool
    rate: float
    r_squared: float
    heat_bound: float
    meta: dict = field(default_factory=dict)

    @property
    def rate_ok(self) -> bool:
        return self.rate >= self.heat_bound * (1 - 1e-9)

    def to_dict(self) -> dict:
        return {"monotone": self.monotone, "rate": self.rate, "r_squared": self.r_squared,
                "heat_bound": self.heat_bound, "rate_ok": self.rate_ok, "meta": self.meta}


def lowest_heat_eigenvalue(state: SystemState) -> float:
    """Smallest nonzero eigenvalue of the discrete Laplacian the charge relaxes with."""
    g = state.grid
    if g.is_torus:
        return 1.0
    nx, ny = g.shape
    neu = min(4.0 / g.hx**2 * math.sin(math.pi / (2 * (nx - 1))) ** 2,
              4.0 / g.hy**2 * math.sin(math.pi / (2 * (ny - 1))) ** 2)
    dirichlet = (4.0 / g.hx**2 * math.sin(math.pi / (2 * (nx - 1))) ** 2
                 + 4.0 / g.hy**2 * math.sin(math.pi / (2 * (ny - 1))) ** 2)
    if any(s.bc is BC.BLOCKING for s in state.params):
        return neu
    return dirichlet


def equal_valence_decay_check(initial: SystemState, dt: float, T: float, record_every: int = 1,
                              window: tuple[float, float] | None = None,
                              mono_rtol: float = 1e-12) -> ValenceDecayReport:
    """Run ``initial`` with ``f = g = 0`` and check the decay of the charge.

    Square: the monitored quantity is ``|rho|^2``; torus: ``sum_i |c_i - c_bar_i|^2``.
    Reports monotonicity, the fitted rate and the heat lower bound
    ``2 D lambda_1``.
    """
    model = initial.model
    absz = np.abs(model.z)
    if not np.allclose(absz, absz[0]) or not np.allclose(model.D, model.D[0]):
        raise PreconditionError("equal |z_i| and equal D_i are required")
    if np.any(model.forcing != 0) or (model.noise.count and np.any(model.noise.amplitudes != 0)):
        raise PreconditionError("the decay check needs f = 0 and g = 0")
    if initial.batched:
        raise ValueError("single-path state expected")
    fn = deviation_norm_sq if model.grid.is_torus else charge_norm_sq
    tr = integrate(initial, dt, T, {"q": fn}, record_every=record_every)
    vals = tr.records["q"]
    series = ObservableSeries("charge_decay", tr.times, vals)
    monotone = bool(np.all(np.diff(vals) <= mono_rtol * np.maximum(vals[:-1], 1e-300)))
    if np.all(vals == 0):
        rate, r2 = math.inf, 1.0
    else:
        pos = vals > 0
        fit = fit_decay_rate(ObservableSeries("q", tr.times[pos], vals[pos]), window)
        rate, r2 = fit.rate, fit.r_squared
    bound = 2.0 * float(model.D[0]) * lowest_heat_eigenvalue(initial)
    return ValenceDecayReport(series, monotone, rate, r2, bound,
                              {"dt": dt, "T": T, "model": model.describe()})


__all__ = [
    "time_average", "empirical_wasserstein_1d", "KB_OBSERVABLES", "KBReport",
    "kb_convergence_experiment", "coupling_energy", "CouplingReport", "coupling_experiment",
    "coupling_mode_sweep", "ErgodicityReport", "long_run_samples", "exp_ergodicity_experiment", "MomentQuantity",
    "MomentReport", "moment_monitor", "charge_exp_cap", "ou_mean_energy", "ValenceDecayReport",
    "lowest_heat_eigenvalue", "equal_valence_decay_check",
]
