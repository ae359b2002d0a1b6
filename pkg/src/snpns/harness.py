"""Run orchestration: experiments, artifacts on disk, checkpoints and plot scripts.

Every run directory holds ``config.resolved`` (the canonical configuration),
``meta.json`` (its hash, the experiment and the seed) and the experiment's
CSV/JSON outputs. Wall-clock information goes only to ``run.log``, so two
runs of the same configuration produce identical files apart from the log.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import ergodicity as erg
from . import observables as obs
from .config import RunConfig, load_config, parse_config
from .dynamics.checkpoint import load_checkpoint, save_checkpoint
from .dynamics.initial import lowest_mode_data
from .dynamics.integrate import integrate
from .dynamics.model import SystemState, replicate
from .dynamics.picard import direct_solution, picard_solve, sup_l2_gap
from .dynamics.stepper import step
from .errors import ConfigError, SnpnsError
from .fields import ScalarField, VectorField, integrate as quad, set_fft_workers, torus_ops
from .poisson import elliptic_ratio_test

EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("snpns")


def _dump(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=erg._jsonable) + "\n")


def _write_table(path: Path, times, values, name: str, cfg_hash: str) -> None:
    values = np.asarray(values, dtype=float).reshape(len(times), -1)
    cols = ["t"] + ([name] if values.shape[1] == 1 else [f"{name}_{j}" for j in range(values.shape[1])])
    head = "# " + json.dumps({"name": name, "config_hash": cfg_hash}, sort_keys=True)
    rows = [",".join(repr(float(x)) for x in (t, *v)) for t, v in zip(times, values)]
    path.write_text("\n".join([head, ",".join(cols)] + rows) + "\n")


def _diagnostics(s: SystemState) -> dict[str, np.ndarray]:
    ent, floored = obs.entropy_with_flags(s)
    return {
        "kinetic": np.atleast_1d(obs.kinetic_energy(s)),
        "potential": np.atleast_1d(obs.potential_energy(s)),
        "charge": np.atleast_1d(obs.charge_norm_sq(s)),
        "deviation": np.atleast_1d(obs.deviation_norm_sq(s)),
        "entropy": np.atleast_1d(ent),
        "entropy_floored": np.atleast_1d(floored).astype(float),
        "min_c": np.atleast_1d(s.min_c),
    }


# --------------------------------------------------------------------------
# Experiments


def _simulate_from(cfg: RunConfig, state: SystemState, out: Path, cfg_hash: str) -> dict:
    dt, T = cfg.dt, cfg.T
    every = cfg["time.record_every"]
    ckpt_every = cfg["run.checkpoint_every"]
    n_total = int(round(T / dt))
    if abs(n_total * dt - T) > 1e-9 * max(1.0, T):
        raise ConfigError("time.T must be a whole number of time steps")
    times, recs = [], {}

    def record(s):
        times.append(s.t)
        for k, v in _diagnostics(s).items():
            recs.setdefault(k, []).append(v)

    s = state
    if s.step_index % every == 0:
        record(s)
    extra = {"config": cfg.to_text()}
    while s.step_index < n_total:
        s = step(s, dt)
        i = s.step_index
        if i % every == 0 or i == n_total:
            record(s)
        if ckpt_every and i % ckpt_every == 0 and i < n_total:
            save_checkpoint(out / "checkpoints" / f"step_{i:08d}", s, extra)
    save_checkpoint(out / "final", s, extra)
    for k, v in recs.items():
        _write_table(out / f"series_{k}.csv", times, v, k, cfg_hash)
    return {"steps": s.step_index, "t_final": s.t, "n_records": len(times),
            "clamp_events": s.clamp_events}


def _exp_simulate(cfg: RunConfig, out: Path, cfg_hash: str) -> dict:
    state = cfg.initial_state()
    if cfg["run.n_paths"] > 1:
        state = replicate(state, cfg["run.n_paths"], cfg.seed)
    return _simulate_from(cfg, state, out, cfg_hash)


def _exp_decay(cfg: RunConfig, out: Path, cfg_hash: str) -> dict:
    model = cfg.build_model()
    state = lowest_mode_data(model, cfg["species.means"], cfg["decay.eps"], noise_seed=cfg.seed)
    p = cfg["decay.p"]
    targets = obs.default_targets(state)

    def l2(s):
        return float(np.sum(quad(s.grid, (s.c - targets[:, None, None]) ** 2)))

    tr = integrate(state, cfg.dt, cfg.T, {"l2": l2, "lp": lambda s: obs.lp_deviation(s, p, targets)},
                       record_every=cfg["time.record_every"])
    l2s = obs.ObservableSeries("l2_deviation_sq", tr.times, tr.records["l2"], cfg_hash)
    lps = obs.ObservableSeries(f"L{p}_deviation", tr.times, tr.records["lp"], cfg_hash)
    win = cfg["decay.window"] or [cfg.T / 2, cfg.T]
    fit = obs.fit_decay_rate(l2s, tuple(win))
    l2s.to_csv(out / "series_l2_deviation_sq.csv")
    lps.to_csv(out / f"series_L{p}_deviation.csv")
    tail = lps.values[len(lps.values) // 2:]
    return {"rate": fit.rate, "r_squared": fit.r_squared, "window": win,
            "lp_eventually_monotone": bool(np.all(np.diff(tail) <= 0))}


def _exp_picard(cfg: RunConfig, out: Path, cfg_hash: str) -> dict:
    state = cfg.initial_state()
    res = picard_solve(state, cfg["picard.T0"], cfg["picard.m_max"], cfg["picard.tol"])
    u, c = direct_solution(state, res)
    gap = sup_l2_gap(res.u, res.c, u, c, state.grid.weights)
    idx = np.arange(1, res.iterations + 1, dtype=float)
    _write_table(out / "picard_distances.csv", idx, res.distances, "distance", cfg_hash)
    return {"iterations": res.iterations, "converged": res.converged, "dt": res.dt,
            "distances": res.distances, "direct_gap": gap}


def _random_band(ops, rng, kmax: float) -> np.ndarray:
    band = (ops.kabs > 0) & (ops.kabs <= kmax)
    shape = ops.kabs.shape
    return ops.ifft((rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * band)


def _exp_identities(cfg: RunConfig, out: Path, cfg_hash: str) -> dict:
    grid = cfg.grid
    if not grid.is_torus:
        raise ConfigError("the identities experiment runs on the torus")
    ops = torus_ops(grid)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(3,)))
    kmax = cfg["identities.kmax"]
    rows = []
    for i in range(cfg["identities.samples"]):
        u = ops.leray(np.stack([_random_band(ops, rng, kmax), _random_band(ops, rng, kmax)]))
        rho = _random_band(ops, rng, kmax)
        phi = ops.ifft(ops.fft(rho) * ops.inv_k2)
        sigma = _random_band(ops, rng, kmax)
        sigma += 1.0 - sigma.min()
        a = obs.cancellation_residual_velocity(VectorField(grid, u), ScalarField(grid, rho),
                                               ScalarField(grid, phi))
        b = obs.two_species_identity_residual(ScalarField(grid, rho), ScalarField(grid, sigma),
                                              ScalarField(grid, phi))
        rows.append((i, a, b))
    lines = ["# " + json.dumps({"name": "identities", "config_hash": cfg_hash}),
             "sample,cancellation,two_species"]
    lines += [f"{i},{a!r},{b!r}" for i, a, b in rows]
    (out / "identities.csv").write_text("\n".join(lines) + "\n")
    worst = max(max(a, b) for _, a, b in rows)
    return {"samples": len(rows), "max_residual": worst}


def _exp_elliptic(cfg: RunConfig, out: Path, cfg_hash: str) -> dict:
    rep = elliptic_ratio_test(cfg["elliptic.samples"], cfg["elliptic.resolutions"], cfg.seed,
                              cfg["elliptic.spectrum"])
    rep.write(out)
    return {**rep.summary(), "spread": rep.spread}


def _exp_kb(cfg: RunConfig, out: Path, cfg_hash: str) -> dict:
    a = cfg.initial_state()
    b = cfg.initial_state(seed=cfg["kb.other_seed"])
    rep = erg.kb_convergence_experiment(a, b, cfg["kb.T_list"], cfg["run.n_paths"], cfg.seed, cfg.dt,
                                        cfg["time.record_every"])
    rep.write(out)
    return rep.to_dict()


def _exp_couple(cfg: RunConfig, out: Path, cfg_hash: str) -> dict:
    a = cfg.initial_state()
    b = cfg.initial_state(seed=cfg["couple.other_seed"])
    if cfg["couple.n_sweep"]:
        sweep = erg.coupling_mode_sweep(a, b, cfg["couple.lambda"], cfg["couple.n_sweep"],
                                        cfg["couple.budget"], cfg.T, cfg.dt, cfg["run.n_paths"], cfg.seed,
                                        cfg["couple.threshold"], cfg["time.record_every"])
        lines = ["# " + json.dumps({"name": "couple_sweep", "config_hash": cfg_hash}),
                 "n_modes,fraction_contracted,fired_fraction,failed"]
        lines += [f"{r['n_modes']},{r['fraction_contracted']!r},{r['fired_fraction']!r},{r['failed']}"
                  for r in sweep["rows"]]
        (out / "couple_sweep.csv").write_text("\n".join(lines) + "\n")
        return sweep
    rep = erg.coupling_experiment(a, b, cfg["couple.lambda"], cfg["couple.n_modes"], cfg["couple.budget"],
                                  cfg.T, cfg.dt, cfg["run.n_paths"], cfg.seed, cfg["couple.threshold"],
                                  cfg["time.record_every"])
    rep.write(out)
    return rep.to_dict()


def _exp_expergo(cfg: RunConfig, out: Path, cfg_hash: str) -> dict:
    omega = cfg.initial_state()
    rep = erg.exp_ergodicity_experiment(omega, obs.kinetic_energy, cfg["expergo.t_grid"],
                                        cfg["run.n_paths"], cfg["expergo.reference_T"], cfg.seed, cfg.dt,
                                        cfg["expergo.spacing"], cfg["expergo.n_spacings"])
    rep.write(out)
    return rep.to_dict()


def _exp_moments(cfg: RunConfig, out: Path, cfg_hash: str) -> dict:
    ens = replicate(cfg.initial_state(), cfg["run.n_paths"], cfg.seed)
    rep = erg.moment_monitor(ens, cfg["moments.quantity"], cfg.dt, cfg.T, cfg["time.record_every"],
                             cfg["moments.eta"])
    rep.write(out)
    return rep.to_dict()


EXPERIMENT_RUNNERS: dict[str, Callable[[RunConfig, Path, str], dict]] = {
    "simulate": _exp_simulate, "decay": _exp_decay, "picard": _exp_picard,
    "identities": _exp_identities, "elliptic": _exp_elliptic, "kb": _exp_kb,
    "couple": _exp_couple, "expergo": _exp_expergo, "moments": _exp_moments,
}


# --------------------------------------------------------------------------
# Entry points


def _attach_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def _execute(cfg: RunConfig, out: Path, body: Callable[[Path, str], dict]) -> int:
    out.mkdir(parents=True, exist_ok=True)
    handler = _attach_log(out)
    try:
        set_fft_workers(cfg["run.threads"])
        cfg_hash = cfg.digest()
        (out / "config.resolved").write_text(cfg.to_text())
        log.info("start %s (config %s, seed %d)", cfg.experiment, cfg_hash, cfg.seed)
        t0 = time.perf_counter()
        try:
            summary = body(out, cfg_hash)
        except ConfigError as exc:
            log.error("configuration error: %s", exc)
            _dump(out / "meta.json", {"config_hash": cfg_hash, "status": "config_error", "error": str(exc)})
            return EXIT_CONFIG
        except (SnpnsError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.error("numerical failure: %s: %s", type(exc).__name__, exc)
            _dump(out / "meta.json", {"config_hash": cfg_hash, "experiment": cfg.experiment,
                                      "seed": cfg.seed, "status": "numerical_failure",
                                      "error": f"{type(exc).__name__}: {exc}"})
            return EXIT_NUMERICAL
        _dump(out / "meta.json", {"config_hash": cfg_hash, "experiment": cfg.experiment,
                                  "seed": cfg.seed, "status": "ok"})
        _dump(out / f"{cfg.experiment}_summary.json", summary)
        log.info("done in %.2f s", time.perf_counter() - t0)
        return EXIT_OK
    finally:
        log.removeHandler(handler)
        handler.close()


def run(config: RunConfig | str | Path, out: str | Path | None = None, seed: int | None = None,
        threads: int | None = None) -> int:
    """Execute the configured experiment; returns 0, 1 (numerical failure) or 2 (config error).

    ``config`` may be a parsed :class:`RunConfig`, a path to a config file,
    or config text. ``seed``, ``out`` and ``threads`` override the file.
    """
    try:
        if isinstance(config, RunConfig):
            cfg = config
        elif isinstance(config, Path) or (isinstance(config, str) and "=" not in config):
            cfg = load_config(config)
        else:
            cfg = parse_config(config)
        over = {}
        if seed is not None:
            over["run__seed"] = int(seed)
        if threads is not None:
            over["run__threads"] = int(threads)
        if out is not None:
            over["run__out"] = str(out)
        cfg = cfg.with_overrides(**over) if over else cfg
        cfg.build_model()
    except (ConfigError, OSError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    runner = EXPERIMENT_RUNNERS[cfg.experiment]
    return _execute(cfg, Path(cfg["run.out"]), lambda o, h: runner(cfg, o, h))


def resume(checkpoint: str | Path, out: str | Path | None = None) -> int:
    """Continue a ``simulate`` run from a checkpoint to the configured final time.

    Outputs go to ``out`` (default: ``resumed`` next to the checkpoint's run
    directory); the final state equals that of the uninterrupted run bit for bit.
    """
    try:
        state, extra = load_checkpoint(checkpoint)
        cfg = parse_config(extra["config"])
    except (ConfigError, OSError, KeyError, ValueError) as exc:
        log.error("cannot resume: %s", exc)
        return EXIT_CONFIG
    if out is None:
        p = Path(checkpoint)
        run_dir = p.parent.parent if p.parent.name == "checkpoints" else p.parent
        out = run_dir / "resumed"
    return _execute(cfg, Path(out), lambda o, h: _simulate_from(cfg, state, o, h))


def verify(config_path: str | Path) -> RunConfig:
    """Parse and validate a configuration file (including model construction)."""
    cfg = load_config(config_path)
    cfg.build_model()
    return cfg


GNUPLOT_TEMPLATE = """# gnuplot script for {csv}
set datafile separator ","
set key autotitle columnhead
set xlabel "{xlabel}"
set terminal pngcairo size 900,600
set output "{png}"
plot for [i=2:{ncol}] "{csv}" using 1:i with lines
"""


def plot_emit(report_dir: str | Path) -> list[Path]:
    """Write one gnuplot script per CSV in ``report_dir``; nothing is rendered."""
    d = Path(report_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"{d} is not a directory")
    csvs = sorted(d.glob("*.csv"))
    if not csvs:
        raise ValueError(f"no CSV series in {d}")
    scripts = []
    for csv in csvs:
        header = [ln for ln in csv.read_text().splitlines() if ln and not ln.startswith("#")][0]
        cols = header.split(",")
        script = csv.with_suffix(".gp")
        script.write_text(GNUPLOT_TEMPLATE.format(csv=csv.name, png=csv.with_suffix(".png").name,
                                                  ncol=len(cols), xlabel=cols[0]))
        scripts.append(script)
    return scripts


__all__ = ["EXIT_OK", "EXIT_NUMERICAL", "EXIT_CONFIG", "EXPERIMENT_RUNNERS", "run", "resume",
           "verify", "plot_emit"]
