import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snpns.dynamics import (Model, Neutral, NoiseSpec, SpeciesParams, SteadyPlusPerturbation,
                            SystemState, lowest_mode_data, make_initial_data, path_rngs,
                            replicate)
from snpns.errors import PreconditionError, UnderpoweredError
from snpns.ergodicity import (MomentQuantity, charge_exp_cap, coupling_energy, coupling_experiment,
                              coupling_mode_sweep,
                              empirical_wasserstein_1d, equal_valence_decay_check,
                              exp_ergodicity_experiment, kb_convergence_experiment,
                              lowest_heat_eigenvalue, moment_monitor, ou_mean_energy,
                              time_average)
from snpns.fields import Grid
from snpns.observables import ObservableSeries, kinetic_energy

T16 = Grid(16, 16)


def two_species(grid=T16, D=1.0, noise=0, amp=0.0, **kw):
    sp = [SpeciesParams(D, 1.0), SpeciesParams(D, -1.0)]
    return Model(grid, sp, NoiseSpec.lowest(grid, noise, amp), **kw)


class TestTimeAverage:
    def test_constant(self):
        s = ObservableSeries("x", np.linspace(0, 3, 7), np.full(7, 2.5))
        assert time_average(s, 3.0) == pytest.approx(2.5)

    def test_sine(self):
        t = np.linspace(0, 2 * np.pi, 2001)
        assert abs(time_average(ObservableSeries("x", t, np.sin(t)), 2 * np.pi)) < 1e-12

    def test_exponential(self):
        t = np.linspace(0, 2, 4001)
        val = time_average(ObservableSeries("x", t, np.exp(-t)), 2.0)
        assert val == pytest.approx((1 - np.exp(-2)) / 2, rel=1e-7)

    def test_partial_window_interpolates(self):
        s = ObservableSeries("x", [0, 1, 2], [0, 1, 2])
        assert time_average(s, 1.5) == pytest.approx(0.75)
        assert time_average(s, 1.0, t0=0.5) == pytest.approx(1.0)

    def test_coverage(self):
        with pytest.raises(ValueError):
            time_average(ObservableSeries("x", [0, 1], [0, 1]), 2.0)
        with pytest.raises(ValueError):
            time_average(ObservableSeries("x", [0, 1], [0, 1]), 0.0)


class TestWasserstein:
    def test_identical(self):
        assert empirical_wasserstein_1d([3, 1, 2], [1, 2, 3]) == 0

    def test_translation(self):
        a = np.random.default_rng(0).standard_normal(50)
        assert empirical_wasserstein_1d(a, a - 1.75) == pytest.approx(1.75)

    def test_pairing(self):
        assert empirical_wasserstein_1d([0, 1], [0, 2]) == pytest.approx(0.5)

    def test_unequal_lengths_resampled(self):
        assert empirical_wasserstein_1d([0.0], [0.0, 1.0, 2.0]) == pytest.approx(1.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            empirical_wasserstein_1d([], [1.0])


samples = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=6, max_size=6)


@given(samples, samples, samples)
def test_wasserstein_metric(a, b, c):
    dab = empirical_wasserstein_1d(a, b)
    assert dab == pytest.approx(empirical_wasserstein_1d(b, a))
    assert dab <= empirical_wasserstein_1d(a, c) + empirical_wasserstein_1d(c, b) + 1e-9
    assert (dab == 0) == (sorted(a) == sorted(b))


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=20), st.floats(-3, 3), st.floats(-3, 3))
def test_time_average_linear(vals, alpha, beta):
    t = np.arange(len(vals), dtype=float)
    T = t[-1]
    v = np.asarray(vals)
    s1 = ObservableSeries("a", t, v)
    s2 = ObservableSeries("b", t, v[::-1])
    combo = ObservableSeries("c", t, alpha * v + beta * v[::-1])
    expect = alpha * time_average(s1, T) + beta * time_average(s2, T)
    assert time_average(combo, T) == pytest.approx(expect, abs=1e-9 * (1 + np.abs(v).max()))


class TestKB:
    def test_steady_zero_noise(self):
        m = two_species()
        s = make_initial_data(SteadyPlusPerturbation(0.0, 1), m)
        rep = kb_convergence_experiment(s, s, [0.1, 0.2], 2, seed=0, dt=0.01, record_every=2)
        assert all(d == 0 for k in rep.observables for d in rep.discrepancy[k])

    def test_deterministic(self, tmp_path):
        m = two_species(noise=2, amp=0.5)
        a = make_initial_data(Neutral(1), m, velocity_amplitude=0.5)
        b = make_initial_data(Neutral(2), m, velocity_amplitude=0.1)
        r1 = kb_convergence_experiment(a, b, [0.1, 0.2], 3, seed=4, dt=0.01, record_every=2)
        r2 = kb_convergence_experiment(a, b, [0.1, 0.2], 3, seed=4, dt=0.01, record_every=2)
        assert r1.to_dict() == r2.to_dict()
        assert set(r1.observables) == {"kinetic", "charge", "deviation", "entropy"}
        r1.write(tmp_path)
        assert json.loads((tmp_path / "kb.json").read_text())["T_list"] == [0.1, 0.2]
        assert (tmp_path / "kb_mu_a_kinetic.csv").read_text().splitlines()[1] == "t,mu_a_kinetic_0,mu_a_kinetic_1,mu_a_kinetic_2"

    def test_T_list_checked(self):
        s = make_initial_data(Neutral(1), two_species())
        with pytest.raises(ValueError):
            kb_convergence_experiment(s, s, [0.2, 0.1], 1, 0, 0.01)
        with pytest.raises(ValueError):
            kb_convergence_experiment(s, s, [], 1, 0, 0.01)


class TestCoupling:
    def test_identical_pair(self):
        m = two_species(noise=2, amp=0.2)
        a = make_initial_data(Neutral(1), m)
        rep = coupling_experiment(a, a, 10.0, 2, 1.0, 0.05, 0.01, n_paths=2)
        assert np.all(rep.Q < 1e-28)
        assert rep.fraction_contracted == 1.0

    def test_energy_definitions(self):
        m = two_species()
        a = make_initial_data(Neutral(1), m)
        b = a.replace(c=a.c + np.array([1.0, 0.0])[:, None, None])
        # R = S = 1 and grad Psi = 0 for a constant difference
        assert coupling_energy(a, b) == pytest.approx(2 * 4 * np.pi**2)
        m3 = Model(T16, [SpeciesParams(1.0, 1.0), SpeciesParams(1.0, -2.0)], None)
        a3 = make_initial_data(Neutral(1), m3)
        b3 = a3.replace(c=a3.c + 1.0)
        assert coupling_energy(a3, b3) == pytest.approx(2 * 4 * np.pi**2)

    def test_control_vs_none(self, tmp_path):
        m = two_species(D=4.0, noise=4, amp=0.1)
        a = make_initial_data(Neutral(1), m, means=[0.1, 0.1], velocity_amplitude=0.5)
        b = make_initial_data(Neutral(2), m, means=[0.1, 0.1], velocity_amplitude=0.5)
        on = coupling_experiment(a, b, 64.0, 16, 1e3, 1.0, 0.01, n_paths=4, seed=3, threshold=1e-3)
        off = coupling_experiment(a, b, 0.0, 16, 1e3, 1.0, 0.01, n_paths=4, seed=3, threshold=1e-3)
        assert on.fraction_contracted == 1.0 and on.fired_fraction == 0.0
        assert np.all(on.Q[-1] < off.Q[-1])
        on.write(tmp_path)
        assert (tmp_path / "couple_Q.csv").exists()

    def test_budget_fires(self):
        m = two_species(noise=2, amp=0.1)
        a = make_initial_data(Neutral(1), m)
        b = make_initial_data(Neutral(2), m)
        rep = coupling_experiment(a, b, 10.0, 4, 0.0, 0.02, 0.01, n_paths=2)
        assert rep.fired_fraction == 1.0 and np.all(rep.tau == 0)

    def test_failed_path_is_reported(self):
        m = two_species(noise=2, amp=50.0)
        a = make_initial_data(Neutral(1), m, velocity_amplitude=0.1)
        b = make_initial_data(Neutral(2), m, velocity_amplitude=0.1)
        rep = coupling_experiment(a, b, 1.0, 2, 1e3, 0.48, 0.04, n_paths=3, seed=1)
        assert rep.failed and all(not rep.contracted[i] for i in rep.failed)
        assert "failed" in rep.to_dict()


class TestExpErgodicity:
    def test_underpowered(self):
        s = make_initial_data(Neutral(1), two_species(noise=2, amp=0.5))
        with pytest.raises(UnderpoweredError):
            exp_ergodicity_experiment(s, kinetic_energy, [1, 2], 50, 1.0, 0, 0.02)

    def test_runs_and_reports(self, tmp_path):
        m = two_species(Grid(8, 8), noise=2, amp=0.5)
        s = make_initial_data(Neutral(1), m, velocity_amplitude=3.0)
        rep = exp_ergodicity_experiment(s, kinetic_energy, [0.2, 0.4, 0.8], 100, 2.0, 5, 0.02,
                                        spacing=0.4, n_spacings=3)
        assert rep.W.shape == (3,) and rep.noise_floor > 0
        assert rep.W[0] > rep.W[-1]
        assert rep.meta["pool_size"] == 300
        rep.write(tmp_path)
        assert json.loads((tmp_path / "expergo.json").read_text())["metric"].startswith("W1")


class TestMoments:
    def test_steady_constant(self):
        m = two_species()
        ens = replicate(make_initial_data(SteadyPlusPerturbation(0.0, 1), m), 3, seed=0)
        # ChargeExp needs noise for a finite cap, covered separately
        for q in set(MomentQuantity) - {MomentQuantity.CHARGE_EXP}:
            rep = moment_monitor(ens, q, 0.01, 0.05)
            assert np.allclose(rep.mean, rep.mean[0]) and abs(rep.slope) < 1e-12

    def test_parse(self):
        assert MomentQuantity.parse("energylinear") is MomentQuantity.ENERGY_LINEAR
        assert MomentQuantity.parse("CHARGE_EXP") is MomentQuantity.CHARGE_EXP
        with pytest.raises(ValueError):
            MomentQuantity.parse("nope")

    def test_energy_slope_equals_noise_power(self):
        amp = 1e-2
        m = Model(T16, [SpeciesParams(1.0, 0.0)], NoiseSpec.lowest(T16, 4, amp))
        s = SystemState(m, np.zeros((2, 16, 16)), np.ones((1, 16, 16)), 0.0, path_rngs(0, 1))
        rep = moment_monitor(replicate(s, 400, seed=1), "EnergyLinear", 0.001, 0.02)
        g2 = m.noise.h_norm_sq()
        assert abs(rep.slope - g2) < 3 * rep.slope_stderr + 0.05 * g2

    def test_ou_closed_form(self):
        amp, dt, n = 0.3, 0.01, 50
        m = Model(T16, [SpeciesParams(1.0, 0.0)], NoiseSpec.lowest(T16, 4, amp), nonlinear=False)
        u0 = 0.5 * m.noise.modes[0]
        s = SystemState(m, u0, np.ones((1, 16, 16)), 0.0, path_rngs(0, 1))
        rep = moment_monitor(replicate(s, 1000, seed=2), "EnergyLinear", dt, n * dt)
        coeffs = np.array([0.5, 0, 0, 0])
        oracle = ou_mean_energy(m.noise, coeffs, dt, n)
        assert np.all(np.abs(rep.mean - oracle) <= 3 * rep.stderr + 1e-15)

    def test_ou_closed_form_values(self):
        noise = NoiseSpec.lowest(T16, 2, 1.0)
        e = ou_mean_energy(noise, np.array([1.0, 0.0]), 0.1, 1)
        r = 1 / 1.1
        assert e[1] == pytest.approx(r**2 + 2 * 0.1 * r**2)

    def test_charge_exp_cap(self):
        m = two_species(noise=4, amp=0.5)
        ens = replicate(make_initial_data(Neutral(1), m), 4, seed=0)
        cap = charge_exp_cap(ens)
        assert cap == pytest.approx(1 / (4 * 4 * 0.25))
        with pytest.raises(PreconditionError):
            moment_monitor(ens, "ChargeExp", 0.01, 0.02, eta=2 * cap)
        rep = moment_monitor(ens, "ChargeExp", 0.01, 0.05)
        assert rep.mean[0] == 0 and np.all(np.diff(rep.mean) > 0)

    def test_single_path_rejected(self):
        with pytest.raises(ValueError):
            moment_monitor(make_initial_data(Neutral(1), two_species()), "EnergyLinear", 0.01, 0.02)


class TestValenceDecay:
    def test_zero_charge_stays_zero(self):
        g = Grid(16, 16, "square")
        m = Model(g, [SpeciesParams(1.0, 1.0, "blocking"), SpeciesParams(1.0, -1.0, "blocking")], None)
        s = make_initial_data(SteadyPlusPerturbation(0.0, 0), m)
        rep = equal_valence_decay_check(s, 0.01, 0.05)
        assert rep.monotone and np.all(rep.series.values == 0)

    def _square_rate(self, D):
        g = Grid(24, 24, "square")
        m = Model(g, [SpeciesParams(D, 1.0, "blocking"), SpeciesParams(D, -1.0, "blocking")], None)
        X, _ = g.coordinates()
        eps = 1e-3
        c = np.stack([1 + eps * np.cos(np.pi * X), 1 - eps * np.cos(np.pi * X)])
        s = SystemState(m, np.zeros((2,) + g.shape), c, 0.0, path_rngs(0, 1))
        return equal_valence_decay_check(s, 1e-3, 0.1, record_every=10)

    def test_heat_lower_bound_and_scaling(self):
        r1 = self._square_rate(1.0)
        r2 = self._square_rate(2.0)
        assert r1.monotone and r1.rate_ok
        assert r1.heat_bound == pytest.approx(2 * lowest_heat_eigenvalue_for(24))
        assert r2.rate / r1.rate == pytest.approx(2.0, rel=0.1)

    def test_preconditions(self):
        m = Model(T16, [SpeciesParams(1.0, 1.0), SpeciesParams(1.0, -2.0)], None)
        with pytest.raises(PreconditionError):
            equal_valence_decay_check(make_initial_data(Neutral(0), m), 0.01, 0.02)
        m2 = two_species(noise=2, amp=0.1)
        with pytest.raises(PreconditionError):
            equal_valence_decay_check(make_initial_data(Neutral(0), m2), 0.01, 0.02)

    def test_torus_eigenvalue(self):
        s = lowest_mode_data(two_species(), [1, 1], 0.01)
        assert lowest_heat_eigenvalue(s) == 1.0


def lowest_heat_eigenvalue_for(n):
    h = 1 / (n - 1)
    return 4 / h**2 * np.sin(np.pi / (2 * (n - 1))) ** 2


def test_mode_sweep_threshold():
    m = two_species(D=4.0, noise=4, amp=0.1)
    a = make_initial_data(Neutral(1), m, means=[0.1, 0.1], velocity_amplitude=0.5)
    b = make_initial_data(Neutral(2), m, means=[0.1, 0.1], velocity_amplitude=0.5)
    sweep = coupling_mode_sweep(a, b, 64.0, [16, 2], 1e3, 1.0, 0.01, n_paths=2, seed=3, threshold=1e-3)
    assert [r["n_modes"] for r in sweep["rows"]] == [2, 16]
    assert sweep["rows"][1]["fraction_contracted"] == 1.0
    assert sweep["threshold_n"] in (2, 16)
    with pytest.raises(ValueError):
        coupling_mode_sweep(a, b, 1.0, [], 1.0, 0.1, 0.01)
