import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snpns.dynamics import (Model, Neutral, NoiseSpec, SpeciesParams, SystemState, forcing_preset,
                            lowest_mode_data, make_initial_data, path_rngs, replicate, step)
from snpns.errors import PreconditionError
from snpns.fields import Grid, ScalarField, VectorField, torus_ops
from snpns.observables import (EntropyValue, ObservableSeries, PreconditionWarning,
                               cancellation_residual_velocity, charge_norm_sq, default_targets,
                               deviation_norm_sq, dissipation_balance_two_species, entropy,
                               entropy_with_flags, fit_decay_rate, h_distance_sq, kinetic_energy,
                               lipschitz_growth_check, lp_decay_series, lp_deviation,
                               potential_energy, species_means, velocity_gradient_norm_sq)

from conftest import band_limited

T32 = Grid(32, 32)
T64 = Grid(64, 64)


def two_species(grid=T32, D=1.0, noise=0, amp=0.0, forcing=None):
    sp = [SpeciesParams(D, 1.0), SpeciesParams(D, -1.0)]
    return Model(grid, sp, NoiseSpec.lowest(grid, noise, amp), forcing)


def state(model, u=None, c=None):
    g = model.grid
    u = np.zeros((2,) + g.shape) if u is None else u
    c = np.ones((model.n_species,) + g.shape) if c is None else c
    return SystemState(model, u, c, 0.0, path_rngs(0, 1))


class TestSeries:
    def test_validation(self):
        with pytest.raises(ValueError):
            ObservableSeries("x", [0, 0], [1, 2])
        with pytest.raises(ValueError):
            ObservableSeries("x", [0, 1], [1, np.nan])
        with pytest.raises(ValueError):
            ObservableSeries("x", [0, 1], [1])

    def test_csv_round_trip(self, tmp_path):
        s = ObservableSeries("energy", [0.0, 0.1, 0.3], [1.0, 1 / 3, 2e-17], "run7", {"dt": 0.1})
        path = s.to_csv(tmp_path / "e.csv")
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# {") and lines[1] == "t,value"
        back = ObservableSeries.read_csv(path)
        assert back.samples == s.samples and back.run_id == "run7" and back.meta == {"dt": 0.1}

    def test_window_and_samples(self):
        s = ObservableSeries.from_samples("x", [(0, 1), (1, 2), (2, 3)])
        assert s.window(0.5, 2).samples == [(1.0, 2.0), (2.0, 3.0)]
        assert len(s) == 3


class TestEnergies:
    def test_zero_state(self):
        m = two_species()
        s = state(m)
        assert kinetic_energy(s) == 0 and potential_energy(s) == 0 and charge_norm_sq(s) == 0

    def test_kinetic(self):
        X, Y = T32.coordinates()
        s = state(two_species(), u=np.stack([np.cos(Y), 0 * X]))
        assert kinetic_energy(s) == pytest.approx(2 * np.pi**2, rel=1e-13)
        assert velocity_gradient_norm_sq(s) == pytest.approx(2 * np.pi**2, rel=1e-13)

    def test_potential(self):
        X, _ = T32.coordinates()
        c = np.stack([1 + 0.5 * np.cos(X), 1 - 0.5 * np.cos(X)])
        s = state(two_species(), c=c)
        assert potential_energy(s) == pytest.approx(2 * np.pi**2, rel=1e-13)
        assert charge_norm_sq(s) == pytest.approx(2 * np.pi**2, rel=1e-13)
        np.testing.assert_allclose(species_means(s), [1, 1])
        assert deviation_norm_sq(s) == pytest.approx(2 * 0.25 * 2 * np.pi**2)

    def test_batched_returns_arrays(self):
        m = two_species(noise=2, amp=1.0)
        ens = replicate(make_initial_data(Neutral(1), m), 3, seed=0)
        ens = step(ens, 0.01)
        for fn in (kinetic_energy, potential_energy, charge_norm_sq, deviation_norm_sq, entropy):
            v = fn(ens)
            assert isinstance(v, np.ndarray) and v.shape == (3,)
            assert v[1] == pytest.approx(float(fn(ens.path(1))), rel=1e-12)


class TestEntropy:
    def test_constant_is_zero(self):
        assert entropy(state(two_species())) == 0

    def test_quadrature_oracle(self):
        m = Model(T64, [SpeciesParams(1.0, 0.0)], None)
        X, _ = T64.coordinates()
        e = entropy(state(m, c=(1 + 0.5 * np.cos(X))[None]))
        x = np.linspace(0, 2 * np.pi, 10**6, endpoint=False)
        f = 1 + 0.5 * np.cos(x)
        oracle = np.mean(f * np.log(f) - f + 1) * 2 * np.pi * 2 * np.pi
        assert float(e) == pytest.approx(oracle, rel=1e-8)
        assert isinstance(e, EntropyValue) and not e.floored

    def test_floor_flag(self):
        m = Model(T32, [SpeciesParams(1.0, 0.0)], None)
        c = np.ones((1,) + T32.shape)
        c[0, 0, 0] = 0.0
        e = entropy(state(m, c=c))
        assert e.floored and e > 0
        vals, flags = entropy_with_flags(state(m, c=c))
        assert bool(flags) and float(vals) == pytest.approx(float(e))


class TestIdentities:
    def test_zero_velocity(self, torus64):
        rho = ScalarField(torus64, band_limited(torus64, np.random.default_rng(0)))
        assert cancellation_residual_velocity(VectorField.zeros(torus64), rho, rho) == 0

    def test_random_fields(self, torus64):
        rng = np.random.default_rng(1)
        ops = torus_ops(torus64)
        for _ in range(5):
            u = VectorField(torus64, ops.leray(band_limited(torus64, rng, 10, (2,))))
            rho = ScalarField(torus64, band_limited(torus64, rng, 10))
            phi = ScalarField(torus64, ops.ifft(ops.fft(rho.values) * ops.inv_k2))
            assert cancellation_residual_velocity(u, rho, phi) < 1e-9

    def test_gradient_velocity_flagged(self, torus64):
        rng = np.random.default_rng(2)
        ops = torus_ops(torus64)
        u = VectorField(torus64, ops.grad(band_limited(torus64, rng, 6)))
        rho = ScalarField(torus64, band_limited(torus64, rng, 6))
        phi = ScalarField(torus64, ops.ifft(ops.fft(rho.values) * ops.inv_k2))
        with pytest.warns(PreconditionWarning):
            r = cancellation_residual_velocity(u, rho, phi)
        assert r > 1e-3

    def test_two_species_sigma_zero(self, torus64):
        X, _ = torus64.coordinates()
        rho = ScalarField(torus64, np.cos(X))
        assert _two(rho, ScalarField.zeros(torus64), rho) < 1e-15

    def test_two_species_constant_sigma(self, torus64):
        X, _ = torus64.coordinates()
        rho = ScalarField(torus64, np.cos(X))
        assert _two(rho, ScalarField.constant(torus64, 1.0), rho) < 1e-9

    def test_two_species_random(self, torus64):
        rng = np.random.default_rng(3)
        ops = torus_ops(torus64)
        rho = ScalarField(torus64, band_limited(torus64, rng, 10))
        sigma = ScalarField(torus64, 3 + band_limited(torus64, rng, 10))
        phi = ScalarField(torus64, ops.ifft(ops.fft(rho.values) * ops.inv_k2))
        assert _two(rho, sigma, phi) < 1e-8


def _two(rho, sigma, phi):
    from snpns.observables import two_species_identity_residual
    return two_species_identity_residual(rho, sigma, phi)


def run(s, dt, n):
    out = [s]
    for _ in range(n):
        s = step(s, dt)
        out.append(s)
    return out


class TestDissipation:
    def test_steady_zero(self):
        m = two_species()
        assert np.all(dissipation_balance_two_species(run(state(m), 0.01, 3)).values == 0)

    def test_pure_diffusion_oracle(self):
        D, dt, a0 = 0.8, 0.01, 0.4
        m = two_species(D=D)
        X, _ = T32.coordinates()
        c = np.stack([1 + a0 / 2 * np.cos(X)] * 2)
        res = dissipation_balance_two_species(run(state(m, c=c), dt, 5))
        # sigma = 2 + a cos x with a_n = a0 r^n; energy = pi^2 a^2, dissipation = 2 pi^2 a^2
        r = 1 / (1 + D * dt)
        a = a0 * r ** np.arange(6)
        oracle = np.pi**2 * (a[1:] ** 2 - a[:-1] ** 2) / dt + D * np.pi**2 * (a[1:] ** 2 + a[:-1] ** 2)
        np.testing.assert_allclose(res.values, oracle, rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(res.times, dt * np.arange(1, 6))

    def test_first_order(self):
        m = two_species(D=1.0)
        s0 = make_initial_data(Neutral(2), m, amplitude=0.5, velocity_amplitude=0.5)
        peaks = []
        for dt in (0.01, 0.005):
            peaks.append(np.abs(dissipation_balance_two_species(run(s0, dt, round(0.2 / dt))).values).max())
        assert 1.6 <= peaks[0] / peaks[1] <= 2.4

    def test_preconditions(self):
        with pytest.raises(PreconditionError):
            dissipation_balance_two_species(run(state(two_species(noise=2, amp=0.1)), 0.01, 1))
        with pytest.raises(PreconditionError):
            f = forcing_preset(T32, "taylor_green")
            dissipation_balance_two_species(run(state(two_species(forcing=f)), 0.01, 1))
        m3 = Model(T32, [SpeciesParams(1.0, 1.0), SpeciesParams(2.0, -1.0)], None)
        with pytest.raises(PreconditionError):
            dissipation_balance_two_species(run(state(m3), 0.01, 1))


class TestDecayFit:
    def test_exponential(self):
        t = np.linspace(0, 2, 21)
        fit = fit_decay_rate(ObservableSeries("x", t, np.exp(-3 * t)))
        assert fit.rate == pytest.approx(3, rel=1e-10) and fit.r_squared == pytest.approx(1)

    def test_constant(self):
        fit = fit_decay_rate(ObservableSeries("x", [0, 1, 2], [5, 5, 5]))
        assert fit.rate == pytest.approx(0, abs=1e-14) and fit.r_squared == 1

    def test_window_and_errors(self):
        t = np.linspace(0, 2, 21)
        v = np.where(t < 1, np.exp(-t), np.exp(1 - 2 * t))
        assert fit_decay_rate(ObservableSeries("x", t, v), (1, 2)).rate == pytest.approx(2)
        with pytest.raises(ValueError):
            fit_decay_rate(ObservableSeries("x", t, v - 0.5))
        with pytest.raises(ValueError):
            fit_decay_rate(ObservableSeries("x", t, v), (5, 6))

    def test_lowest_mode_rate(self):
        D = 1.0
        m = two_species(D=D)
        s = lowest_mode_data(m, [1.0, 1.0], 0.01)
        states = run(s, 0.01, 100)
        series = ObservableSeries("dev", [x.t for x in states], [deviation_norm_sq(x) for x in states])
        assert fit_decay_rate(series, (0.5, 1.0)).rate == pytest.approx(2 * D, rel=0.2)


class TestLp:
    def test_even_p_only(self):
        with pytest.raises(ValueError):
            lp_decay_series([], p=3)
        with pytest.raises(ValueError):
            lp_decay_series([], p=2.5)

    def test_targets_and_series(self):
        m = two_species()
        s = lowest_mode_data(m, [1.0, 2.0], 0.1)
        np.testing.assert_allclose(default_targets(s), [1.0, 2.0])
        ser = lp_decay_series(run(s, 0.01, 20), p=4)
        assert np.all(np.diff(ser.values) < 0)
        assert ser.meta["p"] == 4
        # L2 of a cos x perturbation of size eps*m
        assert lp_deviation(s, 2) == pytest.approx(0.1 * 3 * np.sqrt(2 * np.pi**2))

    def test_dirichlet_targets(self):
        g = Grid(16, 16, "square")
        m = Model(g, [SpeciesParams(1.0, 1.0, "dirichlet", 0.4), SpeciesParams(1.0, -1.0, "blocking")], None)
        s = lowest_mode_data(m, [0, 0.4], 0.0)
        assert default_targets(s)[0] == 0.4


class TestLipschitz:
    def test_identical(self):
        m = two_species(noise=2, amp=0.1)
        tr = run(make_initial_data(Neutral(1), m), 0.01, 3)
        rep = lipschitz_growth_check(tr, tr)
        assert rep.exact_match and rep.holds and np.all(rep.ratio.values == 0)

    def test_synthetic_ratio(self):
        m = two_species()
        a = [state(m).replace(t=t) for t in (0.0, 0.1, 0.2)]
        b = [x.replace(c=x.c + k) for x, k in zip(a, (0.1, 0.2, 0.05))]
        rep = lipschitz_growth_check(a, b)
        np.testing.assert_allclose(rep.ratio.values, [1, 4, 0.25])

    def test_diffusive_contraction(self):
        m = Model(T32, [SpeciesParams(1.0, 0.0)], None)
        X, _ = T32.coordinates()
        a = state(m, c=(1 + 0.2 * np.cos(X))[None])
        b = state(m, c=(1 + 0.1 * np.cos(X))[None])
        rep = lipschitz_growth_check(run(a, 0.01, 20), run(b, 0.01, 20))
        assert np.all(rep.ratio.values[1:] < 1) and rep.holds

    def test_bad_input(self):
        m = two_species()
        with pytest.raises(ValueError):
            lipschitz_growth_check([state(m)], [])
        with pytest.raises(ValueError):
            lipschitz_growth_check([state(m)], [state(m).replace(t=1.0)])

    def test_distance(self):
        m = two_species()
        a = state(m)
        assert h_distance_sq(a, a.replace(c=a.c + 1)) == pytest.approx(2 * 4 * np.pi**2)


# ---------------------------------------------------------------- properties

seeds = st.integers(0, 2**31 - 1)
G16 = Grid(16, 16)


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(0.01, 0.99))
def test_entropy_nonnegative_and_zero_iff_constant(seed, amp):
    m = Model(G16, [SpeciesParams(1.0, 0.0), SpeciesParams(1.0, 0.0)], None)
    rng = np.random.default_rng(seed)
    c = 1 + amp * np.tanh(rng.standard_normal((2,) + G16.shape))
    assert entropy(state(m, c=c)) > 0
    flat = np.broadcast_to(c.mean(axis=(-2, -1))[:, None, None], c.shape)
    assert entropy(state(m, c=flat)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_cancellation_property(seed):
    rng = np.random.default_rng(seed)
    ops = torus_ops(T32)
    u = VectorField(T32, ops.leray(band_limited(T32, rng, 8, (2,))))
    rho = ScalarField(T32, band_limited(T32, rng, 8))
    phi = ScalarField(T32, ops.ifft(ops.fft(rho.values) * ops.inv_k2))
    with warnings.catch_warnings():
        warnings.simplefilter("error", PreconditionWarning)
        assert cancellation_residual_velocity(u, rho, phi) < 1e-8


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(0.1, 10))
def test_two_species_property(seed, level):
    rng = np.random.default_rng(seed)
    ops = torus_ops(T32)
    rho = ScalarField(T32, band_limited(T32, rng, 8))
    bump = band_limited(T32, rng, 8)
    sigma = ScalarField(T32, level * (1 + 0.5 * bump / np.abs(bump).max()))
    phi = ScalarField(T32, ops.ifft(ops.fft(rho.values) * ops.inv_k2))
    assert _two(rho, sigma, phi) < 1e-8


@given(st.floats(1e-3, 50), st.floats(-5, 5), st.integers(3, 40))
def test_fit_recovers_rate(rate, logc, n):
    t = np.linspace(0, 1, n)
    fit = fit_decay_rate(ObservableSeries("x", t, np.exp(logc - rate * t)))
    assert fit.rate == pytest.approx(rate, rel=1e-10)
