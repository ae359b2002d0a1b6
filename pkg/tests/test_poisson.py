import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate as quad

from snpns.errors import DomainMismatchError, PreconditionError, SolverError
from snpns.fields import Grid, ScalarField, gradient, laplacian, lp_norm
from snpns.poisson import (dirichlet_eigenvalues, elliptic_ratio, elliptic_ratio_test,
                           endpoint_constant_test, grad_potential, random_charge,
                           solve_poisson_dirichlet, solve_poisson_periodic,
                           weak_lebesgue_quasinorm)

from conftest import band_limited


class TestPeriodic:
    def test_zero(self, torus64):
        phi = solve_poisson_periodic(ScalarField.zeros(torus64))
        assert np.abs(phi.values).max() == 0

    def test_cos(self, torus64):
        rho = ScalarField.from_function(torus64, lambda x, y: np.cos(x))
        np.testing.assert_allclose(solve_poisson_periodic(rho).values, rho.values, atol=1e-14)

    def test_product_mode(self, torus64):
        rho = ScalarField.from_function(torus64, lambda x, y: 2 * np.cos(x) * np.cos(y))
        np.testing.assert_allclose(solve_poisson_periodic(rho).values, rho.values / 2, atol=1e-14)

    def test_non_neutral_rejected(self, torus64):
        with pytest.raises(PreconditionError, match="mean"):
            solve_poisson_periodic(ScalarField.constant(torus64, 0.1))

    def test_square_rejected(self, square32):
        with pytest.raises(DomainMismatchError):
            solve_poisson_periodic(ScalarField.zeros(square32))

    def test_gauge_mean_zero(self, torus64):
        rho = ScalarField(torus64, band_limited(torus64, np.random.default_rng(0)))
        assert abs(solve_poisson_periodic(rho).mean()) < 1e-15

    def test_grad_potential(self, torus64):
        rho = ScalarField.from_function(torus64, lambda x, y: np.cos(x))
        g = grad_potential(solve_poisson_periodic(rho))
        np.testing.assert_allclose(g.values[0], -np.sin(torus64.coordinates()[0]), atol=1e-13)


def manufactured(n, gamma=0.3, method="cg"):
    g = Grid(n, n, "square")
    X, Y = g.coordinates()
    bump = np.sin(np.pi * X) * np.sin(np.pi * Y)
    phi = solve_poisson_dirichlet(ScalarField(g, 2 * np.pi**2 * bump), gamma, method=method)
    return np.abs(phi.values - bump - gamma).max()


class TestDirichlet:
    def test_zero_charge(self, square32):
        phi = solve_poisson_dirichlet(ScalarField.zeros(square32), 0.7)
        assert np.all(phi.values == 0.7)

    @pytest.mark.parametrize("method", ["cg", "dst"])
    def test_second_order(self, method):
        e = [manufactured(n, method=method) for n in (17 + 1, 34, 66)]
        for a, b in zip(e, e[1:]):
            # h = 1/(n-1) halves exactly along 18 -> 34 -> 66
            assert 3.6 <= a / b <= 4.4

    def test_cg_matches_dst(self, square32):
        rng = np.random.default_rng(1)
        rho = ScalarField(square32, rng.standard_normal(square32.shape))
        a = solve_poisson_dirichlet(rho, 0.2, method="cg")
        b = solve_poisson_dirichlet(rho, 0.2, method="dst")
        assert np.abs(a.values - b.values).max() < 1e-8 * np.abs(b.values).max()

    def test_discrete_equation(self, square32):
        rng = np.random.default_rng(2)
        rho = ScalarField(square32, rng.standard_normal(square32.shape))
        phi = solve_poisson_dirichlet(rho, 0.0, method="dst")
        res = -laplacian(phi).values[1:-1, 1:-1] - rho.values[1:-1, 1:-1]
        assert np.abs(res).max() < 1e-9

    def test_point_symmetry(self, square32):
        X, Y = square32.coordinates()
        bump = np.exp(-40 * ((X - 0.3) ** 2 + (Y - 0.6) ** 2))
        bump = bump + bump[::-1, ::-1]
        phi = solve_poisson_dirichlet(ScalarField(square32, bump), 1.0)
        d = phi.values - 1.0
        assert np.abs(d - d[::-1, ::-1]).max() < 1e-9 * np.abs(d).max()

    def test_maximum_principle(self, square32):
        rho = ScalarField(square32, np.random.default_rng(3).random(square32.shape))
        assert solve_poisson_dirichlet(rho, 0.4).values.min() >= 0.4 - 1e-14

    def test_iteration_cap(self, square32):
        rho = ScalarField(square32, np.random.default_rng(4).standard_normal(square32.shape))
        with pytest.raises(SolverError) as err:
            solve_poisson_dirichlet(rho, 0.0, maxiter=2)
        assert err.value.residual is not None

    def test_torus_rejected(self, torus64):
        with pytest.raises(DomainMismatchError):
            solve_poisson_dirichlet(ScalarField.zeros(torus64), 0.0)

    def test_eigenvalues(self):
        g = Grid(64, 64, "square")
        assert dirichlet_eigenvalues(g).min() == pytest.approx(2 * np.pi**2, rel=1e-3)


def lp_quadrature(fn, p):
    """High-accuracy periodic L^p norm of a function of x alone, on the 2pi torus."""
    val, _ = quad.quad(lambda x: abs(fn(x)) ** p, 0, 2 * np.pi, limit=400, epsabs=1e-14, epsrel=1e-13)
    return (2 * np.pi * val) ** (1 / p)


class TestEllipticRatio:
    def test_single_mode_oracle(self):
        g = Grid(2048, 8)
        ratio = elliptic_ratio(ScalarField.from_function(g, lambda x, y: np.cos(x)))
        numerator = (1.5 * np.pi**2) ** 0.25
        assert ratio == pytest.approx(numerator / lp_quadrature(np.cos, 4 / 3), rel=1e-6)

    def test_sign_and_scale_invariance(self, torus64):
        rho = random_charge(torus64, np.random.default_rng(5))
        r = elliptic_ratio(rho)
        assert elliptic_ratio(-rho) == pytest.approx(r, rel=1e-14)
        assert elliptic_ratio(rho * 2.0) == pytest.approx(r, rel=1e-14)

    def test_report(self, tmp_path):
        rep = elliptic_ratio_test(5, [16, 32], seed=3)
        assert set(rep.per_resolution) == {16, 32}
        assert rep.max_ratio >= rep.mean_ratio > 0
        rep.write(tmp_path)
        lines = (tmp_path / "elliptic_ratios.csv").read_text().splitlines()
        assert lines[0] == "resolution,sample_index,ratio" and len(lines) == 11
        assert "max_ratio" in (tmp_path / "elliptic_summary.json").read_text()

    def test_report_deterministic(self):
        a = elliptic_ratio_test(3, [16], seed=9).ratios[16]
        b = elliptic_ratio_test(3, [16], seed=9).ratios[16]
        np.testing.assert_array_equal(a, b)

    def test_empty_resolutions(self):
        with pytest.raises(ValueError):
            elliptic_ratio_test(3, [], seed=0)
        with pytest.raises(ValueError):
            endpoint_constant_test(3, [], seed=0)

    def test_random_charge_is_neutral(self, torus64):
        for spec in ("pink", "white"):
            assert abs(random_charge(torus64, np.random.default_rng(0), spec).mean()) < 1e-15

    def test_endpoint_constant_stable(self):
        c = endpoint_constant_test(10, [16, 32, 64], seed=1)
        assert max(c.values()) / min(c.values()) < 4


class TestWeakLebesgue:
    def test_single_value(self):
        v = np.zeros(10)
        v[3] = -2.5
        assert weak_lebesgue_quasinorm(v, 2) == 2.5

    def test_two_equal(self):
        assert weak_lebesgue_quasinorm([0, 3.0, 3.0], 2) == pytest.approx(3 * 2**0.5)

    def test_zero(self):
        assert weak_lebesgue_quasinorm(np.zeros(5), 1.5) == 0

    def test_bad_p(self):
        with pytest.raises(ValueError):
            weak_lebesgue_quasinorm([1.0], 0)

    @given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=30),
           st.floats(0.5, 4))
    def test_matches_brute_force(self, vals, p):
        mags = np.abs(vals)
        # sup over t just below each magnitude
        brute = max([m * np.sum(mags >= m) ** (1 / p) for m in mags if m > 0], default=0.0)
        assert weak_lebesgue_quasinorm(vals, p) == pytest.approx(brute, rel=1e-12)


GRID = Grid(32, 32)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_periodic_inverts_laplacian(seed):
    rho = ScalarField(GRID, band_limited(GRID, np.random.default_rng(seed), 10))
    res = -laplacian(solve_poisson_periodic(rho)).values - rho.values
    assert np.abs(res).max() <= 1e-12 * np.abs(rho.values).max()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5), st.floats(-5, 5))
def test_periodic_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    r1 = ScalarField(GRID, band_limited(GRID, rng))
    r2 = ScalarField(GRID, band_limited(GRID, rng))
    lhs = solve_poisson_periodic(r1 * a + r2 * b).values
    rhs = a * solve_poisson_periodic(r1).values + b * solve_poisson_periodic(r2).values
    assert np.abs(lhs - rhs).max() <= 1e-12 * (1 + np.abs(rhs).max())


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 2))
def test_dirichlet_maximum_principle(seed, gamma):
    g = Grid(16, 16, "square")
    rho = ScalarField(g, np.random.default_rng(seed).random(g.shape))
    assert solve_poisson_dirichlet(rho, gamma).values.min() >= gamma - 1e-12
