"""Potential solves for -Lap(Phi) = rho, and the periodic elliptic-estimate checks."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.fft as sfft

from .errors import DomainMismatchError, PreconditionError, SolverError
from .fields import Grid, ScalarField, VectorField, gradient, lp_norm, torus_ops

__all__ = [
    "solve_poisson_periodic",
    "solve_poisson_dirichlet",
    "grad_potential",
    "elliptic_ratio",
    "elliptic_ratio_test",
    "EllipticReport",
    "random_charge",
    "weak_lebesgue_quasinorm",
    "riesz_multiplier",
    "endpoint_constant_test",
    "dirichlet_eigenvalues",
]


def _periodic_potential_hat(ops, rho_hat: np.ndarray) -> np.ndarray:
    return rho_hat * ops.inv_k2


def solve_poisson_periodic(rho: ScalarField) -> ScalarField:
    """Mean-zero solution of ``-Lap(Phi) = rho`` on the torus.

    Raises :class:`PreconditionError` when ``rho`` is not neutral, i.e. when
    ``|mean(rho)| >= 1e-10 * (1 + ||rho||_2)``.
    """
    if not rho.grid.is_torus:
        raise DomainMismatchError("solve_poisson_periodic needs a torus grid")
    ops = torus_ops(rho.grid)
    rh = ops.fft(rho.values)
    mean = np.abs(rh[..., 0, 0])
    norm = np.sqrt(ops.norm2_hat(rh))
    if np.any(mean >= 1e-10 * (1.0 + norm)):
        raise PreconditionError(f"charge density is not neutral: mean = {np.max(mean):.3e}")
    return ScalarField(rho.grid, ops.ifft(_periodic_potential_hat(ops, rh)))


# --------------------------------------------------------------------------
# Dirichlet problem on the square


def dirichlet_eigenvalues(grid: Grid) -> np.ndarray:
    """Eigenvalues of minus the five-point Laplacian on interior nodes.

    Returned with shape ``(nx-2, ny-2)``, matching the DST-I mode layout.
    """
    nx, ny = grid.shape
    p = np.arange(1, nx - 1)
    q = np.arange(1, ny - 1)
    lx = 4.0 / grid.hx**2 * np.sin(np.pi * p / (2 * (nx - 1))) ** 2
    ly = 4.0 / grid.hy**2 * np.sin(np.pi * q / (2 * (ny - 1))) ** 2
    return lx[:, None] + ly[None, :]


def _apply_neg_lap_interior(v: np.ndarray, hx: float, hy: float) -> np.ndarray:
    """``-L v`` for interior unknowns ``v`` with zero boundary values."""
    p = np.pad(v, [(0, 0)] * (v.ndim - 2) + [(1, 1), (1, 1)])
    return ((2.0 * v - p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) / hx**2
            + (2.0 * v - p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) / hy**2)


def _cg(b: np.ndarray, hx: float, hy: float, tol_abs: float, maxiter: int):
    """Unpreconditioned conjugate gradients for the interior system."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    w = hx * hy
    rr = np.sum(r * r)
    it = 0
    while np.sqrt(rr * w) > tol_abs:
        if it >= maxiter:
            raise SolverError(
                f"CG did not converge in {maxiter} iterations; residual {np.sqrt(rr * w):.3e} "
                f"> target {tol_abs:.3e}", residual=float(np.sqrt(rr * w)), iterations=it)
        Ap = _apply_neg_lap_interior(p, hx, hy)
        alpha = rr / np.sum(p * Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = np.sum(r * r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    return x, it


def _dst_solve(b: np.ndarray, grid: Grid) -> np.ndarray:
    lam = dirichlet_eigenvalues(grid)
    bh = sfft.dstn(b, type=1, axes=(-2, -1))
    return sfft.idstn(bh / lam, type=1, axes=(-2, -1))


def solve_poisson_dirichlet(rho: ScalarField, gamma: float, method: str = "cg",
                            rtol: float = 1e-10, maxiter: int | None = None) -> ScalarField:
    """Solve the five-point problem ``-L Phi = rho`` inside, ``Phi = gamma`` on the edge.

    ``method="cg"`` iterates until the interior residual (discrete L2) is
    below ``rtol * ||rho||_2``, with at most ``20*nx`` iterations by default.
    ``method="dst"`` uses the exact sine-transform diagonalization.
    """
    grid = rho.grid
    if grid.is_torus:
        raise DomainMismatchError("solve_poisson_dirichlet needs a square grid")
    if rho.values.ndim != 2:
        raise ValueError("solve_poisson_dirichlet expects a single field")
    b = rho.values[1:-1, 1:-1]
    out = np.full(grid.shape, float(gamma))
    if method == "dst":
        out[1:-1, 1:-1] += _dst_solve(b, grid)
    elif method == "cg":
        target = rtol * float(lp_norm(rho, 2))
        if target > 0:
            x, _ = _cg(b, grid.hx, grid.hy, target, maxiter or 20 * grid.nx)
            out[1:-1, 1:-1] += x
    else:
        raise ValueError(f"unknown method {method!r}")
    return ScalarField(grid, out)


def grad_potential(phi: ScalarField) -> VectorField:
    return gradient(phi)


# --------------------------------------------------------------------------
# L^{4/3} -> W^{1,4} ratio on the torus


def elliptic_ratio(rho: ScalarField) -> float:
    """``||grad Phi||_{L^4} / ||rho||_{L^{4/3}}`` for the periodic potential of ``rho``."""
    phi = solve_poisson_periodic(rho)
    return float(lp_norm(gradient(phi), 4) / lp_norm(rho, 4.0 / 3.0))


def random_charge(grid: Grid, rng: np.random.Generator, spectrum: str = "pink") -> ScalarField:
    """Random real mean-zero density band-limited to ``1 <= |k| <= n/4``.

    Coefficients are independent standard complex normals, multiplied by
    ``|k|^-1`` for ``spectrum="pink"`` and left flat for ``"white"``.
    """
    ops = torus_ops(grid)
    shape = ops.kabs.shape
    coeffs = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    band = (ops.kabs >= 1) & (ops.kabs <= min(grid.nx, grid.ny) / 4)
    if spectrum == "pink":
        weight = np.where(band, 1.0 / np.where(band, ops.kabs, 1.0), 0.0)
    elif spectrum == "white":
        weight = band.astype(float)
    else:
        raise ValueError(f"unknown spectrum {spectrum!r}")
    values = ops.ifft(coeffs * weight)
    values -= values.mean()
    return ScalarField(grid, values)


@dataclass
class EllipticReport:
    seed: int
    spectrum: str
    ratios: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def per_resolution(self) -> dict[int, float]:
        return {n: float(r.max()) for n, r in self.ratios.items()}

    @property
    def max_ratio(self) -> float:
        return max(self.per_resolution.values())

    @property
    def mean_ratio(self) -> float:
        return float(np.mean(np.concatenate(list(self.ratios.values()))))

    @property
    def spread(self) -> float:
        """Largest over smallest per-resolution maximum."""
        vals = list(self.per_resolution.values())
        return max(vals) / min(vals)

    def summary(self) -> dict:
        return {"max_ratio": self.max_ratio, "mean_ratio": self.mean_ratio, "seed": self.seed,
                "spectrum": self.spectrum,
                "per_resolution": {str(k): v for k, v in self.per_resolution.items()}}

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "elliptic_ratios.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["resolution", "sample_index", "ratio"])
            for n, r in self.ratios.items():
                for i, v in enumerate(r):
                    w.writerow([n, i, repr(float(v))])
        (out / "elliptic_summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True))


def elliptic_ratio_test(n_samples: int, resolutions: Sequence[int], seed: int,
                        spectrum: str = "pink") -> EllipticReport:
    """Sample ``||grad Phi||_4 / ||rho||_{4/3}`` over random charges at each resolution.

    Every resolution gets its own stream derived from ``(seed, n)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if len(resolutions) == 0:
        raise ValueError("resolutions must not be empty")
    report = EllipticReport(seed=seed, spectrum=spectrum)
    for n in resolutions:
        grid = Grid(n, n)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(n),)))
        report.ratios[int(n)] = np.array(
            [elliptic_ratio(random_charge(grid, rng, spectrum)) for _ in range(n_samples)])
    return report


# --------------------------------------------------------------------------
# Weak Lebesgue quasinorm on the lattice


def weak_lebesgue_quasinorm(values, p: float) -> float:
    """``sup_t t * #{|f| > t}^(1/p)`` for a finitely supported lattice function.

    The supremum is attained in the limit ``t -> v`` from below at one of the
    values ``v``; with the magnitudes sorted in decreasing order it equals
    ``max_j v_(j) * j^(1/p)``, ties counted at their last position.
    """
    if not p > 0:
        raise ValueError(f"p must be positive, got {p}")
    mags = np.sort(np.abs(np.asarray(values)).ravel())[::-1]
    mags = mags[mags > 0]
    if mags.size == 0:
        return 0.0
    # count of entries >= each value (ties resolved to the last index)
    counts = mags.size - np.searchsorted(mags[::-1], mags, side="left")
    return float(np.max(mags * counts ** (1.0 / p)))


def riesz_multiplier(h: ScalarField) -> np.ndarray:
    """Lattice function ``k -> |k|^-1 h_k`` on the full frequency lattice, k != 0."""
    from .fields import spectral_transform
    full = spectral_transform(h).full()
    nx, ny = h.grid.shape
    kx = sfft.fftfreq(nx, 1.0 / nx)[:, None]
    ky = sfft.fftfreq(ny, 1.0 / ny)[None, :]
    k = np.sqrt(kx**2 + ky**2)
    return np.where(k > 0, np.abs(full) / np.where(k > 0, k, 1.0), 0.0)


def endpoint_constant_test(n_samples: int, resolutions: Sequence[int], seed: int) -> dict[int, float]:
    """Largest ``||P h||_{L^{2,inf}} / ||h||_{L^1}`` over random mean-zero ``h``.

    ``h`` is a sparse sum of grid-point spikes (the discrete analogue of the
    L^1 extremals) with the mean removed.
    """
    if len(resolutions) == 0:
        raise ValueError("resolutions must not be empty")
    out = {}
    for n in resolutions:
        grid = Grid(n, n)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(n), 1)))
        best = 0.0
        for _ in range(n_samples):
            v = np.zeros(grid.shape)
            idx = rng.integers(0, n, size=(rng.integers(1, 6), 2))
            v[idx[:, 0], idx[:, 1]] = rng.standard_normal(len(idx))
            v -= v.mean()
            h = ScalarField(grid, v)
            ratio = weak_lebesgue_quasinorm(riesz_multiplier(h), 2.0) / float(lp_norm(h, 1))
            best = max(best, ratio)
        out[int(n)] = best
    return out
