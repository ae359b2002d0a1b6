"""Grids, sampled fields and the discrete operators acting on them.

Two domains are supported:

* ``Domain.TORUS``: the periodic box [0, 2*pi)^2 sampled on an ``nx x ny``
  uniform grid. Operators are pseudo-spectral and act exactly on each
  Fourier mode.
* ``Domain.SQUARE``: the closed unit square sampled at ``nx x ny`` nodes
  including the boundary. First derivatives are second-order centred
  differences with one-sided second-order closure at the edges.

Field values are stored as float64 arrays whose two trailing axes are
``(x, y)``: ``values[i, j]`` is the sample at ``(x_i, y_j)``. Leading axes
are allowed and are treated as a batch (ensembles of paths, species).

Spectral coefficients are normalized so that ``f(x) = sum_k c_k exp(i k.x)``,
stored in the half-plane layout of a real FFT over the last two axes.
"""

from __future__ import annotations

import enum
import functools
import struct
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np
import scipy.fft as sfft

from .errors import DomainMismatchError, PreconditionError

__all__ = [
    "Domain",
    "Grid",
    "ScalarField",
    "VectorField",
    "SpectralCoefficients",
    "spectral_transform",
    "inverse_transform",
    "fractional_laplacian",
    "leray_project",
    "dealias",
    "gradient",
    "divergence",
    "advect",
    "laplacian",
    "inner",
    "integrate",
    "lp_norm",
    "h_seminorm",
    "torus_ops",
    "square_ops",
    "encode_records",
    "decode_records",
    "set_fft_workers",
]

TWO_PI = 2.0 * np.pi

# scipy.fft worker count; multithreaded pocketfft splits over independent
# 1D transforms, so results do not depend on this setting.
_FFT_WORKERS = 1


def set_fft_workers(n: int) -> None:
    """Set the number of threads used by every FFT in the package."""
    global _FFT_WORKERS
    _FFT_WORKERS = max(1, int(n))


class Domain(enum.Enum):
    TORUS = "torus"
    SQUARE = "square"

    @classmethod
    def parse(cls, value) -> "Domain":
        if isinstance(value, Domain):
            return value
        key = str(value).strip().lower()
        aliases = {"torus": cls.TORUS, "torus2pi": cls.TORUS, "periodic": cls.TORUS,
                   "square": cls.SQUARE, "unitsquaredirichlet": cls.SQUARE,
                   "unit_square": cls.SQUARE}
        if key not in aliases:
            raise ValueError(f"unknown domain {value!r}")
        return aliases[key]


_FFT_PRIMES = (2, 3, 5)


def _is_fft_friendly(n: int) -> bool:
    for p in _FFT_PRIMES:
        while n % p == 0:
            n //= p
    return n == 1


@dataclass(frozen=True)
class Grid:
    """Uniform sampling of one of the two domains.

    On the torus both sizes must be even, at least 8, and have no prime
    factor other than 2, 3 or 5. On the square sizes must be even and at
    least 8; the node spacing is ``1/(n-1)``.
    """

    nx: int
    ny: int
    domain: Domain = Domain.TORUS

    def __post_init__(self):
        object.__setattr__(self, "domain", Domain.parse(self.domain))
        for name in ("nx", "ny"):
            n = getattr(self, name)
            if isinstance(n, bool) or int(n) != n:
                raise ValueError(f"{name} must be an integer, got {n!r}")
            n = int(n)
            object.__setattr__(self, name, n)
            if n < 8 or n % 2:
                raise ValueError(f"{name}={n}: grid sizes must be even and >= 8")
            if self.domain is Domain.TORUS and not _is_fft_friendly(n):
                raise ValueError(
                    f"{name}={n}: torus sizes must factor over {_FFT_PRIMES}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def is_torus(self) -> bool:
        return self.domain is Domain.TORUS

    @property
    def length(self) -> float:
        return TWO_PI if self.is_torus else 1.0

    @property
    def hx(self) -> float:
        return TWO_PI / self.nx if self.is_torus else 1.0 / (self.nx - 1)

    @property
    def hy(self) -> float:
        return TWO_PI / self.ny if self.is_torus else 1.0 / (self.ny - 1)

    @property
    def spacing(self) -> float:
        """Smallest grid spacing (equal to both when nx == ny)."""
        return min(self.hx, self.hy)

    @property
    def area(self) -> float:
        return self.length**2

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        if self.is_torus:
            return (np.arange(self.nx) * self.hx, np.arange(self.ny) * self.hy)
        return (np.linspace(0.0, 1.0, self.nx), np.linspace(0.0, 1.0, self.ny))

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` sample coordinates, each of shape ``(nx, ny)``."""
        x, y = self.axes()
        return np.meshgrid(x, y, indexing="ij")

    @functools.cached_property
    def weights(self) -> np.ndarray:
        """Quadrature weights: equal weights on the torus, trapezoid on the square."""
        if self.is_torus:
            w = np.full(self.shape, self.hx * self.hy)
        else:
            wx = np.full(self.nx, self.hx)
            wy = np.full(self.ny, self.hy)
            wx[[0, -1]] *= 0.5
            wy[[0, -1]] *= 0.5
            w = np.outer(wx, wy)
        w.flags.writeable = False
        return w

    def describe(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "domain": self.domain.value}


def _check_values(grid: Grid, values, trailing: tuple[int, ...]) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim < len(trailing) or arr.shape[arr.ndim - len(trailing):] != trailing:
        raise ValueError(f"expected trailing shape {trailing}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("field values must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real scalar samples on a grid; ``values`` has shape ``(..., nx, ny)``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.grid, self.values, self.grid.shape))

    @classmethod
    def zeros(cls, grid: Grid) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def constant(cls, grid: Grid, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "ScalarField":
        X, Y = grid.coordinates()
        return cls(grid, np.broadcast_to(fn(X, Y), grid.shape))

    def mean(self):
        return integrate(self.grid, self.values) / self.grid.area

    def _coerce(self, other):
        if isinstance(other, ScalarField):
            _same_grid(self.grid, other.grid)
            return other.values
        return other

    def __add__(self, other):
        return ScalarField(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - self._coerce(other))

    def __rsub__(self, other):
        return ScalarField(self.grid, self._coerce(other) - self.values)

    def __mul__(self, other):
        return ScalarField(self.grid, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return ScalarField(self.grid, self.values / self._coerce(other))

    def __neg__(self):
        return ScalarField(self.grid, -self.values)


@dataclass(frozen=True, eq=False)
class VectorField:
    """Real 2-vector samples; ``values`` has shape ``(..., 2, nx, ny)``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values",
                           _check_values(self.grid, self.values, (2,) + self.grid.shape))

    @classmethod
    def from_components(cls, x: ScalarField, y: ScalarField) -> "VectorField":
        _same_grid(x.grid, y.grid)
        return cls(x.grid, np.stack([x.values, y.values], axis=-3))

    @classmethod
    def zeros(cls, grid: Grid) -> "VectorField":
        return cls(grid, np.zeros((2,) + grid.shape))

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "VectorField":
        X, Y = grid.coordinates()
        fx, fy = fn(X, Y)
        return cls(grid, np.stack([np.broadcast_to(fx, grid.shape),
                                   np.broadcast_to(fy, grid.shape)]))

    @property
    def x_component(self) -> ScalarField:
        return ScalarField(self.grid, self.values[..., 0, :, :])

    @property
    def y_component(self) -> ScalarField:
        return ScalarField(self.grid, self.values[..., 1, :, :])

    def _coerce(self, other):
        if isinstance(other, VectorField):
            _same_grid(self.grid, other.grid)
            return other.values
        return other

    def __add__(self, other):
        return VectorField(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return VectorField(self.grid, self.values - self._coerce(other))

    def __mul__(self, other):
        if isinstance(other, ScalarField):
            _same_grid(self.grid, other.grid)
            return VectorField(self.grid, self.values * other.values[..., None, :, :])
        return VectorField(self.grid, self.values * other)

    __rmul__ = __mul__

    def __neg__(self):
        return VectorField(self.grid, -self.values)


Field = Union[ScalarField, VectorField]


def _same_grid(a: Grid, b: Grid) -> None:
    if a != b:
        raise DomainMismatchError(f"grid mismatch: {a} vs {b}")


def _require_torus(grid: Grid, op: str) -> None:
    if not grid.is_torus:
        raise DomainMismatchError(f"{op} requires a torus grid, got {grid.domain.value}")


# --------------------------------------------------------------------------
# Torus kernels


class TorusOps:
    """Precomputed wavenumber tables and spectral kernels for one torus grid.

    All methods act on raw arrays with arbitrary leading batch axes.
    """

    def __init__(self, grid: Grid):
        _require_torus(grid, "TorusOps")
        self.grid = grid
        nx, ny = grid.shape
        self.nyh = ny // 2 + 1
        kx = sfft.fftfreq(nx, 1.0 / nx)[:, None]
        ky = sfft.rfftfreq(ny, 1.0 / ny)[None, :]
        self.kx = np.broadcast_to(kx, (nx, self.nyh)).copy()
        self.ky = np.broadcast_to(ky, (nx, self.nyh)).copy()
        self.k2 = self.kx**2 + self.ky**2
        self.kabs = np.sqrt(self.k2)
        # Derivative wavenumbers: the unpaired Nyquist modes are dropped so
        # that derivatives of real fields stay real and div(P v) vanishes.
        self.kx_d = np.where(np.abs(self.kx) == nx // 2, 0.0, self.kx)
        self.ky_d = np.where(self.ky == ny // 2, 0.0, self.ky)
        self.k2_d = self.kx_d**2 + self.ky_d**2
        with np.errstate(divide="ignore"):
            self.inv_k2 = np.where(self.k2 > 0, 1.0 / np.where(self.k2 > 0, self.k2, 1.0), 0.0)
            self.inv_k2_d = np.where(self.k2_d > 0, 1.0 / np.where(self.k2_d > 0, self.k2_d, 1.0), 0.0)
        # Two-thirds rule, strict so that products are alias free for every n.
        self.dealias_mask = (np.abs(self.kx) < nx / 3.0) & (self.ky < ny / 3.0)
        # Parseval weights for the half-plane storage.
        w = np.where((self.ky > 0) & (self.ky < ny / 2.0), 2.0, 1.0)
        self.parseval = w
        self.area = grid.area

    def fft(self, a: np.ndarray) -> np.ndarray:
        return sfft.rfft2(a, norm="forward", workers=_FFT_WORKERS)

    def ifft(self, ah: np.ndarray) -> np.ndarray:
        return sfft.irfft2(ah, s=self.grid.shape, norm="forward", workers=_FFT_WORKERS)

    def grad_hat(self, ah: np.ndarray) -> np.ndarray:
        """Spectral gradient: returns coefficients of shape ``(..., 2, nx, nyh)``."""
        return np.stack([1j * self.kx_d * ah, 1j * self.ky_d * ah], axis=-3)

    def grad(self, a: np.ndarray) -> np.ndarray:
        return self.ifft(self.grad_hat(self.fft(a)))

    def div_hat(self, vh: np.ndarray) -> np.ndarray:
        return 1j * (self.kx_d * vh[..., 0, :, :] + self.ky_d * vh[..., 1, :, :])

    def div(self, v: np.ndarray) -> np.ndarray:
        return self.ifft(self.div_hat(self.fft(v)))

    def laplacian(self, a: np.ndarray) -> np.ndarray:
        return self.ifft(-self.k2 * self.fft(a))

    def leray_hat(self, vh: np.ndarray) -> np.ndarray:
        kdotv = self.kx_d * vh[..., 0, :, :] + self.ky_d * vh[..., 1, :, :]
        s = kdotv * self.inv_k2_d
        return np.stack([vh[..., 0, :, :] - self.kx_d * s,
                         vh[..., 1, :, :] - self.ky_d * s], axis=-3)

    def leray(self, v: np.ndarray) -> np.ndarray:
        return self.ifft(self.leray_hat(self.fft(v)))

    def dealias_hat(self, ah: np.ndarray) -> np.ndarray:
        return ah * self.dealias_mask

    def integrate(self, a: np.ndarray) -> np.ndarray:
        return a.sum(axis=(-2, -1)) * (self.grid.hx * self.grid.hy)

    def norm2_hat(self, ah: np.ndarray) -> np.ndarray:
        """Squared L2 norm from coefficients (sums over the last two axes)."""
        return self.area * np.sum(self.parseval * (ah.real**2 + ah.imag**2), axis=(-2, -1))


@functools.lru_cache(maxsize=32)
def torus_ops(grid: Grid) -> TorusOps:
    return TorusOps(grid)


# --------------------------------------------------------------------------
# Square kernels


def _d1(a: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Second-order first derivative along ``axis`` with one-sided closure."""
    a = np.moveaxis(a, axis, -1)
    out = np.empty_like(a)
    out[..., 1:-1] = (a[..., 2:] - a[..., :-2]) / (2.0 * h)
    out[..., 0] = (-3.0 * a[..., 0] + 4.0 * a[..., 1] - a[..., 2]) / (2.0 * h)
    out[..., -1] = (3.0 * a[..., -1] - 4.0 * a[..., -2] + a[..., -3]) / (2.0 * h)
    return np.moveaxis(out, -1, axis)


class SquareOps:
    """Finite-difference kernels on the unit-square node grid."""

    def __init__(self, grid: Grid):
        if grid.is_torus:
            raise DomainMismatchError("SquareOps requires a square grid")
        self.grid = grid
        self.hx, self.hy = grid.hx, grid.hy
        self.weights = grid.weights

    def dx(self, a):
        return _d1(a, -2, self.hx)

    def dy(self, a):
        return _d1(a, -1, self.hy)

    def grad(self, a: np.ndarray) -> np.ndarray:
        return np.stack([self.dx(a), self.dy(a)], axis=-3)

    def div(self, v: np.ndarray) -> np.ndarray:
        return self.dx(v[..., 0, :, :]) + self.dy(v[..., 1, :, :])

    def laplacian(self, a: np.ndarray) -> np.ndarray:
        """Five-point Laplacian on interior nodes; boundary entries are zero."""
        out = np.zeros_like(a)
        out[..., 1:-1, 1:-1] = (
            (a[..., 2:, 1:-1] - 2.0 * a[..., 1:-1, 1:-1] + a[..., :-2, 1:-1]) / self.hx**2
            + (a[..., 1:-1, 2:] - 2.0 * a[..., 1:-1, 1:-1] + a[..., 1:-1, :-2]) / self.hy**2)
        return out

    def integrate(self, a: np.ndarray) -> np.ndarray:
        return np.sum(a * self.weights, axis=(-2, -1))


@functools.lru_cache(maxsize=32)
def square_ops(grid: Grid) -> SquareOps:
    return SquareOps(grid)


def ops_for(grid: Grid):
    return torus_ops(grid) if grid.is_torus else square_ops(grid)


# --------------------------------------------------------------------------
# Spectral coefficients


@dataclass(frozen=True, eq=False)
class SpectralCoefficients:
    """Half-plane Fourier coefficients of a real torus field.

    ``coeffs[..., i, j]`` is the coefficient of ``exp(i(kx x + ky y))`` with
    ``kx = fftfreq(nx)*nx`` and ``ky = j``, ``0 <= j <= ny/2``. The remaining
    coefficients follow from conjugate symmetry.
    """

    grid: Grid
    coeffs: np.ndarray

    def mode(self, kx: int, ky: int) -> complex:
        nx, ny = self.grid.shape
        if ky < 0:
            return np.conj(self.mode(-kx, -ky))
        if ky > ny // 2:
            raise IndexError(f"ky={ky} out of range")
        return complex(self.coeffs[..., kx % nx, ky])

    def full(self) -> np.ndarray:
        """Coefficients on the full ``(nx, ny)`` frequency lattice (fft2 layout)."""
        nx, ny = self.grid.shape
        nyh = ny // 2 + 1
        out = np.zeros(self.coeffs.shape[:-2] + (nx, ny), dtype=complex)
        out[..., :nyh] = self.coeffs
        # columns ny/2+1 .. ny-1 hold negative ky
        jj = np.arange(nyh, ny)
        ii = (-np.arange(nx)) % nx
        out[..., :, jj] = np.conj(self.coeffs[..., ii, :][..., :, ny - jj])
        return out

    def wavenumbers(self) -> tuple[np.ndarray, np.ndarray]:
        ops = torus_ops(self.grid)
        return ops.kx, ops.ky


def spectral_transform(f: ScalarField) -> SpectralCoefficients:
    """Forward transform of a torus field."""
    _require_torus(f.grid, "spectral_transform")
    return SpectralCoefficients(f.grid, torus_ops(f.grid).fft(f.values))


def inverse_transform(c: SpectralCoefficients) -> ScalarField:
    _require_torus(c.grid, "inverse_transform")
    return ScalarField(c.grid, torus_ops(c.grid).ifft(c.coeffs))


def dealias(c: SpectralCoefficients) -> SpectralCoefficients:
    """Zero every mode with ``|kx| >= nx/3`` or ``|ky| >= ny/3``."""
    _require_torus(c.grid, "dealias")
    return SpectralCoefficients(c.grid, torus_ops(c.grid).dealias_hat(c.coeffs))


def fractional_laplacian(f: ScalarField, s: float) -> ScalarField:
    """Apply ``Lambda^s = (-Delta)^{s/2}`` on the torus.

    Mode ``k`` is multiplied by ``|k|^s``. For ``s != 0`` the mean is sent
    to zero; negative ``s`` requires mean-zero input.
    """
    _require_torus(f.grid, "fractional_laplacian")
    ops = torus_ops(f.grid)
    fh = ops.fft(f.values)
    if s == 0:
        return ScalarField(f.grid, f.values)
    if s < 0:
        mean = np.abs(fh[..., 0, 0])
        norm = np.sqrt(ops.norm2_hat(fh))
        if np.any(mean > 1e-12 * norm):
            raise PreconditionError(
                f"negative power s={s} needs mean-zero input; |mean| = {np.max(mean):.3e}")
    with np.errstate(divide="ignore"):
        mult = np.where(ops.kabs > 0, np.where(ops.kabs > 0, ops.kabs, 1.0) ** s, 0.0)
    return ScalarField(f.grid, ops.ifft(mult * fh))


def leray_project(v: VectorField) -> VectorField:
    """L2-orthogonal projection onto discretely divergence-free fields.

    On the torus this is the mode-wise ``(I - k k^T/|k|^2)``. On the square
    the projection is onto the discrete stream-function space (see
    :mod:`snpns.stokes`), which also enforces the no-slip condition.
    """
    if v.grid.is_torus:
        return VectorField(v.grid, torus_ops(v.grid).leray(v.values))
    from .stokes import stokes_space
    return VectorField(v.grid, stokes_space(v.grid).project(v.values))


def gradient(f: ScalarField) -> VectorField:
    return VectorField(f.grid, ops_for(f.grid).grad(f.values))


def divergence(v: VectorField) -> ScalarField:
    return ScalarField(v.grid, ops_for(v.grid).div(v.values))


def laplacian(f: ScalarField) -> ScalarField:
    return ScalarField(f.grid, ops_for(f.grid).laplacian(f.values))


def advect(u: VectorField, f: ScalarField, dealiased: bool = True) -> ScalarField:
    """Return ``u . grad f``; on the torus the product is dealiased by default."""
    _same_grid(u.grid, f.grid)
    ops = ops_for(f.grid)
    g = ops.grad(f.values)
    prod = u.values[..., 0, :, :] * g[..., 0, :, :] + u.values[..., 1, :, :] * g[..., 1, :, :]
    if f.grid.is_torus and dealiased:
        prod = ops.ifft(ops.dealias_hat(ops.fft(prod)))
    return ScalarField(f.grid, prod)


def integrate(grid: Grid, a: np.ndarray) -> np.ndarray:
    """Quadrature over the trailing two axes."""
    return ops_for(grid).integrate(np.asarray(a, dtype=float))


def inner(a: Field, b: Field):
    """L2 inner product by the grid quadrature rule (summing vector components)."""
    _same_grid(a.grid, b.grid)
    prod = a.values * b.values
    if isinstance(a, VectorField):
        prod = prod.sum(axis=-3)
    return integrate(a.grid, prod)


def _magnitude(f: Field) -> np.ndarray:
    if isinstance(f, VectorField):
        return np.sqrt(np.sum(f.values**2, axis=-3))
    return np.abs(f.values)


def lp_norm(f: Field, p: float):
    """``L^p`` norm by grid quadrature; ``p = inf`` gives the grid maximum."""
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    m = _magnitude(f)
    if np.isinf(p):
        return m.max(axis=(-2, -1))
    if m.max() == 0:
        return m.sum(axis=(-2, -1))
    # scale to avoid overflow for large p
    scale = m.max(axis=(-2, -1), keepdims=True)
    scale = np.where(scale > 0, scale, 1.0)
    return scale[..., 0, 0] * integrate(f.grid, (m / scale) ** p) ** (1.0 / p)


def h_seminorm(f: Field, k: int):
    """Homogeneous Sobolev seminorm of integer order ``k``.

    Torus: ``||Lambda^k f||``. Square: ``k = 1`` uses the discrete gradient,
    ``k = 2`` the five-point Laplacian on interior nodes.
    """
    k = int(k)
    if k < 0:
        raise ValueError("k must be nonnegative")
    if k == 0:
        return lp_norm(f, 2)
    comps = [f] if isinstance(f, ScalarField) else [f.x_component, f.y_component]
    total = 0.0
    for c in comps:
        if f.grid.is_torus:
            ops = torus_ops(f.grid)
            total = total + ops.norm2_hat(ops.kabs**k * ops.fft(c.values))
        elif k == 1:
            total = total + integrate(f.grid, np.sum(square_ops(f.grid).grad(c.values) ** 2, axis=-3))
        elif k == 2:
            total = total + integrate(f.grid, square_ops(f.grid).laplacian(c.values) ** 2)
        else:
            raise ValueError("square seminorms are available for k <= 2")
    return np.sqrt(total)


# --------------------------------------------------------------------------
# Binary records

MAGIC = b"ESNP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIBII")
_DOMAIN_TAGS = {Domain.TORUS: 0, Domain.SQUARE: 1}
_TAG_DOMAINS = {v: k for k, v in _DOMAIN_TAGS.items()}


def encode_records(grid: Grid, values: np.ndarray) -> bytes:
    """Serialize an array of shape ``(..., nx, ny)`` as consecutive records.

    Each ``nx x ny`` slab becomes one record: a header followed by the
    samples as row-major little-endian float64.
    """
    arr = np.asarray(values, dtype="<f8")
    slabs = arr.reshape((-1,) + grid.shape)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, _DOMAIN_TAGS[grid.domain], grid.nx, grid.ny)
    return b"".join(header + np.ascontiguousarray(s).tobytes() for s in slabs)


def iter_records(buf: bytes, offset: int = 0) -> Iterator[tuple[Grid, np.ndarray, int]]:
    """Yield ``(grid, slab, next_offset)`` for every record in ``buf``."""
    while offset < len(buf):
        if len(buf) - offset < _HEADER.size:
            raise ValueError("truncated record header")
        magic, version, tag, nx, ny = _HEADER.unpack_from(buf, offset)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r} at offset {offset}")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported record version {version}")
        grid = Grid(nx, ny, _TAG_DOMAINS[tag])
        start = offset + _HEADER.size
        end = start + 8 * nx * ny
        if end > len(buf):
            raise ValueError("truncated record payload")
        slab = np.frombuffer(buf, dtype="<f8", count=nx * ny, offset=start).reshape(nx, ny)
        yield grid, slab.astype(np.float64), end
        offset = end


def decode_records(buf: bytes) -> tuple[Grid, np.ndarray]:
    """Decode all records in ``buf``; they must share a grid."""
    grid = None
    slabs = []
    for g, slab, _ in iter_records(buf):
        if grid is not None and g != grid:
            raise DomainMismatchError("records on different grids")
        grid = g
        slabs.append(slab)
    if grid is None:
        raise ValueError("no records found")
    return grid, np.stack(slabs)
