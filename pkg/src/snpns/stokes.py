"""Discretely divergence-free velocity space on the unit square.

Velocities are represented through a stream function ``psi`` on the node
grid, ``u = (d_y psi, -d_x psi)``, with the same centred/one-sided
difference operator that :func:`snpns.fields.divergence` uses. Because the
two tensor-product difference operators commute, every such ``u`` has
discrete divergence exactly zero. The admissible stream functions satisfy
``psi = 0`` and ``d_n psi = 0`` at the edges, which makes ``u`` vanish on the
boundary (no slip).

On this space the Stokes problem is solved by a Galerkin method: the mass
matrix ``M = C^T W C`` and stiffness ``K = C^T W (-L) C``, where ``C`` maps
coefficients to nodal velocities, ``W`` holds trapezoid weights and ``L`` is
the five-point Laplacian. The W-orthogonal projection onto the space plays
the role of the Leray projection, and the generalized eigenvectors of
``(K, M)`` are the discrete Stokes eigenfunctions.
"""

from __future__ import annotations

import functools
import hashlib
import logging
import os
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DomainMismatchError
from .fields import Grid

log = logging.getLogger(__name__)


def difference_matrix(n: int, h: float) -> sp.csr_matrix:
    """Sparse 1D first-derivative matrix matching ``fields._d1``."""
    rows, cols, vals = [], [], []
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-1.0, 1.0]
    rows += [0, 0, 0, n - 1, n - 1, n - 1]
    cols += [0, 1, 2, n - 1, n - 2, n - 3]
    vals += [-3.0, 4.0, -1.0, 3.0, -4.0, 1.0]
    return sp.csr_matrix((np.array(vals) / (2.0 * h), (rows, cols)), shape=(n, n))


def clamped_basis(n: int) -> sp.csr_matrix:
    """Basis of ``{v : v_0 = v_{n-1} = 0, (Dv)_0 = (Dv)_{n-1} = 0}``.

    With the one-sided closure the slope conditions read ``v_2 = 4 v_1`` and
    ``v_{n-3} = 4 v_{n-2}``; the free entries are ``v_1, v_3..v_{n-4}, v_{n-2}``.
    """
    free = [1] + list(range(3, n - 3)) + [n - 2]
    rows, cols, vals = [], [], []
    for c, i in enumerate(free):
        rows.append(i)
        cols.append(c)
        vals.append(1.0)
        if i == 1:
            rows.append(2)
            cols.append(c)
            vals.append(4.0)
        elif i == n - 2:
            rows.append(n - 3)
            cols.append(c)
            vals.append(4.0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, len(free)))


def laplacian_matrix(nx: int, ny: int, hx: float, hy: float) -> sp.csr_matrix:
    """Five-point Laplacian on interior nodes; boundary rows are zero."""
    def second(n, h):
        main = np.full(n, -2.0)
        off = np.ones(n - 1)
        T = sp.diags([off, main, off], [-1, 0, 1], format="lil") / h**2
        T[0, :] = 0.0
        T[n - 1, :] = 0.0
        return T.tocsr()

    interior_x = sp.diags(np.r_[0.0, np.ones(nx - 2), 0.0])
    interior_y = sp.diags(np.r_[0.0, np.ones(ny - 2), 0.0])
    L = sp.kron(second(nx, hx), interior_y) + sp.kron(interior_x, second(ny, hy))
    return L.tocsr()


def _cache_dir() -> Path | None:
    root = os.environ.get("SNPNS_CACHE_DIR")
    if root == "":
        return None
    path = Path(root) if root else Path.home() / ".cache" / "snpns"
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError:
        return None
    return path


class StokesSpace:
    """Galerkin velocity space and Stokes operator for one square grid."""

    def __init__(self, grid: Grid):
        if grid.is_torus:
            raise DomainMismatchError("StokesSpace requires a square grid")
        self.grid = grid
        nx, ny = grid.shape
        Dx = difference_matrix(nx, grid.hx)
        Dy = difference_matrix(ny, grid.hy)
        Ex = clamped_basis(nx)
        Ey = clamped_basis(ny)
        self.shape_coeffs = (Ex.shape[1], Ey.shape[1])
        ux = sp.kron(Ex, Dy @ Ey)
        uy = -sp.kron(Dx @ Ex, Ey)
        self.C = sp.vstack([ux, uy]).tocsr()
        w = np.asarray(grid.weights).ravel()
        self.w2 = np.r_[w, w]
        W = sp.diags(self.w2)
        L = laplacian_matrix(nx, ny, grid.hx, grid.hy)
        L2 = sp.block_diag([L, L])
        CtW = (self.C.T @ W).tocsr()
        self.CtW = CtW
        M = (CtW @ self.C).tocsc()
        K = (CtW @ (-L2) @ self.C).tocsc()
        self.M = ((M + M.T) * 0.5).tocsc()
        self.K = ((K + K.T) * 0.5).tocsc()
        self.ndof = self.M.shape[0]
        self._mass_lu = spla.splu(self.M)
        self._step_lu: dict[float, object] = {}
        self._eig: tuple[np.ndarray, np.ndarray] | None = None

    # -- basic maps ---------------------------------------------------------

    def _flatten(self, v: np.ndarray) -> tuple[np.ndarray, tuple]:
        lead = v.shape[:-3]
        return v.reshape((-1, 2 * self.grid.nx * self.grid.ny)).T, lead

    def _unflatten(self, flat: np.ndarray, lead: tuple) -> np.ndarray:
        return flat.T.reshape(lead + (2,) + self.grid.shape)

    def load(self, v: np.ndarray) -> np.ndarray:
        """Return ``C^T W v`` with one column per batch entry."""
        flat, _ = self._flatten(np.asarray(v, dtype=float))
        return self.CtW @ flat

    def velocity(self, a: np.ndarray, lead: tuple = ()) -> np.ndarray:
        return self._unflatten(self.C @ a, lead)

    def project(self, v: np.ndarray) -> np.ndarray:
        """W-orthogonal projection onto the discrete divergence-free space."""
        v = np.asarray(v, dtype=float)
        lead = v.shape[:-3]
        a = self._mass_lu.solve(self.load(v))
        return self.velocity(a, lead)

    def coefficients(self, v: np.ndarray) -> np.ndarray:
        """Galerkin coefficients of the projection of ``v``; shape ``(ndof, batch)``."""
        return self._mass_lu.solve(self.load(v))

    # -- time stepping ------------------------------------------------------

    def implicit_solver(self, dt: float):
        """Factorization of ``M + dt K`` (cached per dt)."""
        key = float(dt)
        lu = self._step_lu.get(key)
        if lu is None:
            if len(self._step_lu) > 8:
                self._step_lu.clear()
            lu = spla.splu((self.M + key * self.K).tocsc())
            self._step_lu[key] = lu
        return lu

    def backward_euler(self, rhs: np.ndarray, dt: float) -> np.ndarray:
        """Solve ``u - dt*Lap(u) = rhs`` in the space (Galerkin sense)."""
        rhs = np.asarray(rhs, dtype=float)
        lead = rhs.shape[:-3]
        a = self.implicit_solver(dt).solve(self.load(rhs))
        return self.velocity(a, lead)

    # -- eigenpairs -----------------------------------------------------------

    def _cache_file(self, count: int) -> Path | None:
        d = _cache_dir()
        if d is None:
            return None
        tag = hashlib.sha256(f"stokes-v1-{self.grid.nx}x{self.grid.ny}".encode()).hexdigest()[:12]
        return d / f"stokes_{self.grid.nx}x{self.grid.ny}_{count}_{tag}.npz"

    def eigenpairs(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        """Lowest ``count`` eigenvalues and nodal eigenvectors.

        Returns ``(mu, modes)`` with ``modes`` of shape ``(count, 2, nx, ny)``,
        orthonormal in the trapezoid inner product.
        """
        count = int(count)
        if count < 1:
            raise ValueError("count must be >= 1")
        if self._eig is not None and self._eig[0].size >= count:
            mu, modes = self._eig
            return mu[:count], modes[:count]
        want = max(count, 16)
        path = self._cache_file(want)
        mu = vecs = None
        if path is not None and path.exists():
            try:
                data = np.load(path)
                mu, vecs = data["mu"], data["vecs"]
            except (OSError, KeyError, ValueError):
                mu = vecs = None
        if mu is None:
            v0 = np.ones(self.ndof)
            mu, vecs = spla.eigsh(self.K, k=want, M=self.M, sigma=0.0, which="LM", v0=v0)
            order = np.argsort(mu)
            mu, vecs = mu[order], vecs[:, order]
            # fix the sign convention for reproducible modes
            for j in range(vecs.shape[1]):
                i = np.argmax(np.abs(vecs[:, j]) > 1e-8 * np.abs(vecs[:, j]).max())
                if vecs[i, j] < 0:
                    vecs[:, j] = -vecs[:, j]
            if path is not None:
                try:
                    np.savez(path, mu=mu, vecs=vecs)
                except OSError:
                    log.warning("could not write Stokes eigen cache %s", path)
        # M-normalize (eigsh already does, but be explicit)
        norms = np.sqrt(np.einsum("ij,ij->j", vecs, self.M @ vecs))
        vecs = vecs / norms
        modes = self.velocity(vecs, (vecs.shape[1],))
        self._eig = (mu, modes)
        self._eig_coeffs = vecs
        return mu[:count], modes[:count]


@functools.lru_cache(maxsize=8)
def stokes_space(grid: Grid) -> StokesSpace:
    return StokesSpace(grid)
