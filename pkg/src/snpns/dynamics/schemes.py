"""One IMEX Euler-Maruyama step on each domain.

Both schemes treat viscosity and ionic diffusion implicitly, and advection,
electromigration and the electric body force explicitly at the old time
level. The potential is recomputed from the concentrations at the start of
every step, i.e. right after the previous concentration update.

``charge_source`` replaces the concentrations used for the charge density
and potential (the Picard iteration takes them from the previous iterate).

The optional ``control`` argument implements the feedback term of the
shadow system: on the span of the first ``n`` modes the velocity is pulled
toward a target with rate ``lam``. The term is treated implicitly, so the
update on those modes is ``(1 + dt*mu + dt*lam) u_new = rhs + dt*lam*target``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from ..fields import square_ops, torus_ops
from ..poisson import dirichlet_eigenvalues
from .model import BC, Model, _half_plane_wavevectors


@dataclass
class Control:
    """Feedback ``lam * P_n(target - u)`` applied on paths where ``active``."""

    lam: float
    n_modes: int
    target: np.ndarray
    active: np.ndarray


def _expand(active: np.ndarray, ndim_tail: int) -> np.ndarray:
    a = np.asarray(active, dtype=float)
    return a.reshape(a.shape + (1,) * ndim_tail)


class TorusScheme:
    def __init__(self, model: Model):
        self.model = model
        self.grid = model.grid
        self.ops = ops = torus_ops(model.grid)
        self.z = model.z
        self.D = model.D
        self.Dz = (model.D * model.z)[:, None, None, None]
        self.f_hat = ops.leray_hat(ops.fft(model.forcing))
        self.noise_hat = ops.fft(model.noise.scaled_modes) if model.noise.count else None
        self._pn_masks: dict[int, np.ndarray] = {}

    # -- pieces ---------------------------------------------------------------

    def rho(self, c: np.ndarray) -> np.ndarray:
        return np.einsum("i,...ixy->...xy", self.z, c)

    def potential(self, c: np.ndarray):
        ops = self.ops
        ph = ops.fft(self.rho(c)) * ops.inv_k2
        return ops.ifft(ph), ops.ifft(ops.grad_hat(ph))

    def _nonlinear_hat(self, u, uh, rho, gphi):
        ops = self.ops
        omega = ops.ifft(1j * (ops.kx_d * uh[..., 1, :, :] - ops.ky_d * uh[..., 0, :, :]))
        # u.grad u = grad(|u|^2/2) + omega * (-u_y, u_x); the gradient is
        # removed by the projection.
        n = np.stack([-omega * u[..., 1, :, :], omega * u[..., 0, :, :]], axis=-3)
        n += rho[..., None, :, :] * gphi
        return -ops.dealias_hat(ops.fft(n))

    def explicit_velocity_drift(self, u, rho, gphi) -> np.ndarray:
        ops = self.ops
        uh = ops.fft(u)
        return ops.ifft(ops.leray_hat(self._nonlinear_hat(u, uh, rho, gphi) + self.f_hat))

    def pn_mask(self, n: int) -> np.ndarray:
        """rfft-layout mask of the ``n`` lowest divergence-free real modes (k != 0)."""
        mask = self._pn_masks.get(n)
        if mask is None:
            if n % 2:
                raise ValueError("on the torus n_modes must be even (cos/sin pairs)")
            nx, ny = self.grid.shape
            mask = np.zeros(self.ops.kx.shape, dtype=bool)
            for kx, ky in _half_plane_wavevectors(n // 2):
                if ky < 0:
                    kx, ky = -kx, -ky
                mask[kx % nx, ky] = True
                if ky == 0:
                    mask[(-kx) % nx, 0] = True
            self._pn_masks[n] = mask
        return mask

    def control_norm_sq(self, diff: np.ndarray, n: int) -> np.ndarray:
        """``||P_n diff||^2`` per path."""
        ops = self.ops
        dh = ops.fft(diff) * self.pn_mask(n)
        return ops.norm2_hat(dh).sum(axis=-1)

    # -- step -----------------------------------------------------------------

    def advance(self, u, c, dt, dW, control: Control | None = None, charge_source=None):
        ops = self.ops
        model = self.model
        rho = self.rho(c if charge_source is None else charge_source)
        ph = ops.fft(rho) * ops.inv_k2
        gphi = ops.ifft(ops.grad_hat(ph))
        uh = ops.fft(u)
        rhs = uh + dt * self.f_hat
        if model.nonlinear:
            rhs += dt * self._nonlinear_hat(u, uh, rho, gphi)
        if self.noise_hat is not None and dW is not None:
            rhs += np.einsum("...m,mcxy->...cxy", dW, self.noise_hat)
        rhs = ops.leray_hat(rhs)
        denom = 1.0 + dt * ops.k2
        if control is not None and control.lam != 0:
            mask = self.pn_mask(control.n_modes)
            lam = dt * control.lam * _expand(control.active, 3)
            th = ops.fft(control.target)
            uh_new = np.where(mask, (rhs + lam * th) / (denom + lam), rhs / denom)
        else:
            uh_new = rhs / denom
        u_new = ops.ifft(uh_new)

        ch = ops.fft(c)
        if model.nonlinear:
            flux = (-u[..., None, :, :, :] * c[..., :, None, :, :]
                    + self.Dz * c[..., :, None, :, :] * gphi[..., None, :, :, :])
            ch = ch + dt * ops.div_hat(ops.dealias_hat(ops.fft(flux)))
        cdenom = 1.0 + dt * self.D[:, None, None] * ops.k2
        c_new = ops.ifft(ch / cdenom)
        return u_new, c_new


class SquareScheme:
    def __init__(self, model: Model):
        from ..stokes import stokes_space
        self.model = model
        self.grid = g = model.grid
        self.ops = square_ops(g)
        self.space = stokes_space(g)
        self.z = model.z
        self.D = model.D
        self.gamma = float(model.gamma)
        self.blocking = [i for i, s in enumerate(model.species) if s.bc is BC.BLOCKING]
        self.dirichlet = [i for i, s in enumerate(model.species) if s.bc is BC.DIRICHLET]
        self.gammas = np.array([s.gamma if s.bc is BC.DIRICHLET else np.nan for s in model.species])
        self.f = model.forcing
        self.noise_modes = model.noise.scaled_modes if model.noise.count else None
        nx, ny = g.shape
        wx = np.full(nx, g.hx)
        wx[[0, -1]] *= 0.5
        wy = np.full(ny, g.hy)
        wy[[0, -1]] *= 0.5
        self.face_len_x = wy  # x-faces (between i and i+1) have length wy[j]
        self.face_len_y = wx
        self.vol = np.outer(wx, wy)
        kx = np.arange(nx)
        ky = np.arange(ny)
        self.neumann_eig = (4.0 / g.hx**2 * np.sin(np.pi * kx / (2 * (nx - 1))) ** 2)[:, None] \
            + (4.0 / g.hy**2 * np.sin(np.pi * ky / (2 * (ny - 1))) ** 2)[None, :]
        self.dirichlet_eig = dirichlet_eigenvalues(g)
        self._eig_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def rho(self, c):
        return np.einsum("i,...ixy->...xy", self.z, c)

    def potential(self, c):
        rho = self.rho(c)
        phi = np.full(rho.shape, self.gamma)
        b = rho[..., 1:-1, 1:-1]
        phi[..., 1:-1, 1:-1] += sfft.idstn(sfft.dstn(b, type=1, axes=(-2, -1)) / self.dirichlet_eig,
                                           type=1, axes=(-2, -1))
        return phi, self.ops.grad(phi)

    def _convective(self, u):
        dxu = self.ops.dx(u)
        dyu = self.ops.dy(u)
        return u[..., 0:1, :, :] * dxu + u[..., 1:2, :, :] * dyu

    def explicit_velocity_drift(self, u, rho, gphi):
        n = -self._convective(u) - rho[..., None, :, :] * gphi + self.f
        return self.space.project(n)

    def eigenpairs(self, n: int):
        if n not in self._eig_cache:
            self._eig_cache[n] = self.space.eigenpairs(n)
        return self._eig_cache[n]

    def modal_coefficients(self, v: np.ndarray, n: int) -> np.ndarray:
        _, modes = self.eigenpairs(n)
        return np.einsum("...cxy,mcxy,xy->...m", v, modes, self.grid.weights)

    def control_norm_sq(self, diff: np.ndarray, n: int) -> np.ndarray:
        beta = self.modal_coefficients(diff, n)
        return np.sum(beta**2, axis=-1)

    def _explicit_concentration(self, u, c, phi):
        """Advective and migration part of the finite-volume update, per unit volume."""
        h = self.grid
        Dz = (self.D * self.z)[:, None, None]
        cfx = 0.5 * (c[..., 1:, :] + c[..., :-1, :])
        cfy = 0.5 * (c[..., :, 1:] + c[..., :, :-1])
        ufx = 0.5 * (u[..., 0, 1:, :] + u[..., 0, :-1, :])[..., None, :, :]
        ufy = 0.5 * (u[..., 1, :, 1:] + u[..., 1, :, :-1])[..., None, :, :]
        dpx = ((phi[..., 1:, :] - phi[..., :-1, :]) / h.hx)[..., None, :, :]
        dpy = ((phi[..., :, 1:] - phi[..., :, :-1]) / h.hy)[..., None, :, :]
        fx = (ufx - Dz * dpx) * cfx * self.face_len_x
        fy = (ufy - Dz * dpy) * cfy * self.face_len_y[:, None]
        net = np.zeros_like(c)
        net[..., :-1, :] += fx
        net[..., 1:, :] -= fx
        net[..., :, :-1] += fy
        net[..., :, 1:] -= fy
        return -net / self.vol

    def advance(self, u, c, dt, dW, control: Control | None = None, charge_source=None):
        model = self.model
        src = c if charge_source is None else charge_source
        phi, gphi = self.potential(src)
        rho = self.rho(src)
        r = u + dt * self.f
        if model.nonlinear:
            r = r - dt * (self._convective(u) + rho[..., None, :, :] * gphi)
        if self.noise_modes is not None and dW is not None:
            r = r + np.einsum("...m,mcxy->...cxy", dW, self.noise_modes)
        u_new = self.space.backward_euler(r, dt)
        if control is not None and control.lam != 0:
            mu, modes = self.eigenpairs(control.n_modes)
            lam = dt * control.lam * _expand(control.active, 1)
            b_unc = self.modal_coefficients(u_new, control.n_modes)
            b_tar = self.modal_coefficients(control.target, control.n_modes)
            b = ((1 + dt * mu) * b_unc + lam * b_tar) / (1 + dt * mu + lam)
            u_new = u_new + np.einsum("...m,mcxy->...cxy", b - b_unc, modes)

        rhs = c.copy()
        if model.nonlinear:
            rhs += dt * self._explicit_concentration(u, c, phi)
        c_new = np.empty_like(c)
        if self.blocking:
            idx = self.blocking
            D = self.D[idx][:, None, None]
            # The cosine transform round trip is slightly biased in the
            # trapezoid mean; transforming only the deviation from the mean
            # (an invariant of the solve) keeps the mean exact.
            block = rhs[..., idx, :, :]
            mean = np.sum(block * self.vol, axis=(-2, -1), keepdims=True) / self.vol.sum()
            ch = sfft.dctn(block - mean, type=1, axes=(-2, -1))
            c_new[..., idx, :, :] = mean + sfft.idctn(ch / (1.0 + dt * D * self.neumann_eig),
                                                      type=1, axes=(-2, -1))
        if self.dirichlet:
            idx = self.dirichlet
            D = self.D[idx][:, None, None]
            gam = self.gammas[idx][:, None, None]
            inner = rhs[..., idx, 1:-1, 1:-1] - gam
            ch = sfft.dstn(inner, type=1, axes=(-2, -1))
            sol = sfft.idstn(ch / (1.0 + dt * D * self.dirichlet_eig), type=1, axes=(-2, -1))
            block = np.broadcast_to(gam, rhs[..., idx, :, :].shape).copy()
            block[..., 1:-1, 1:-1] += sol
            c_new[..., idx, :, :] = block
        return u_new, c_new
