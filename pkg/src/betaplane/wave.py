"""Quasi-periodic traveling waves by Newton iteration on the momentum lattice."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    Forcing,
    ModelParams,
    first_melnikov_check,
    g_lambda,
    linearized_transport_matrix,
)
from .errors import DivergenceError, ResonanceError
from .lattice import (
    TravelingField,
    bracket,
    box_grid,
    coeffs_to_grid,
    dealias_size,
    grid_to_coeffs,
    sobolev_norm,
)


def params_hash(p: ModelParams):
    blob = json.dumps(
        {
            "lam": p.lam,
            "alpha": p.alpha,
            "beta": p.beta,
            "c": p.c,
            "wave_vectors": p.mmap.wave_vectors,
            "omega": p.omega,
            "N_phi": p.N_phi,
            "N_x": p.N_x,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _lattice_symbols(n_phi, mmap):
    j = TravelingField.momenta(n_phi, mmap).astype(float)
    r2 = (j**2).sum(0)
    safe = np.where(r2 == 0, 1.0, r2)
    bs = np.stack([1j * j[1] / safe, -1j * j[0] / safe])
    bs[:, r2 == 0] = 0.0
    return j, bs, 1j * j


def traveling_transport(v: TravelingField, w: TravelingField, n_out=None):
    """Profile of B(v).grad(w) (both traveling), dealiased in theta-space.

    Returns (product, dropped) where ``dropped`` is the H^0 mass of modes
    removed because they fall outside the output lattice truncation.
    """
    n_phi = v.N_phi
    nu = v.nu
    n_out = n_phi if n_out is None else n_out
    m = dealias_size(max(n_phi, n_out)) + n_phi
    _, bs, grad = _lattice_symbols(n_phi, v.mmap)
    axes = tuple(range(1, nu + 1))
    u = coeffs_to_grid(bs * v.profile, m, axes).real
    g = coeffs_to_grid(grad * w.profile, m, axes).real
    prod = u[0] * g[0] + u[1] * g[1]
    full = grid_to_coeffs(prod, 2 * n_phi, tuple(range(nu)))
    out = np.zeros((2 * n_out + 1,) * nu, dtype=complex)
    k = min(n_out, 2 * n_phi)
    src = tuple(slice(2 * n_phi - k, 2 * n_phi + k + 1) for _ in range(nu))
    dst = tuple(slice(n_out - k, n_out + k + 1) for _ in range(nu))
    out[dst] = full[src]
    mask = TravelingField.support_mask(n_out, v.mmap, v.N_x)
    dropped = float(np.sqrt(max(np.sum(np.abs(full) ** 2) - np.sum(np.abs(out[mask]) ** 2), 0.0)))
    out[~mask] = 0.0
    return TravelingField(out, v.mmap, v.N_x, check=False), dropped


def wave_residual(v: TravelingField, p: ModelParams, f: Forcing):
    """lambda omega.d_phi v + B(v).grad v - beta L v - lambda^alpha f."""
    ell = box_grid(v.N_phi, v.nu)
    j = TravelingField.momenta(v.N_phi, v.mmap).astype(float)
    r2 = np.maximum((j**2).sum(0), 1.0)
    lin = 1j * (p.lam * np.tensordot(p.omega_vec, ell, axes=(0, 0)) - p.beta * j[0] / r2)
    nonlin, _ = traveling_transport(v, v)
    forcing = f.traveling_profile().resized(v.N_phi).profile
    return v.with_profile(lin * v.profile + nonlin.profile - p.lam**p.alpha * forcing)


def lattice_jacobian(v: TravelingField, p: ModelParams, index):
    """Jacobian of the wave residual restricted to the lattice modes in ``index``.

    Row/column a is the mode l_a with momentum j_a = -pi^T l_a. The transport
    part couples l_b to l_a through the profile entry at l_a - l_b.
    """
    ell = index.T  # (nu, K)
    n_phi = v.N_phi
    j = -v.mmap.transpose(ell)
    dl = ell[:, :, None] - ell[:, None, :]
    inside = np.all(np.abs(dl) <= n_phi, axis=0)
    vhat = np.zeros(inside.shape, dtype=complex)
    vhat[inside] = v.profile[tuple(dl[k][inside] + n_phi for k in range(v.nu))]
    k = j[:, :, None] - j[:, None, :]
    jp = np.broadcast_to(j[:, None, :], k.shape)
    coupling = linearized_transport_matrix(k, jp) * vhat
    r2 = (j.astype(float) ** 2).sum(0)
    diag = 1j * (p.lam * (p.omega_vec @ ell) - p.beta * j[0] / r2)
    return np.diag(diag) - coupling


@dataclass
class WaveSolution:
    v: TravelingField
    g: TravelingField
    residual_norm: float
    iterations: int
    omega: tuple
    params: ModelParams
    history: list = field(default_factory=list)

    @property
    def z(self):
        return self.v - self.g

    @property
    def params_hash(self):
        return params_hash(self.params)

    def slice_array(self, t):
        """Coefficients of v_lambda(lambda omega t, .)."""
        return self.v.slice(self.params.lam * self.params.omega_vec * t).coeffs


def _odd_real(profile):
    """Project onto coefficients that are purely imaginary and odd in l."""
    im = profile.imag
    return 1j * 0.5 * (im - np.flip(im))


def newton_solve(p: ModelParams, f: Forcing, tol=1e-9, max_iter=8, s=None, v_init=None):
    """Newton iteration from g_lambda; tol is relative to |lambda^alpha f|_s."""
    s = p.s if s is None else s
    first_melnikov_check(p)
    g = g_lambda(f, p, screen=False).resized(p.N_phi, p.N_x)
    mask = TravelingField.support_mask(p.N_phi, p.mmap, p.N_x)
    index = np.argwhere(mask) - p.N_phi
    pos = tuple((index + p.N_phi).T)
    scale = sobolev_norm(f.traveling_profile(), s) * p.lam**p.alpha
    if scale == 0:
        zero = g * 0.0
        return WaveSolution(zero, g, 0.0, 1, p.omega, p, [0.0])
    v = g if v_init is None else v_init
    weights = bracket(box_grid(p.N_phi, p.nu), TravelingField.momenta(p.N_phi, p.mmap)) ** s
    history = []
    for it in range(max_iter + 1):
        res = wave_residual(v, p, f)
        rel = float(np.sqrt(np.sum(np.abs(weights * res.profile) ** 2))) / scale
        history.append(rel)
        if not np.isfinite(rel):
            raise DivergenceError("Newton iterate became non-finite", history=history)
        if rel <= tol:
            return WaveSolution(v, g, rel, it, p.omega, p, history)
        if it == max_iter:
            break
        jac = lattice_jacobian(v, p, index)
        try:
            cond = np.linalg.cond(jac)
            if not np.isfinite(cond) or cond > 1e14:
                raise np.linalg.LinAlgError
            step = np.linalg.solve(jac, -res.profile[pos])
        except np.linalg.LinAlgError:
            raise ResonanceError("Newton Jacobian is singular: near-resonant frequency") from None
        upd = np.zeros_like(v.profile)
        upd[pos] = step
        v = v.with_profile(v.profile + _odd_real(upd))
    raise DivergenceError(f"Newton failed to reach {tol:g} in {max_iter} iterations", history=history)
