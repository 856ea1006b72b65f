"""The forced beta-plane vector field and its time integrator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DivergenceError, PreconditionError, ResonanceError
from .lattice import (
    Field2,
    MomentumMap,
    QPField,
    TravelingField,
    bracket,
    box_grid,
    coeffs_to_grid,
    dealias_size,
    grid_to_coeffs,
    restrict,
)


@dataclass(frozen=True)
class ModelParams:
    lam: float
    alpha: float = 1.5
    beta: float = 1.0
    c: float = 0.1
    mmap: MomentumMap = field(default_factory=MomentumMap.default)
    omega: tuple = (1.44, 1.44 * (2**0.5 - 0.53))
    N_phi: int = 8
    N_x: int = 8
    s: float = 3.0
    N0: float = 4.0
    check_annulus: bool = True

    def __post_init__(self):
        object.__setattr__(self, "omega", tuple(float(w) for w in self.omega))
        if len(self.omega) != self.mmap.nu:
            raise PreconditionError("omega must have nu components")
        if not 1.0 < self.alpha < 2.0:
            raise PreconditionError("alpha must lie in (1, 2)")
        if self.beta == 0:
            raise PreconditionError("beta must be nonzero")
        if not 0.0 < self.c < (2.0 - self.alpha) / 3.0:
            raise PreconditionError(f"c must lie in (0, {(2 - self.alpha) / 3:.6g})")
        if self.lam <= 1.0:
            raise PreconditionError("lambda must exceed 1")
        r = float(np.linalg.norm(self.omega))
        if self.check_annulus and not 1.0 <= r <= 2.0:
            raise PreconditionError(f"|omega| = {r:.6g} outside the annulus [1, 2]")

    @property
    def nu(self):
        return self.mmap.nu

    @property
    def omega_vec(self):
        return np.array(self.omega)

    @property
    def theta(self):
        return self.alpha - 1.0 + self.c

    @property
    def gamma(self):
        return self.lam ** (-self.c)

    @property
    def tau(self):
        return self.nu + 4

    @property
    def eps(self):
        return self.lam ** (self.theta - 1.0)

    @property
    def eta(self):
        return 1.0 - self.theta - self.c

    @property
    def zeta(self):
        return 2.0 - self.alpha - 3.0 * self.c

    @property
    def M(self):
        """Number of order-reduction levels: max{2 tau, (1-c)/(2(1-c)-alpha)} + 1, rounded up."""
        bound = (1.0 - self.c) / (2.0 * (1.0 - self.c) - self.alpha)
        return int(math.floor(max(2 * self.tau, bound))) + 1

    @property
    def eps_M(self):
        return self.lam ** (self.M * (self.theta - 1.0) + 1.0)

    def replace(self, **kw):
        from dataclasses import replace

        return replace(self, **kw)


# ---------------------------------------------------------------- symbols


def dispersion_symbol(j):
    j1, j2 = int(j[0]), int(j[1])
    if j1 == 0 and j2 == 0:
        raise PreconditionError("dispersion symbol undefined at j = 0")
    return j1 / (j1 * j1 + j2 * j2)


@lru_cache(maxsize=64)
def _symbols(n):
    j = box_grid(n, 2).astype(float)
    r2 = j[0] ** 2 + j[1] ** 2
    r2[n, n] = 1.0
    disp = j[0] / r2
    disp[n, n] = 0.0
    bs = np.stack([1j * j[1] / r2, -1j * j[0] / r2])
    bs[:, n, n] = 0.0
    grad = 1j * j
    for a in (disp, bs, grad):
        a.setflags(write=False)
    return disp, bs, grad


def dispersion_array(n, beta):
    """i beta L(j) over the box."""
    return 1j * beta * _symbols(n)[0]


def apply_L(v, beta):
    return Field2(v.coeffs * dispersion_array(v.N, beta), check=False)


def biot_savart(v):
    """Velocity coefficients i(j2, -j1)/|j|^2 v(j), returned as two Field2."""
    bs = _symbols(v.N)[1]
    return Field2(bs[0] * v.coeffs, check=False), Field2(bs[1] * v.coeffs, check=False)


def transport_array(w1, w2, n, m=None):
    """Coefficients of -B(w1).grad(w2) for coefficient boxes of half-width n.

    Pseudo-spectral on an alias-free grid; the result is truncated back to n and
    its mean is set to zero.
    """
    m = dealias_size(n) if m is None else m
    _, bs, grad = _symbols(n)
    u = coeffs_to_grid(bs * w1, m, (1, 2)).real
    g = coeffs_to_grid(grad * w2, m, (1, 2)).real
    out = grid_to_coeffs(-(u[0] * g[0] + u[1] * g[1]), n, (0, 1))
    out[n, n] = 0.0
    return out


def transport_nonlinearity(w1, w2):
    """N[w1, w2] = -B(w1).grad(w2)."""
    n = max(w1.N, w2.N)
    return Field2(transport_array(w1.resized(n).coeffs, w2.resized(n).coeffs, n), check=False)


def linearized_transport_entry(k, jp, vhat):
    """Entry of h -> -B(v).grad h - B(h).grad v coupling h at j' to output at j = j' + k."""
    k1, k2 = k
    j1, j2 = jp
    kk = k1 * k1 + k2 * k2
    jj = j1 * j1 + j2 * j2
    return (k2 * j1 - k1 * j2) * (1.0 / kk - 1.0 / jj) * vhat


def linearized_transport_matrix(k, jp):
    """Vectorised coefficient (k2 j1' - k1 j2')(1/|k|^2 - 1/|j'|^2), zero where k = 0."""
    k = np.asarray(k, dtype=float)
    jp = np.asarray(jp, dtype=float)
    kk = k[0] ** 2 + k[1] ** 2
    jj = jp[0] ** 2 + jp[1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (k[1] * jp[0] - k[0] * jp[1]) * (1.0 / kk - 1.0 / jj)
    out[kk == 0] = 0.0
    return out


# ---------------------------------------------------------------- forcing


class Forcing:
    """Even, zero-x-average quasi-periodic forcing, stored as a QPField (unscaled)."""

    def __init__(self, qp: QPField, mmap: MomentumMap):
        self.qp = qp
        self.mmap = mmap
        nx = qp.N_x
        if np.any(qp.coeffs[..., nx, nx] != 0):
            raise PreconditionError("forcing must have zero x-average")
        c = qp.coeffs
        if np.abs(c - np.flip(c)).max(initial=0.0) > 1e-14 * max(1.0, np.abs(c).max(initial=0.0)):
            raise PreconditionError("forcing must be even in (phi, x)")
        if not qp.is_real():
            raise PreconditionError("forcing must be real")
        self._entries = list(qp.nonzero_entries())

    @classmethod
    def from_triples(cls, triples, mmap, n_phi, n_x):
        """Sum of a cos(l.phi + j.x) over (l, j, a) triples.

        A fourth element 'sin' requests a sine term, which breaks evenness and is rejected.
        """
        entries = {}
        for t in triples:
            ell, j, a = tuple(t[0]), tuple(t[1]), float(t[2])
            kind = t[3] if len(t) > 3 else "cos"
            if kind != "cos":
                raise PreconditionError("sine forcing terms are odd in (phi, x)")
            if tuple(j) == (0, 0):
                raise PreconditionError("forcing term with j = 0 has nonzero x-average")
            neg = (tuple(-x for x in ell), tuple(-x for x in j))
            entries[(ell, j)] = entries.get((ell, j), 0.0) + a / 2
            entries[neg] = entries.get(neg, 0.0) + a / 2
        qp = QPField.from_entries(mmap.nu, n_phi, n_x, entries, zero_average=False)
        return cls(QPField(qp.coeffs, mmap.nu, zero_average=True), mmap)

    @classmethod
    def default(cls, mmap, n_phi, n_x):
        """2cos(phi1 - x1) + 2cos(phi2 - x2) + 2cos(phi1 + phi2 - x1 - x2) for the standard map."""
        nu = mmap.nu
        triples = []
        for k in range(nu):
            ell = [0] * nu
            ell[k] = 1
            triples.append((ell, tuple(-mmap.transpose(np.array(ell))), 2.0))
        if nu >= 2:
            ell = [1, 1] + [0] * (nu - 2)
            triples.append((ell, tuple(-mmap.transpose(np.array(ell))), 2.0))
        return cls.from_triples(triples, mmap, n_phi, n_x)

    @classmethod
    def zero(cls, mmap, n_phi, n_x):
        return cls(QPField.zeros(mmap.nu, n_phi, n_x), mmap)

    @property
    def is_zero(self):
        return not self._entries

    def traveling_profile(self):
        """Profile on the momentum lattice; raises when f is not a traveling wave."""
        trav = restrict(self.qp, self.mmap)
        if np.abs(trav.to_qp().coeffs - self.qp.coeffs).max(initial=0.0) > 0:
            raise PreconditionError("forcing is not supported on the momentum lattice")
        return trav

    def slice_array(self, phi, n):
        """Coefficients of f(phi, .) on the box of half-width n."""
        out = np.zeros((2 * n + 1, 2 * n + 1), dtype=complex)
        for ell, j, a in self._entries:
            if max(abs(j[0]), abs(j[1])) <= n:
                out[j[0] + n, j[1] + n] += a * np.exp(1j * np.dot(ell, phi))
        return out

    def slice(self, phi, n):
        return Field2(self.slice_array(phi, n), check=False)


# ---------------------------------------------------------------- vector field


def full_vector_field(t, v, p: ModelParams, f: Forcing):
    """beta L v - B(v).grad v + lambda^alpha f(lambda omega t, .)."""
    n = v.N
    c = v.coeffs * dispersion_array(n, p.beta) + transport_array(v.coeffs, v.coeffs, n)
    c = c + p.lam**p.alpha * f.slice_array(p.lam * p.omega_vec * t, n)
    return Field2(c, check=False)


def first_melnikov_check(p: ModelParams, n_phi=None):
    """Smallest scaled first-Melnikov divisor over the traveling lattice; raises on violation."""
    n_phi = p.N_phi if n_phi is None else n_phi
    ell = box_grid(n_phi, p.nu)
    j = TravelingField.momenta(n_phi, p.mmap)
    mask = TravelingField.support_mask(n_phi, p.mmap, p.N_x)
    r2 = np.maximum((j.astype(float) ** 2).sum(0), 1.0)
    div = np.abs(p.lam * np.tensordot(p.omega_vec, ell, axes=(0, 0)) - p.beta * j[0] / r2)
    bound = p.lam * p.gamma * bracket(ell) ** (-p.tau)
    ratio = np.where(mask, div / bound, np.inf)
    worst = np.unravel_index(np.argmin(ratio), ratio.shape)
    if ratio[worst] < 1.0:
        l_bad = tuple(int(a) - n_phi for a in worst)
        raise ResonanceError(
            f"first Melnikov divisor {div[worst]:.3e} below {bound[worst]:.3e} at l={l_bad}",
            index=(l_bad, tuple(int(x) for x in j[(slice(None),) + worst])),
            divisor=float(div[worst]),
        )
    return float(np.min(np.where(mask, div, np.inf)))


def g_lambda(f: Forcing, p: ModelParams, screen=True):
    """lambda^alpha f / (i(lambda omega.l - beta L(j))) on the momentum lattice."""
    if screen:
        first_melnikov_check(p, f.qp.N_phi)
    trav = f.traveling_profile()
    ell = box_grid(trav.N_phi, p.nu)
    j = TravelingField.momenta(trav.N_phi, p.mmap)
    r2 = np.maximum((j.astype(float) ** 2).sum(0), 1.0)
    div = 1j * (p.lam * np.tensordot(p.omega_vec, ell, axes=(0, 0)) - p.beta * j[0] / r2)
    prof = np.zeros_like(trav.profile)
    nz = trav.profile != 0
    prof[nz] = p.lam**p.alpha * trav.profile[nz] / div[nz]
    return trav.with_profile(prof)


# ---------------------------------------------------------------- ETDRK4


class ETDRK4:
    """Fourth-order exponential time differencing for u' = c u + F(t, u), c diagonal.

    phi-function coefficients by contour averaging over 32 points on a unit circle
    around each h c.
    """

    def __init__(self, c, h, n_contour=32):
        c = np.asarray(c, dtype=complex)
        self.h = float(h)
        z = h * c
        r = np.exp(1j * np.pi * (np.arange(1, n_contour + 1) - 0.5) / n_contour)
        zr = z[..., None] + r
        self.E = np.exp(z)
        self.E2 = np.exp(z / 2)
        ez = np.exp(zr)
        self.Q = h * np.mean((np.exp(zr / 2) - 1) / zr, axis=-1)
        self.f1 = h * np.mean((-4 - zr + ez * (4 - 3 * zr + zr**2)) / zr**3, axis=-1)
        self.f2 = h * np.mean((2 + zr + ez * (zr - 2)) / zr**3, axis=-1)
        self.f3 = h * np.mean((-4 - 3 * zr - zr**2 + ez * (4 - zr)) / zr**3, axis=-1)
        # contour means of real-analytic functions: real c gives real coefficients
        if np.all(np.isreal(c)):
            for name in ("Q", "f1", "f2", "f3"):
                setattr(self, name, getattr(self, name).real)

    def step(self, t, u, rhs):
        h = self.h
        nu = rhs(t, u)
        a = self.E2 * u + self.Q * nu
        na = rhs(t + h / 2, a)
        b = self.E2 * u + self.Q * na
        nb = rhs(t + h / 2, b)
        c = self.E2 * a + self.Q * (2 * nb - nu)
        nc = rhs(t + h, c)
        return self.E * u + self.f1 * nu + 2 * self.f2 * (na + nb) + self.f3 * nc


@dataclass
class Trajectory:
    times: np.ndarray
    states: list
    last_time: float = 0.0
    diverged: bool = False

    def __len__(self):
        return len(self.times)


def _sup_velocity(v_coeffs, n):
    _, bs, _ = _symbols(n)
    u = coeffs_to_grid(bs * v_coeffs, dealias_size(n), (1, 2)).real
    return float(np.sqrt((u**2).sum(0)).max())


def run_etdrk4(u0, t0, t1, dt, c, rhs, sample_every=1, ceiling=None, norm=None):
    """Generic driver. Returns a Trajectory of coefficient arrays at sampled steps."""
    if dt <= 0:
        raise PreconditionError("dt must be positive")
    n_steps = max(1, int(round((t1 - t0) / dt)))
    h = (t1 - t0) / n_steps
    scheme = ETDRK4(c, h)
    u = np.array(u0, dtype=complex)
    times, states = [t0], [u.copy()]
    norm = norm or (lambda x: float(np.sqrt(np.sum(np.abs(x) ** 2))))
    for k in range(1, n_steps + 1):
        t = t0 + (k - 1) * h
        u = scheme.step(t, u, rhs)
        if ceiling is not None or not np.all(np.isfinite(u)):
            val = norm(u)
            if not np.isfinite(val) or (ceiling is not None and val > ceiling):
                raise DivergenceError(f"norm {val:.3e} exceeded ceiling at t={t + h:.6g}", last_time=times[-1])
        if k % sample_every == 0 or k == n_steps:
            times.append(t0 + k * h)
            states.append(u.copy())
    return Trajectory(np.array(times), states, last_time=t1)


def integrate(v0, t_span, p: ModelParams, f: Forcing, dt, sample_every=1, ceiling=1e8):
    """Pseudo-spectral ETDRK4 for the forced equation with the beta L part exact."""
    n = v0.N
    if dt * _sup_velocity(v0.coeffs, n) * n > 1.0:
        raise PreconditionError("time step violates dt * |B(v)|_inf * N_x <= 1")
    disp = dispersion_array(n, p.beta)
    amp = p.lam**p.alpha
    lw = p.lam * p.omega_vec

    def rhs(t, u):
        return transport_array(u, u, n) + amp * f.slice_array(lw * t, n)

    traj = run_etdrk4(v0.coeffs, t_span[0], t_span[1], dt, disp, rhs, sample_every, ceiling)
    traj.states = [Field2(_realify(s), check=False) for s in traj.states]
    return traj


def _realify(c):
    """Project onto the real, zero-mean subspace (removes rounding drift)."""
    n = c.shape[0] // 2
    out = 0.5 * (c + np.conj(np.flip(c)))
    out[n, n] = 0.0
    return out


def traveling_slice_array(v: TravelingField, phi):
    return v.slice(phi).coeffs
