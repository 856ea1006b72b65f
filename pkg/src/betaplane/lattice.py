"""Fourier fields on T^2 and T^nu x T^2.

Coefficients are stored densely in boxed arrays. A box of half-width N along
an axis holds the modes -N..N, with mode k at array position k + N.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import PreconditionError, TruncationOverflowError

TWO_PI = 2.0 * np.pi


def mode_range(n):
    return np.arange(-n, n + 1)


def box_grid(n, dims):
    """Integer mode coordinates of a box, shape (dims, 2n+1, ..., 2n+1)."""
    return np.array(np.meshgrid(*([mode_range(n)] * dims), indexing="ij"), dtype=np.int64).reshape(
        (dims,) + (2 * n + 1,) * dims
    )


def bracket(*parts):
    """max{1, |a|, |b|, ...} with Euclidean |.| of each integer vector part."""
    out = 1.0
    for p in parts:
        out = np.maximum(out, np.sqrt(np.sum(np.asarray(p, dtype=float) ** 2, axis=0)))
    return out


def to_fft_layout(coeffs, m, axes):
    """Scatter a centred coefficient box into an FFT-ordered array of size m per axis."""
    coeffs = np.asarray(coeffs)
    shape = list(coeffs.shape)
    index = []
    for ax in range(coeffs.ndim):
        if ax in axes:
            n = (shape[ax] - 1) // 2
            if m < 2 * n + 1:
                raise PreconditionError(f"grid size {m} too small for truncation {n}")
            shape[ax] = m
            index.append(mode_range(n) % m)
        else:
            index.append(np.arange(shape[ax]))
    out = np.zeros(shape, dtype=complex)
    out[np.ix_(*index)] = coeffs
    return out


def from_fft_layout(arr, n, axes):
    index = []
    for ax in range(arr.ndim):
        if ax in axes:
            index.append(mode_range(n) % arr.shape[ax])
        else:
            index.append(np.arange(arr.shape[ax]))
    return arr[np.ix_(*index)]


def coeffs_to_grid(coeffs, m, axes):
    """Values sum_k c_k e^{ik.x} on the uniform grid x = 2 pi i / m."""
    spread = to_fft_layout(coeffs, m, axes)
    scale = float(m) ** len(axes)
    return np.fft.ifftn(spread, axes=axes) * scale


def grid_to_coeffs(values, n, axes):
    m = values.shape[axes[0]]
    spec = np.fft.fftn(values, axes=axes) / float(m) ** len(axes)
    return from_fft_layout(spec, n, axes)


def dealias_size(n):
    """Smallest grid on which products of two N-truncated fields are alias-free up to N."""
    return 3 * n + 1


def conj_reflect(arr, axes=None):
    """c(-k) for a centred box, conjugated: the reality partner of each entry."""
    axes = tuple(range(arr.ndim)) if axes is None else axes
    return np.conj(np.flip(arr, axis=axes))


@dataclass(frozen=True)
class MomentumMap:
    """x -> (jbar_1 . x, ..., jbar_nu . x) and its integer transpose."""

    wave_vectors: tuple

    def __post_init__(self):
        w = np.array(self.wave_vectors, dtype=np.int64).reshape(-1, 2)
        if w.shape[0] < 1:
            raise PreconditionError("need at least one wave vector")
        object.__setattr__(self, "wave_vectors", tuple(tuple(int(a) for a in row) for row in w))

    @classmethod
    def default(cls):
        return cls(((1, 0), (0, 1)))

    @property
    def nu(self):
        return len(self.wave_vectors)

    @property
    def matrix(self):
        return np.array(self.wave_vectors, dtype=np.int64)

    @property
    def span_dim(self):
        return int(np.linalg.matrix_rank(self.matrix.astype(float)))

    @property
    def injective(self):
        """True when pi^T is injective on Z^nu (full row rank)."""
        return self.span_dim == self.nu

    def forward(self, x):
        return self.matrix.astype(float) @ np.asarray(x, dtype=float)

    def transpose(self, ell):
        """pi^T(l) = sum_k l_k jbar_k, vectorised over leading axis of length nu."""
        ell = np.asarray(ell, dtype=np.int64)
        return np.tensordot(self.matrix.T, ell, axes=(1, 0))

    def left_inverse(self):
        """P with P pi^T = Id (requires injectivity)."""
        if not self.injective:
            raise PreconditionError("momentum map is not injective")
        w = self.matrix.astype(float)
        return np.linalg.solve(w @ w.T, w)

    def preimage(self, d):
        """Integer l with pi^T l = d, or None when d is not in the image."""
        p = self.left_inverse()
        ell = np.rint(p @ np.asarray(d, dtype=float)).astype(np.int64)
        if np.array_equal(self.transpose(ell), np.asarray(d, dtype=np.int64)):
            return ell
        return None


class Field2:
    """Real zero-mean field on T^2 with coefficients for |j|_inf <= N."""

    __slots__ = ("coeffs",)

    def __init__(self, coeffs, check=True):
        c = np.array(coeffs, dtype=complex)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] % 2 == 0:
            raise PreconditionError("Field2 coefficients must be a square odd box")
        n = c.shape[0] // 2
        if check and c[n, n] != 0:
            raise PreconditionError("Field2 must have zero mean")
        c[n, n] = 0.0
        c.setflags(write=False)
        self.coeffs = c

    @property
    def N(self):
        return self.coeffs.shape[0] // 2

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((2 * n + 1, 2 * n + 1), dtype=complex))

    @classmethod
    def from_modes(cls, n, modes):
        """Build from {(j1, j2): amplitude}. The caller supplies both reality partners."""
        c = np.zeros((2 * n + 1, 2 * n + 1), dtype=complex)
        for (j1, j2), a in modes.items():
            if max(abs(j1), abs(j2)) > n:
                raise TruncationOverflowError(f"mode {(j1, j2)} outside truncation {n}")
            c[j1 + n, j2 + n] += a
        return cls(c)

    @classmethod
    def from_grid(cls, values, n):
        c = grid_to_coeffs(np.asarray(values), n, (0, 1))
        c[n, n] = 0.0
        return cls(c, check=False)

    @classmethod
    def random(cls, n, rng, decay=2.0, odd=False):
        """Real random field with coefficient envelope <j>^-decay."""
        jj = box_grid(n, 2)
        env = bracket(jj) ** (-decay)
        c = (rng.standard_normal(env.shape) + 1j * rng.standard_normal(env.shape)) * env
        c = 0.5 * (c + conj_reflect(c))
        if odd:
            c = 1j * c.imag
        c[n, n] = 0.0
        return cls(c)

    def to_grid(self, m=None):
        m = dealias_size(self.N) if m is None else m
        return coeffs_to_grid(self.coeffs, m, (0, 1)).real

    def resized(self, n):
        """Zero-pad or truncate to half-width n."""
        out = np.zeros((2 * n + 1, 2 * n + 1), dtype=complex)
        k = min(n, self.N)
        out[n - k : n + k + 1, n - k : n + k + 1] = self.coeffs[self.N - k : self.N + k + 1, self.N - k : self.N + k + 1]
        return Field2(out, check=False)

    def is_real(self, tol=1e-12):
        scale = max(1.0, float(np.abs(self.coeffs).max(initial=0.0)))
        return bool(np.abs(self.coeffs - conj_reflect(self.coeffs)).max(initial=0.0) <= tol * scale)

    def __add__(self, other):
        return Field2(self.coeffs + other.coeffs, check=False)

    def __sub__(self, other):
        return Field2(self.coeffs - other.coeffs, check=False)

    def __neg__(self):
        return Field2(-self.coeffs, check=False)

    def __mul__(self, scalar):
        return Field2(self.coeffs * scalar, check=False)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Field2(N={self.N})"


class QPField:
    """Real field on T^nu x T^2, coefficients over |l|_inf <= N_phi, |j|_inf <= N_x.

    The last two axes of ``coeffs`` are j, the leading nu axes are l.
    """

    __slots__ = ("coeffs", "nu", "zero_average")

    def __init__(self, coeffs, nu, zero_average=True):
        c = np.array(coeffs, dtype=complex)
        if c.ndim != nu + 2:
            raise PreconditionError("QPField coefficient rank must be nu + 2")
        self.nu = nu
        self.zero_average = zero_average
        if zero_average:
            nx = c.shape[-1] // 2
            if np.any(c[..., nx, nx] != 0):
                raise PreconditionError("QPField flagged zero-average has j = 0 coefficients")
        c.setflags(write=False)
        self.coeffs = c

    @property
    def N_phi(self):
        return self.coeffs.shape[0] // 2

    @property
    def N_x(self):
        return self.coeffs.shape[-1] // 2

    @classmethod
    def zeros(cls, nu, n_phi, n_x):
        return cls(np.zeros((2 * n_phi + 1,) * nu + (2 * n_x + 1,) * 2), nu)

    @classmethod
    def from_entries(cls, nu, n_phi, n_x, entries, zero_average=True):
        c = np.zeros((2 * n_phi + 1,) * nu + (2 * n_x + 1,) * 2, dtype=complex)
        for (ell, j), a in entries.items():
            if max(map(abs, ell), default=0) > n_phi or max(map(abs, j)) > n_x:
                raise TruncationOverflowError(f"entry {(ell, j)} outside truncation")
            c[tuple(np.add(ell, n_phi)) + tuple(np.add(j, n_x))] += a
        return cls(c, nu, zero_average)

    def nonzero_entries(self, tol=0.0):
        idx = np.argwhere(np.abs(self.coeffs) > tol)
        for row in idx:
            ell = tuple(int(a) - self.N_phi for a in row[: self.nu])
            j = tuple(int(a) - self.N_x for a in row[self.nu :])
            yield ell, j, self.coeffs[tuple(row)]

    def slice(self, phi):
        """The x-field at fixed phi: sum_l u(l, j) e^{i l.phi}."""
        ell = box_grid(self.N_phi, self.nu)
        phase = np.exp(1j * np.tensordot(np.asarray(phi, dtype=float), ell, axes=(0, 0)))
        c = np.tensordot(phase, self.coeffs, axes=(tuple(range(self.nu)), tuple(range(self.nu))))
        nx = self.N_x
        mean = c[nx, nx]
        c = c.copy()
        c[nx, nx] = 0.0
        return Field2(c, check=False), mean

    def is_real(self, tol=1e-12):
        scale = max(1.0, float(np.abs(self.coeffs).max(initial=0.0)))
        return bool(np.abs(self.coeffs - conj_reflect(self.coeffs)).max(initial=0.0) <= tol * scale)

    def __add__(self, other):
        return QPField(self.coeffs + other.coeffs, self.nu, self.zero_average and other.zero_average)

    def __sub__(self, other):
        return QPField(self.coeffs - other.coeffs, self.nu, self.zero_average and other.zero_average)

    def __mul__(self, scalar):
        return QPField(self.coeffs * scalar, self.nu, self.zero_average)

    __rmul__ = __mul__


class TravelingField:
    """Field u(phi, x) = profile(phi - pi(x)), stored by its torus profile on |l|_inf <= N_phi.

    Coefficient of the profile at l sits at (l, -pi^T l) of the lifted QPField.
    Entries whose momentum falls outside |j|_inf <= N_x, or onto j = 0, must vanish.
    """

    __slots__ = ("profile", "mmap", "N_x")

    def __init__(self, profile, mmap, n_x, check=True):
        p = np.array(profile, dtype=complex)
        if p.ndim != mmap.nu:
            raise PreconditionError("profile rank must equal nu")
        self.mmap = mmap
        self.N_x = int(n_x)
        if check:
            bad = ~self.support_mask(p.shape[0] // 2, mmap, self.N_x)
            if np.any(p[bad] != 0):
                raise TruncationOverflowError("profile has modes outside the momentum lattice truncation")
        p.setflags(write=False)
        self.profile = p

    @staticmethod
    def momenta(n_phi, mmap):
        """-pi^T l for every l in the box, shape (2, box...)."""
        return -mmap.transpose(box_grid(n_phi, mmap.nu))

    @staticmethod
    def support_mask(n_phi, mmap, n_x):
        j = TravelingField.momenta(n_phi, mmap)
        inside = np.max(np.abs(j), axis=0) <= n_x
        nonzero = np.any(j != 0, axis=0)
        return inside & nonzero

    @property
    def N_phi(self):
        return self.profile.shape[0] // 2

    @property
    def nu(self):
        return self.mmap.nu

    @classmethod
    def zeros(cls, mmap, n_phi, n_x):
        return cls(np.zeros((2 * n_phi + 1,) * mmap.nu), mmap, n_x)

    def with_profile(self, profile, check=False):
        return TravelingField(profile, self.mmap, self.N_x, check=check)

    def resized(self, n_phi, n_x=None):
        n_x = self.N_x if n_x is None else n_x
        out = np.zeros((2 * n_phi + 1,) * self.nu, dtype=complex)
        k = min(n_phi, self.N_phi)
        src = tuple(slice(self.N_phi - k, self.N_phi + k + 1) for _ in range(self.nu))
        dst = tuple(slice(n_phi - k, n_phi + k + 1) for _ in range(self.nu))
        out[dst] = self.profile[src]
        out[~self.support_mask(n_phi, self.mmap, n_x)] = 0.0
        return TravelingField(out, self.mmap, n_x, check=False)

    def to_qp(self):
        nu, n_phi, n_x = self.nu, self.N_phi, self.N_x
        c = np.zeros((2 * n_phi + 1,) * nu + (2 * n_x + 1,) * 2, dtype=complex)
        ell = box_grid(n_phi, nu).reshape(nu, -1)
        j = -self.mmap.transpose(ell)
        vals = self.profile.reshape(-1)
        nz = vals != 0
        idx = tuple(ell[k, nz] + n_phi for k in range(nu)) + (j[0, nz] + n_x, j[1, nz] + n_x)
        c[idx] = vals[nz]
        return QPField(c, nu)

    def slice(self, phi):
        """x-field at fixed phi. Coefficient at j sums profile(l) e^{il.phi} over -pi^T l = j."""
        n = self.N_x
        c = np.zeros((2 * n + 1, 2 * n + 1), dtype=complex)
        ell = box_grid(self.N_phi, self.nu).reshape(self.nu, -1)
        j = -self.mmap.transpose(ell)
        vals = self.profile.reshape(-1) * np.exp(1j * (np.asarray(phi, dtype=float) @ ell))
        keep = (np.max(np.abs(j), axis=0) <= n) & (vals != 0)
        np.add.at(c, (j[0, keep] + n, j[1, keep] + n), vals[keep])
        c[n, n] = 0.0
        return Field2(c, check=False)

    def x_gradient(self):
        """Profiles of d/dx1 and d/dx2: coefficient i j_k profile(l) with j = -pi^T l."""
        j = self.momenta(self.N_phi, self.mmap)
        return [self.with_profile(1j * j[k] * self.profile) for k in range(2)]

    def is_real(self, tol=1e-12):
        scale = max(1.0, float(np.abs(self.profile).max(initial=0.0)))
        return bool(np.abs(self.profile - conj_reflect(self.profile)).max(initial=0.0) <= tol * scale)

    def __add__(self, other):
        return self.with_profile(self.profile + other.profile)

    def __sub__(self, other):
        return self.with_profile(self.profile - other.profile)

    def __neg__(self):
        return self.with_profile(-self.profile)

    def __mul__(self, scalar):
        return self.with_profile(self.profile * scalar)

    __rmul__ = __mul__


def momentum_lift(profile, mmap, n_x):
    """Lift a torus profile to a traveling field; overflow beyond N_x is an error."""
    profile = np.asarray(profile, dtype=complex)
    n_phi = profile.shape[0] // 2
    j = TravelingField.momenta(n_phi, mmap)
    over = (np.max(np.abs(j), axis=0) > n_x) & (profile != 0)
    if np.any(over):
        bad = tuple(int(a) - n_phi for a in np.argwhere(over)[0])
        raise TruncationOverflowError(f"mode l={bad} lifts outside |j|_inf <= {n_x}")
    if np.any(np.all(j == 0, axis=0) & (profile != 0)):
        raise PreconditionError("profile carries an x-average (momentum zero) mode")
    return TravelingField(profile, mmap, n_x, check=False)


def restrict(qp, mmap):
    """Read the profile off a QPField supported on the momentum lattice."""
    n_phi, n_x, nu = qp.N_phi, qp.N_x, qp.nu
    ell = box_grid(n_phi, nu).reshape(nu, -1)
    j = -mmap.transpose(ell)
    inside = np.max(np.abs(j), axis=0) <= n_x
    prof = np.zeros(ell.shape[1], dtype=complex)
    idx = tuple(ell[k, inside] + n_phi for k in range(nu)) + (j[0, inside] + n_x, j[1, inside] + n_x)
    prof[inside] = qp.coeffs[idx]
    return TravelingField(prof.reshape((2 * n_phi + 1,) * nu), mmap, n_x)


def sobolev_norm(f, s):
    """(sum <l, j>^{2s} |u(l, j)|^2)^{1/2}; <j> alone for Field2."""
    if s < 0:
        raise PreconditionError("Sobolev index must be nonnegative")
    if isinstance(f, Field2):
        w = bracket(box_grid(f.N, 2)) ** s
        return float(np.sqrt(np.sum(np.abs(w * f.coeffs) ** 2)))
    if isinstance(f, QPField):
        ell = box_grid(f.N_phi, f.nu)
        j = box_grid(f.N_x, 2)
        bl = bracket(ell)[(...,) + (None, None)]
        bj = bracket(j)[(None,) * f.nu]
        w = np.maximum(bl, bj) ** s
        return float(np.sqrt(np.sum(np.abs(w * f.coeffs) ** 2)))
    if isinstance(f, TravelingField):
        ell = box_grid(f.N_phi, f.nu)
        w = bracket(ell, TravelingField.momenta(f.N_phi, f.mmap)) ** s
        return float(np.sqrt(np.sum(np.abs(w * f.profile) ** 2)))
    raise TypeError(f"unsupported field type {type(f).__name__}")


def project_mean(f):
    """(Pi_0 f, Pi_0^perp f): split off the x-average."""
    if isinstance(f, QPField):
        c = np.array(f.coeffs)
        nx = f.N_x
        mean = np.zeros_like(c)
        mean[..., nx, nx] = c[..., nx, nx]
        c[..., nx, nx] = 0.0
        return QPField(mean, f.nu, zero_average=False), QPField(c, f.nu)
    if isinstance(f, Field2):
        return 0.0, f
    c = np.asarray(f, dtype=complex)
    n = c.shape[0] // 2
    mean = c[n, n]
    rest = c.copy()
    rest[n, n] = 0.0
    return mean, rest


def involution_S(f):
    """u(x) -> u(-x)."""
    return Field2(np.flip(f.coeffs, axis=(0, 1)), check=False)


def parity_check(f, kind, tol=1e-10):
    """Coefficientwise u(l, j) = +-u(-l, -j)."""
    sign = {"even": 1.0, "odd": -1.0}[kind]
    c = f.profile if isinstance(f, TravelingField) else f.coeffs
    scale = max(1.0, float(np.abs(c).max(initial=0.0)))
    return bool(np.abs(c - sign * np.flip(c)).max(initial=0.0) <= tol * scale)


def lambda_power(f, s):
    """Lambda^s: multiply the coefficient at j by <j>^s."""
    return Field2(f.coeffs * bracket(box_grid(f.N, 2)) ** s, check=False)


def evaluate(f, phi, x):
    """Point value by direct summation."""
    x = np.asarray(x, dtype=float)
    if isinstance(f, Field2):
        j = box_grid(f.N, 2)
        return float(np.real(np.sum(f.coeffs * np.exp(1j * np.tensordot(x, j, axes=(0, 0))))))
    phi = np.asarray(phi, dtype=float)
    if isinstance(f, TravelingField):
        ell = box_grid(f.N_phi, f.nu)
        arg = np.tensordot(phi - f.mmap.forward(x), ell, axes=(0, 0))
        return float(np.real(np.sum(f.profile * np.exp(1j * arg))))
    if isinstance(f, QPField):
        g, mean = f.slice(phi)
        return evaluate(g, None, x) + float(np.real(mean))
    raise TypeError(f"unsupported field type {type(f).__name__}")


def qp_to_grid(f, m_phi, m_x):
    axes = tuple(range(f.nu + 2))
    spread = to_fft_layout(f.coeffs, m_phi, axes[: f.nu])
    spread = to_fft_layout(spread, m_x, axes[f.nu :])
    return np.fft.ifftn(spread, axes=axes).real * float(m_phi) ** f.nu * float(m_x) ** 2


def field_l2_pairing(u, v):
    """(2 pi)^-2 int u v dx for real fields, via coefficients."""
    return float(np.real(np.sum(u.coeffs * np.conj(v.coeffs))))


def iter_box(n, dims):
    return product(range(-n, n + 1), repeat=dims)
