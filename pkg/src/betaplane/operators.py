"""Matrix calculus for phi-dependent linear operators on zero-mean fields.

An operator R(phi) acts on h(x) = sum_j h_j e^{ij.x} through its Fourier
matrix entries R(l)_j^{j'}: (R(phi) h)_j = sum_{l, j'} R(l)_j^{j'} e^{il.phi} h_{j'}.

``QPOperator`` stores the entries sparsely per l-block and is the general
(reference) representation. ``MomentumOperator`` is the dense fast path for
momentum-preserving operators when pi^T is injective: there each (j, j') pair
determines l, so the whole operator is one J x J matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import PreconditionError, SmallnessError
from .lattice import Field2, MomentumMap, bracket, coeffs_to_grid, from_fft_layout, iter_box, qp_to_grid

PRUNE = 1e-16
SERIES_TOL = 1e-15
NEUMANN_RATIO = 0.5


class ModeBasis:
    """Nonzero modes |j|_inf <= N in lexicographic order."""

    def __init__(self, n):
        self.N = n
        jj = np.array([(a, b) for a in range(-n, n + 1) for b in range(-n, n + 1) if (a, b) != (0, 0)], dtype=np.int64)
        self.modes = jj
        self.index = {tuple(m): k for k, m in enumerate(jj)}
        self.neg = np.array([self.index[(-a, -b)] for a, b in jj])
        self.bracket = bracket(jj.T)
        self.pos = (jj[:, 0] + n, jj[:, 1] + n)

    def __len__(self):
        return len(self.modes)

    def vector(self, f: Field2):
        return f.resized(self.N).coeffs[self.pos]

    def field(self, vec):
        n = self.N
        c = np.zeros((2 * n + 1, 2 * n + 1), dtype=complex)
        c[self.pos] = vec
        return Field2(c, check=False)


@lru_cache(maxsize=32)
def mode_basis(n):
    return ModeBasis(n)


def _prune(mat):
    mat = sp.csr_matrix(mat)
    if mat.nnz:
        cut = PRUNE * np.abs(mat.data).max()
        mat.data[np.abs(mat.data) <= cut] = 0.0
        mat.eliminate_zeros()
    return mat


class QPOperator:
    """Sparse operator with l-blocks keyed by integer tuples."""

    def __init__(self, blocks, nu, n_phi, n_x, flags=None):
        self.nu = nu
        self.N_phi = n_phi
        self.N_x = n_x
        self.basis = mode_basis(n_x)
        self.blocks = {}
        for ell, b in blocks.items():
            ell = tuple(int(a) for a in ell)
            if max(map(abs, ell), default=0) > n_phi:
                continue
            b = _prune(b)
            if b.nnz:
                self.blocks[ell] = b
        self.flags = dict(flags or {})

    # construction ---------------------------------------------------------
    @classmethod
    def zero(cls, nu, n_phi, n_x):
        return cls({}, nu, n_phi, n_x)

    @classmethod
    def identity(cls, nu, n_phi, n_x):
        J = len(mode_basis(n_x))
        return cls({(0,) * nu: sp.identity(J, dtype=complex, format="csr")}, nu, n_phi, n_x)

    @classmethod
    def from_entries(cls, entries, nu, n_phi, n_x):
        """entries: iterable of (l, j, j', value)."""
        basis = mode_basis(n_x)
        J = len(basis)
        rows = {}
        for ell, j, jp, val in entries:
            rows.setdefault(tuple(ell), []).append((basis.index[tuple(j)], basis.index[tuple(jp)], val))
        blocks = {}
        for ell, lst in rows.items():
            r, c, v = zip(*lst)
            blocks[ell] = sp.coo_matrix((np.array(v, dtype=complex), (r, c)), shape=(J, J)).tocsr()
        return cls(blocks, nu, n_phi, n_x)

    @classmethod
    def diagonal(cls, mu, nu, n_phi, n_x):
        return cls({(0,) * nu: sp.diags(np.asarray(mu, dtype=complex), format="csr")}, nu, n_phi, n_x)

    @classmethod
    def random(cls, rng, nu, n_phi, n_x, density=0.05, scale=1.0, ell_max=None):
        ell_max = n_phi if ell_max is None else ell_max
        J = len(mode_basis(n_x))
        blocks = {}
        for ell in iter_box(ell_max, nu):
            m = sp.random(J, J, density=density, random_state=rng, format="csr", dtype=float)
            m = m.astype(complex)
            m.data = scale * (rng.standard_normal(m.nnz) + 1j * rng.standard_normal(m.nnz))
            blocks[ell] = m
        return cls(blocks, nu, n_phi, n_x)

    def entries(self):
        """Sorted (l, j, j', value) list."""
        out = []
        modes = self.basis.modes
        for ell in sorted(self.blocks):
            coo = self.blocks[ell].tocoo()
            for r, c, v in zip(coo.row, coo.col, coo.data):
                out.append((ell, tuple(modes[r]), tuple(modes[c]), complex(v)))
        out.sort(key=lambda e: (e[0], e[1], e[2]))
        return out

    def block(self, ell):
        b = self.blocks.get(tuple(ell))
        J = len(self.basis)
        return sp.csr_matrix((J, J), dtype=complex) if b is None else b

    def dense_blocks(self):
        return {ell: b.toarray() for ell, b in self.blocks.items()}

    # linear structure ---------------------------------------------------
    def _like(self, blocks, flags=None):
        return QPOperator(blocks, self.nu, self.N_phi, self.N_x, flags)

    def __add__(self, other):
        blocks = dict(self.blocks)
        for ell, b in other.blocks.items():
            blocks[ell] = blocks[ell] + b if ell in blocks else b
        return self._like(blocks)

    def __neg__(self):
        return self._like({ell: -b for ell, b in self.blocks.items()})

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, scalar):
        return self._like({ell: scalar * b for ell, b in self.blocks.items()})

    __rmul__ = __mul__

    def max_abs(self):
        return max((float(np.abs(b.data).max()) for b in self.blocks.values() if b.nnz), default=0.0)

    # calculus -------------------------------------------------------------
    def compose(self, other):
        """(RQ)(l) = sum_{l'} R(l - l') Q(l'), truncated to |l|_inf <= N_phi."""
        out = {}
        n = self.N_phi
        for l1, a in self.blocks.items():
            for l2, b in other.blocks.items():
                ell = tuple(x + y for x, y in zip(l1, l2))
                if max(map(abs, ell), default=0) > n:
                    continue
                prod = a @ b
                out[ell] = out[ell] + prod if ell in out else prod
        return self._like(out)

    __matmul__ = compose

    def exp(self, threshold=1.0):
        size = self.decay_norm(0, 0)
        if size > threshold:
            raise SmallnessError(f"exp refused: |R|_(0,0) = {size:.3e} > {threshold:g}", measured=size)
        ident = QPOperator.identity(self.nu, self.N_phi, self.N_x)
        total, term = ident, ident
        for k in range(1, 200):
            term = (term @ self) * (1.0 / k)
            total = total + term
            if term.max_abs() <= SERIES_TOL * max(total.max_abs(), 1.0):
                break
        return total

    def omega_derivative(self, lam_omega):
        """lambda omega . d_phi: the l-block is scaled by i lambda omega.l."""
        w = np.asarray(lam_omega, dtype=float)
        return self._like({ell: (1j * float(np.dot(w, ell))) * b for ell, b in self.blocks.items()})

    def decay_norm(self, m, s):
        """sup_{j'} (sum_{l, j} <l, j - j'>^{2s} |R(l)_j^{j'}|^2)^{1/2} <j'>^{-m}."""
        modes = self.basis.modes
        col = np.zeros(len(self.basis))
        for ell, b in self.blocks.items():
            coo = b.tocoo()
            if not coo.nnz:
                continue
            d = modes[coo.row] - modes[coo.col]
            w = bracket(np.asarray(ell, dtype=float)[:, None] * np.ones(coo.nnz), d.T) ** (2 * s)
            np.add.at(col, coo.col, w * np.abs(coo.data) ** 2)
        return float(np.max(np.sqrt(col) * self.basis.bracket ** (-m), initial=0.0))

    def project_N(self, n):
        """(Pi_N R, Pi_N^perp R): keep |l| <= N and |j - j'| <= N (Euclidean)."""
        modes = self.basis.modes
        low, high = {}, {}
        for ell, b in self.blocks.items():
            coo = b.tocoo()
            d = np.sqrt(((modes[coo.row] - modes[coo.col]) ** 2).sum(1))
            keep = (np.sqrt(np.dot(ell, ell)) <= n) & (d <= n)
            J = len(self.basis)
            low[ell] = sp.coo_matrix((coo.data * keep, (coo.row, coo.col)), shape=(J, J))
            high[ell] = sp.coo_matrix((coo.data * ~keep, (coo.row, coo.col)), shape=(J, J))
        return self._like(low), self._like(high)

    def diagonal_part(self):
        """Entries at (l = 0, j = j). Reports off-diagonal l = 0 mass."""
        b = self.block((0,) * self.nu)
        mu = b.diagonal().copy()
        off = b - sp.diags(mu)
        return DiagonalOperator(mu, self.N_x, off_diagonal_mass=float(np.abs(off.data).max(initial=0.0)))

    def at(self, phi):
        """Dense J x J matrix R(phi)."""
        J = len(self.basis)
        out = np.zeros((J, J), dtype=complex)
        phi = np.asarray(phi, dtype=float)
        for ell, b in self.blocks.items():
            out += np.exp(1j * np.dot(ell, phi)) * b.toarray()
        return out

    def apply(self, phi, v: Field2):
        vec = self.basis.vector(v)
        phi = np.asarray(phi, dtype=float)
        out = np.zeros(len(self.basis), dtype=complex)
        for ell, b in self.blocks.items():
            out += np.exp(1j * np.dot(ell, phi)) * (b @ vec)
        return self.basis.field(out)

    # symmetries -----------------------------------------------------------
    def _partner(self, ell):
        b = self.block(tuple(-x for x in ell))
        neg = self.basis.neg
        return b[neg][:, neg]

    def _check(self, kind, tol):
        scale = max(self.max_abs(), 1e-300)
        ells = set(self.blocks) | {tuple(-x for x in e) for e in self.blocks}
        for ell in ells:
            a, p = self.block(ell), self._partner(ell)
            if kind == "real":
                d = a - p.conj()
            elif kind == "reversible":
                d = a + p
            else:
                d = a - p
            if d.nnz and np.abs(d.data).max() > tol * scale:
                return False
        return True

    def is_real(self, tol=1e-10):
        return self._check("real", tol)

    def is_reversible(self, tol=1e-10):
        return self._check("reversible", tol)

    def is_reversibility_preserving(self, tol=1e-10):
        return self._check("preserving", tol)

    def is_momentum_preserving(self, mmap: MomentumMap, tol=1e-10):
        modes = self.basis.modes
        scale = max(self.max_abs(), 1e-300)
        for ell, b in self.blocks.items():
            coo = b.tocoo()
            d = mmap.transpose(np.array(ell)) [:, None] + (modes[coo.row] - modes[coo.col]).T
            bad = np.any(d != 0, axis=0) & (np.abs(coo.data) > tol * scale)
            if np.any(bad):
                return False
        return True

    def verify_flags(self, mmap=None):
        checks = {
            "real": self.is_real,
            "reversible": self.is_reversible,
            "reversibility_preserving": self.is_reversibility_preserving,
        }
        if mmap is not None:
            checks["momentum_preserving"] = lambda: self.is_momentum_preserving(mmap)
        result = {}
        for name, fn in checks.items():
            if self.flags.get(name) == "asserted":
                result[name] = fn()
        return result


@dataclass
class DiagonalOperator:
    mu: np.ndarray
    N_x: int
    off_diagonal_mass: float = 0.0

    @property
    def basis(self):
        return mode_basis(self.N_x)

    def as_dict(self):
        return {tuple(m): complex(v) for m, v in zip(self.basis.modes, self.mu)}

    def to_qp(self, nu, n_phi):
        return QPOperator.diagonal(self.mu, nu, n_phi, self.N_x)


def qp_inverse(phi_op: QPOperator, guard=NEUMANN_RATIO):
    """Neumann series for Phi^{-1} = sum (Id - Phi)^k with ratio guard."""
    ident = QPOperator.identity(phi_op.nu, phi_op.N_phi, phi_op.N_x)
    k = ident - phi_op
    ratio = k.decay_norm(0, 0)
    if ratio > guard:
        raise SmallnessError(f"Neumann series refused: |Id - Phi| = {ratio:.3e} > {guard}", measured=ratio)
    total, term = ident, ident
    for _ in range(500):
        term = term @ k
        total = total + term
        if term.max_abs() <= SERIES_TOL * total.max_abs():
            break
    return total


def pushforward(phi_op, g_op, lam_omega, phi_inv=None):
    """Phi^{-1} G Phi - Phi^{-1} (lambda omega . d_phi Phi)."""
    if phi_inv is None:
        phi_inv = phi_op.inverse() if isinstance(phi_op, MomentumOperator) else qp_inverse(phi_op)
    return phi_inv @ (g_op @ phi_op) - phi_inv @ phi_op.omega_derivative(lam_omega)


def lip_decay_norm(op_a, m, s, gamma=None, op_b=None, omega_a=None, omega_b=None):
    """|R|^{Lip(gamma)}_{m,s} from a two-point probe.

    With only ``op_a`` this is the plain decay norm. Given the operator at a
    second frequency it adds gamma |R(omega_a) - R(omega_b)|_{m,s} / |omega_a - omega_b|.
    """
    base = op_a.decay_norm(m, s)
    if op_b is None:
        return base
    if gamma is None or omega_a is None or omega_b is None:
        raise PreconditionError("two-point Lipschitz probe needs gamma and both frequencies")
    gap = float(np.linalg.norm(np.asarray(omega_a, float) - np.asarray(omega_b, float)))
    if gap == 0:
        raise PreconditionError("the two frequencies coincide")
    return max(base, op_b.decay_norm(m, s)) + gamma * (op_a - op_b).decay_norm(m, s) / gap


DUMP_HEADER_J = ("j1", "j2", "jp1", "jp2", "re", "im")


def write_operator_dump(op, path):
    """Record stream (l_1..l_nu, j1, j2, j1', j2', re, im), sorted lexicographically."""
    import csv
    from pathlib import Path

    if isinstance(op, MomentumOperator):
        op = op.to_qp()
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"l{k + 1}" for k in range(op.nu)] + list(DUMP_HEADER_J))
        for ell, j, jp, val in op.entries():
            w.writerow([*ell, *j, *jp, repr(val.real), repr(val.imag)])
    return path


def read_operator_dump(path, n_phi, n_x):
    import csv
    from pathlib import Path

    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    nu = len(rows[0]) - len(DUMP_HEADER_J)
    entries = []
    for r in rows[1:]:
        ints = [int(x) for x in r[: nu + 4]]
        entries.append((tuple(ints[:nu]), tuple(ints[nu : nu + 2]), tuple(ints[nu + 2 :]), complex(float(r[-2]), float(r[-1]))))
    return QPOperator.from_entries(entries, nu, n_phi, n_x)


# --------------------------------------------------------------------------- momentum fast path


class MomentumOperator:
    """Momentum-preserving operator as one J x J matrix C with C[a, b] = R(l_ab)_{j_a}^{j_b}.

    l_ab is the unique l with pi^T l = j_b - j_a; pairs without such an l carry zeros.
    """

    __slots__ = ("C", "mmap", "N_x", "basis", "_geom", "flags")

    def __init__(self, C, mmap: MomentumMap, n_x, flags=None, check=True):
        self.mmap = mmap
        self.N_x = n_x
        self.basis = mode_basis(n_x)
        self._geom = momentum_geometry(mmap, n_x)
        C = np.asarray(C, dtype=complex)
        if check and np.any(C[~self._geom.valid] != 0):
            raise PreconditionError("matrix has entries violating the momentum constraint")
        self.C = C
        self.flags = dict(flags or {})

    @property
    def nu(self):
        return self.mmap.nu

    @property
    def ell(self):
        return self._geom.ell

    @classmethod
    def identity(cls, mmap, n_x):
        return cls(np.eye(len(mode_basis(n_x)), dtype=complex), mmap, n_x)

    @classmethod
    def zero(cls, mmap, n_x):
        J = len(mode_basis(n_x))
        return cls(np.zeros((J, J), dtype=complex), mmap, n_x)

    @classmethod
    def diagonal(cls, mu, mmap, n_x):
        return cls(np.diag(np.asarray(mu, dtype=complex)), mmap, n_x)

    def _like(self, C):
        return MomentumOperator(C, self.mmap, self.N_x, check=False)

    def __add__(self, other):
        return self._like(self.C + other.C)

    def __sub__(self, other):
        return self._like(self.C - other.C)

    def __neg__(self):
        return self._like(-self.C)

    def __mul__(self, scalar):
        return self._like(scalar * self.C)

    __rmul__ = __mul__

    def compose(self, other):
        return self._like(self.C @ other.C)

    __matmul__ = compose

    def exp(self, threshold=None):
        size = self.decay_norm(0, 0)
        if threshold is not None and size > threshold:
            raise SmallnessError(f"exp refused: |R|_(0,0) = {size:.3e} > {threshold:g}", measured=size)
        J = self.C.shape[0]
        # scaling and squaring keeps the series short when |R| is not tiny
        k = max(0, int(np.ceil(np.log2(max(size, 1e-300) / 0.25)))) if size > 0.25 else 0
        a = self.C / 2.0**k
        total = np.eye(J, dtype=complex)
        term = np.eye(J, dtype=complex)
        for n in range(1, 100):
            term = term @ a / n
            total = total + term
            if np.abs(term).max() <= SERIES_TOL * np.abs(total).max():
                break
        for _ in range(k):
            total = total @ total
        return self._like(total)

    def inverse(self, guard=NEUMANN_RATIO, start=None, tol=1e-15, max_iter=60):
        """Inverse by Neumann refinement of ``start`` (an approximate inverse, default Id).

        With X an approximate inverse and K = Id - Phi X, Phi^{-1} = X sum K^k.
        """
        J = self.C.shape[0]
        x = np.eye(J, dtype=complex) if start is None else np.asarray(start.C if isinstance(start, MomentumOperator) else start)
        k = np.eye(J) - self.C @ x
        ratio = float(np.linalg.norm(k, 2))
        if ratio > guard:
            raise SmallnessError(f"Neumann series refused: |Id - Phi X| = {ratio:.3e} > {guard}", measured=ratio)
        total, term = np.eye(J, dtype=complex), np.eye(J, dtype=complex)
        for _ in range(max_iter):
            term = term @ k
            total = total + term
            if np.abs(term).max() <= tol * np.abs(total).max():
                break
        return self._like(x @ total)

    def omega_derivative(self, lam_omega):
        return self._like(1j * np.tensordot(self.ell, np.asarray(lam_omega, dtype=float), axes=(2, 0)) * self.C)

    def decay_norm(self, m, s):
        w = self._geom.weights(s)
        col = np.sqrt(np.sum(w * np.abs(self.C) ** 2, axis=0))
        return float(np.max(col * self.basis.bracket ** (-m), initial=0.0))

    def project_N(self, n):
        keep = self._geom.ell_norm <= n
        keep &= self._geom.dj_norm <= n
        return self._like(np.where(keep, self.C, 0.0)), self._like(np.where(keep, 0.0, self.C))

    def diagonal_part(self):
        return DiagonalOperator(np.diag(self.C).copy(), self.N_x)

    def off_diagonal(self):
        return self._like(self.C - np.diag(np.diag(self.C)))

    def phases(self, phi):
        """Diagonal factors e^{i j.q}, q = P^T phi, with C(phi) = diag(conj) C diag."""
        q = self.mmap.left_inverse().T @ np.asarray(phi, dtype=float)
        return np.exp(1j * (self.basis.modes @ q))

    def at(self, phi):
        e = self.phases(phi)
        return (np.conj(e)[:, None] * self.C) * e[None, :]

    def apply_vec(self, phi, vec):
        e = self.phases(phi)
        return np.conj(e) * (self.C @ (e * vec))

    def apply(self, phi, v: Field2):
        return self.basis.field(self.apply_vec(phi, self.basis.vector(v)))

    def to_qp(self):
        ell = self.ell
        valid = self._geom.valid & (self.C != 0)
        n_phi = int(np.abs(ell[valid]).max(initial=0))
        modes = self.basis.modes
        a, b = np.nonzero(valid)
        entries = [(tuple(ell[x, y]), tuple(modes[x]), tuple(modes[y]), self.C[x, y]) for x, y in zip(a, b)]
        return QPOperator.from_entries(entries, self.nu, n_phi, self.N_x)

    @classmethod
    def from_qp(cls, op: QPOperator, mmap):
        geom = momentum_geometry(mmap, op.N_x)
        J = len(op.basis)
        C = np.zeros((J, J), dtype=complex)
        for ell, b in op.blocks.items():
            coo = b.tocoo()
            hit = np.all(geom.ell[coo.row, coo.col] == np.array(ell), axis=1) & geom.valid[coo.row, coo.col]
            if not np.all(hit | (coo.data == 0)):
                raise PreconditionError("operator is not momentum preserving")
            C[coo.row, coo.col] = coo.data
        return cls(C, mmap, op.N_x)

    # symmetries
    def _partner(self):
        n = self.basis.neg
        return self.C[np.ix_(n, n)]

    def _scale(self):
        return max(float(np.abs(self.C).max(initial=0.0)), 1e-300)

    def is_real(self, tol=1e-10):
        return bool(np.abs(self.C - np.conj(self._partner())).max() <= tol * self._scale())

    def is_reversible(self, tol=1e-10):
        return bool(np.abs(self.C + self._partner()).max() <= tol * self._scale())

    def is_reversibility_preserving(self, tol=1e-10):
        return bool(np.abs(self.C - self._partner()).max() <= tol * self._scale())

    def is_momentum_preserving(self, tol=0.0):
        return bool(np.abs(self.C[~self._geom.valid]).max(initial=0.0) <= tol * self._scale())


class _Geometry:
    def __init__(self, mmap, n_x):
        basis = mode_basis(n_x)
        d = basis.modes[None, :, :] - basis.modes[:, None, :]  # j_b - j_a
        p = mmap.left_inverse()
        ell = np.rint(np.tensordot(d.astype(float), p, axes=(2, 1))).astype(np.int64)
        back = np.tensordot(ell, mmap.matrix, axes=(2, 0))
        self.valid = np.all(back == d, axis=2)
        ell[~self.valid] = 0
        self.ell = ell
        self.ell_norm = np.sqrt((ell.astype(float) ** 2).sum(2))
        dj = -d
        self.dj_norm = np.sqrt((dj.astype(float) ** 2).sum(2))
        self._bracket = np.maximum(np.maximum(1.0, self.ell_norm), self.dj_norm)
        self._weights = {}

    def weights(self, s):
        if s not in self._weights:
            self._weights[s] = self._bracket ** (2 * s)
        return self._weights[s]


@lru_cache(maxsize=16)
def momentum_geometry(mmap, n_x):
    return _Geometry(mmap, n_x)


# --------------------------------------------------------------------------- composition operators


class DistortionError(PreconditionError):
    pass


def eval_fourier(coeffs, points):
    """sum_j c_j e^{ij.x} at arbitrary points (2, P); separable in x1, x2."""
    n = coeffs.shape[-1] // 2
    k = np.arange(-n, n + 1)
    e1 = np.exp(1j * np.outer(points[0], k))
    e2 = np.exp(1j * np.outer(points[1], k))
    return np.einsum("pa,...ab,pb->...p", e1, coeffs, e2, optimize=True)


def x_gradient_coeffs(coeffs):
    n = coeffs.shape[-1] // 2
    k = np.arange(-n, n + 1)
    return np.stack([1j * k[:, None] * coeffs, 1j * k[None, :] * coeffs])


def invert_displacement(beta_coeffs, m, tol=1e-14, max_iter=50):
    """Displacement of the inverse map on the m x m grid.

    beta_coeffs has shape (2, 2n+1, 2n+1): the x-coefficients of the two
    components of beta at one phi. Returns breve on the grid with
    y + breve(y) + beta(y + breve(y)) = y, i.e. breve(y) = -beta(y + breve(y)).
    Solved by Newton's method pointwise.
    """
    g = 2 * np.pi * np.arange(m) / m
    y = np.array(np.meshgrid(g, g, indexing="ij")).reshape(2, -1)
    grad = np.stack([x_gradient_coeffs(beta_coeffs[0]), x_gradient_coeffs(beta_coeffs[1])])
    breve = -eval_fourier(beta_coeffs, y).real
    for _ in range(max_iter):
        x = y + breve
        res = breve + eval_fourier(beta_coeffs, x).real
        if np.abs(res).max() <= tol:
            break
        jac = eval_fourier(grad, x).real  # (2 comp, 2 deriv, P)
        a = 1.0 + jac[0, 0]
        b = jac[0, 1]
        c = jac[1, 0]
        d = 1.0 + jac[1, 1]
        det = a * d - b * c
        if np.any(det <= 0):
            raise DistortionError("x -> x + beta(x) is not a diffeomorphism")
        breve = breve - np.stack([(d * res[0] - b * res[1]) / det, (-c * res[0] + a * res[1]) / det])
    else:
        raise DistortionError("inverse displacement did not converge")
    return breve.reshape(2, m, m)


def check_jacobian(beta_coeffs, m):
    """Minimum of det(Id + grad beta) on the grid."""
    grad = np.stack([x_gradient_coeffs(beta_coeffs[0]), x_gradient_coeffs(beta_coeffs[1])])
    gg = coeffs_to_grid(grad, m, (2, 3)).real
    det = (1 + gg[0, 0]) * (1 + gg[1, 1]) - gg[0, 1] * gg[1, 0]
    return float(det.min())


def composition_columns(disp, basis, n_out=None):
    """Matrix with column b = coefficients (on basis modes) of e^{i j_b.(x + disp(x))}.

    disp has shape (2, M, M) on the uniform grid. Leading extra axes (phi grid)
    are allowed: disp shape (2, *phi_shape, M, M).
    """
    m = disp.shape[-1]
    g = 2 * np.pi * np.arange(m) / m
    x = np.array(np.meshgrid(g, g, indexing="ij"))
    arg = x.reshape((2,) + (1,) * (disp.ndim - 3) + (m, m)) + disp
    modes = basis.modes if n_out is None else mode_basis(n_out).modes
    cols = np.exp(1j * np.tensordot(basis.modes.astype(float), arg, axes=(1, 0)))
    spec = np.fft.fft2(cols, axes=(-2, -1)) / (m * m)
    out = spec[..., modes[:, 0] % m, modes[:, 1] % m]  # (J_in, *phi, J_out)
    return np.moveaxis(out, 0, -1)  # (*phi, J_out, J_in)


def composition_operator(beta, n_phi, n_x, m_phi=None, m_x=None):
    """Operators h -> h(x + beta(phi, x)) and its inverse, as QPOperators.

    beta: pair of QPFields (the two components). Entries come from an FFT of
    e^{i j'.(x + beta)} over the (phi, x) grid, truncated to |l|_inf <= n_phi.
    """
    nu = beta[0].nu
    nb_phi, nb_x = beta[0].N_phi, beta[0].N_x
    m_phi = m_phi or max(4 * (n_phi + nb_phi) + 2, 8)
    m_x = m_x or max(4 * (n_x + nb_x) + 4, 16)
    disp = np.stack([qp_to_grid(b, m_phi, m_x) for b in beta])  # (2, *phi, M, M)
    basis = mode_basis(n_x)
    grid_phi = disp.shape[1 : 1 + nu]
    breve = np.empty_like(disp)
    for idx in np.ndindex(*grid_phi):
        sl = (slice(None),) + idx
        coeffs = np.fft.fft2(disp[sl], axes=(-2, -1)) / (m_x * m_x)
        c = from_fft_layout(coeffs, nb_x, (1, 2))
        if check_jacobian(c, m_x) <= 0:
            raise DistortionError("x -> x + beta(phi, x) is not a diffeomorphism")
        breve[sl] = invert_displacement(c, m_x)
    ops = []
    for d in (disp, breve):
        mats = composition_columns(d, basis)  # (*phi, J, J)
        spec = np.fft.fftn(mats, axes=tuple(range(nu))) / float(m_phi) ** nu
        blocks = {}
        for ell in iter_box(n_phi, nu):
            # coefficient of e^{il.phi}
            idx = tuple(x % m_phi for x in ell)
            blocks[ell] = spec[idx]
        ops.append(QPOperator(blocks, nu, n_phi, n_x))
    return ops[0], ops[1]
