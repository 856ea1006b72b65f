"""Conjugation of the linearized operator at v_lambda to constant diagonal form.

Stages: linearization, straightening of the transport field by a change of
variables x -> x + beta(phi, x), M - 1 Lie conjugations that push the
perturbation to order -M, and a KAM iteration that removes the remainder.
All stages act on momentum-preserving operators through the dense
``MomentumOperator`` representation, so every conjugation is exact on the
truncated space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dynamics import ModelParams, _symbols, dispersion_array, transport_array
from .errors import PreconditionError, ResonanceError, SmallnessError
from .lattice import (
    Field2,
    TravelingField,
    bracket,
    box_grid,
    coeffs_to_grid,
    grid_to_coeffs,
)
from .operators import (
    DistortionError,
    MomentumOperator,
    check_jacobian,
    composition_columns,
    eval_fourier,
    invert_displacement,
    mode_basis,
    pushforward,
)
from .wave import WaveSolution, _lattice_symbols

# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class ReductionSchedule:
    tau: int
    M: int
    N0: float = 4.0
    n_max: int = 6
    tol_kam: float = 1e-11
    op_s: float = 0.0

    @classmethod
    def from_params(cls, p: ModelParams, **kw):
        return cls(tau=p.tau, M=p.M, N0=p.N0, **kw)

    @property
    def tau1(self):
        return 4 * self.tau + 2 + self.M

    @property
    def a(self):
        return 3 * (2 * self.tau + self.M + 1) + 1

    @property
    def b(self):
        return self.a + 1

    def N(self, n):
        """N_{-1} = 1, N_n = N0^{(3/2)^n}."""
        if n < 0:
            return 1.0
        return self.N0 ** (1.5**n)


# ---------------------------------------------------------------- linearization


@dataclass
class LinearizedOperator:
    """L(phi) = beta L + a0.grad + E0 on the truncated zero-mean space."""

    a0: tuple  # two TravelingField components of -B(v)
    transport: MomentumOperator  # a0.grad
    E0: MomentumOperator
    dispersion: MomentumOperator
    assembly_residual: float

    @property
    def full(self):
        return self.dispersion + self.transport + self.E0


def _check_pipeline_map(mmap):
    if not mmap.injective:
        raise PreconditionError("reduction requires an injective momentum map (full-rank wave vectors)")


def linearize(sol: WaveSolution) -> LinearizedOperator:
    """Assemble a0.grad and E0 from the converged profile.

    With k = j - j' the (j, j') entry is v(l, k) times
    (k2 j1' - k1 j2')/|k|^2 for the transport part and -(k2 j1' - k1 j2')/|j'|^2 for E0.
    """
    p = sol.params
    v = sol.v
    mmap = v.mmap
    _check_pipeline_map(mmap)
    n_x = v.N_x
    basis = mode_basis(n_x)
    geom_op = MomentumOperator.zero(mmap, n_x)
    ell = geom_op.ell
    valid = geom_op._geom.valid
    n_phi = v.N_phi
    inside = valid & np.all(np.abs(ell) <= n_phi, axis=2)
    vhat = np.zeros(ell.shape[:2], dtype=complex)
    idx = tuple(ell[..., k][inside] + n_phi for k in range(mmap.nu))
    vhat[inside] = v.profile[idx]
    j = basis.modes.astype(float)
    k = j[:, None, :] - j[None, :, :]
    jp = np.broadcast_to(j[None, :, :], k.shape)
    cross = k[..., 1] * jp[..., 0] - k[..., 0] * jp[..., 1]
    kk = (k**2).sum(-1)
    jj = (jp**2).sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        tr = np.where(kk > 0, cross / kk, 0.0) * vhat
    e0 = -cross / jj * vhat
    # profile modes that never enter the truncated matrix
    used = np.zeros(v.profile.shape, dtype=bool)
    used[idx] = True
    dropped = float(np.sqrt(np.sum(np.abs(v.profile[~used]) ** 2)))
    a0_prof = _biot_savart_profiles(v)
    a0 = tuple(v.with_profile(-a) for a in a0_prof)
    disp = MomentumOperator.diagonal(dispersion_array(n_x, p.beta)[basis.pos], mmap, n_x)
    return LinearizedOperator(
        a0=a0,
        transport=MomentumOperator(tr, mmap, n_x, check=False),
        E0=MomentumOperator(e0, mmap, n_x, check=False),
        dispersion=disp,
        assembly_residual=dropped,
    )


def _biot_savart_profiles(v: TravelingField):
    _, bs, _ = _lattice_symbols(v.N_phi, v.mmap)
    return bs[0] * v.profile, bs[1] * v.profile


# ---------------------------------------------------------------- straightening


def diophantine_check(omega, gamma2, tau, n, nu):
    """min over 0 < |l|_inf <= n of |omega.l| <l>^tau / gamma2; raises below 1."""
    ell = box_grid(n, nu)
    val = np.abs(np.tensordot(np.asarray(omega), ell, axes=(0, 0)))
    bound = gamma2 * bracket(ell) ** (-tau)
    ratio = val / bound
    ratio[(n,) * nu] = np.inf
    worst = np.unravel_index(np.argmin(ratio), ratio.shape)
    if ratio[worst] < 1.0:
        l_bad = tuple(int(a) - n for a in worst)
        raise ResonanceError(
            f"omega fails DC(2 gamma, tau) at l={l_bad}: |omega.l| = {val[worst]:.3e}",
            index=l_bad,
            divisor=float(val[worst]),
        )
    return float(ratio[worst])


def _profile_product(a, b, n_in, nu, n_out):
    """Dealiased theta-space product of two profiles of half-width n_in, kept to n_out."""
    m = 2 * n_in + n_out + 1
    axes = tuple(range(nu))
    prod = coeffs_to_grid(a, m, axes) * coeffs_to_grid(b, m, axes)
    return grid_to_coeffs(prod, n_out, axes)


@dataclass
class Straightening:
    beta: tuple  # two TravelingField components on the enlarged lattice
    n_beta: int
    iterations: int
    residual: float  # in-box residual of the transport equation (H^s)
    tail_residual: float  # H^s mass of the residual outside the box
    contraction: float
    residual_profiles: tuple = field(repr=False, default=None)


def transport_equation_residual(beta_prof, b_prof, omega, mmap, n, n_full):
    """omega.d_phi beta + b + b.grad beta as profiles of half-width n_full."""
    nu = mmap.nu
    ell = box_grid(n, nu)
    wl = np.tensordot(np.asarray(omega), ell, axes=(0, 0))
    jm = TravelingField.momenta(n, mmap)
    out = []
    for k in range(2):
        acc = np.zeros((2 * n_full + 1,) * nu, dtype=complex)
        for i in range(2):
            acc += _profile_product(b_prof[i], 1j * jm[i] * beta_prof[k], n, nu, n_full)
        lin = 1j * wl * beta_prof[k] + b_prof[k]
        sl = tuple(slice(n_full - n, n_full + n + 1) for _ in range(nu))
        acc[sl] += lin
        out.append(acc)
    return out


def _traveling_hs(prof, mmap, s):
    n = prof.shape[0] // 2
    w = bracket(box_grid(n, mmap.nu), TravelingField.momenta(n, mmap)) ** s
    return float(np.sqrt(np.sum(np.abs(w * prof) ** 2)))


def transport_matrix(b_prof, omega, mmap, n):
    """Matrix of beta -> omega.d_phi beta + b.grad beta on profiles with 0 < |l|_inf <= n."""
    nu = mmap.nu
    ell = box_grid(n, nu).reshape(nu, -1)
    keep = np.any(ell != 0, axis=0)
    ell = ell[:, keep]
    j = -mmap.transpose(ell)
    nb = b_prof[0].shape[0] // 2
    dl = ell[:, :, None] - ell[:, None, :]
    inside = np.all(np.abs(dl) <= nb, axis=0)
    A = np.diag(1j * (np.asarray(omega) @ ell)).astype(complex)
    for i in range(2):
        coef = np.zeros(inside.shape, dtype=complex)
        coef[inside] = b_prof[i][tuple(dl[k][inside] + nb for k in range(nu))]
        A += coef * (1j * j[i])[None, :]
    return A, ell


def straighten_transport(b, p: ModelParams, n_beta=None, tol=1e-12, max_iter=60, smallness=1.0, method="direct"):
    """Solve omega.d_phi beta + b + b.grad beta = 0 for beta on a lattice of half-width n_beta.

    The equation is linear in beta. ``method="fixed_point"`` iterates
    beta <- -(omega.d_phi)^{-1} Pi(b + b.grad beta); ``"direct"`` solves the
    same fixed-point equation by one dense linear solve. Either way the
    contraction ratio of the fixed-point map is measured and reported.
    """
    mmap = b[0].mmap
    nu = mmap.nu
    ratio = p.eps / p.gamma
    if ratio > smallness:
        raise SmallnessError(f"lambda^(theta-1)/gamma = {ratio:.3e} exceeds {smallness}", measured=ratio)
    n = 2 * b[0].N_phi if n_beta is None else n_beta
    diophantine_check(p.omega_vec, 2 * p.gamma, p.tau, n, nu)
    b_prof = [x.resized(n, n_x=10**6).profile for x in b]
    if not any(np.any(x) for x in b_prof):
        zero = np.zeros_like(b_prof[0])
        big = np.zeros((4 * n + 1,) * nu, dtype=complex)
        return Straightening((zero, zero.copy()), n, 0, 0.0, 0.0, 0.0, (big, big.copy()))
    A, ell = transport_matrix(b_prof, p.omega_vec, mmap, n)
    pos = tuple(ell[k] + n for k in range(nu))
    diag = np.diag(A).copy()
    K = -(A - np.diag(diag)) / diag[:, None]  # fixed-point map, linear part
    contraction = float(np.abs(np.linalg.eigvals(K)).max()) if K.shape[0] <= 3000 else float("nan")
    rhs = np.stack([-x[pos] for x in b_prof], axis=1)
    if method == "direct":
        sol = np.linalg.solve(A, rhs)
        iterations = 1
    else:
        if contraction >= 1.0:
            raise SmallnessError(f"straightening fixed point diverges (ratio {contraction:.3f})", measured=contraction)
        c0 = rhs / diag[:, None]
        sol = c0.copy()
        for iterations in range(1, max_iter * 10):
            new = c0 + K @ sol
            step = float(np.abs(new - sol).max())
            sol = new
            if step <= tol * max(1.0, float(np.abs(sol).max())):
                break
    beta = []
    for k in range(2):
        prof = np.zeros_like(b_prof[0])
        prof[pos] = sol[:, k]
        prof = 0.5 * (prof + np.conj(np.flip(prof)))  # real
        beta.append(prof)
    res = transport_equation_residual(beta, b_prof, p.omega_vec, mmap, n, 2 * n)
    inbox = [r[tuple(slice(n, 3 * n + 1) for _ in range(nu))] for r in res]
    r_in = math.sqrt(sum(_traveling_hs(x, mmap, p.s) ** 2 for x in inbox))
    r_all = math.sqrt(sum(_traveling_hs(x, mmap, p.s) ** 2 for x in res))
    tail = math.sqrt(max(r_all**2 - r_in**2, 0.0))
    return Straightening(tuple(beta), n, iterations, r_in, tail, contraction, tuple(res))


def straighten_adaptive(b, p, tol_residual=1e-9, n_start=None, n_cap=48, **kw):
    """Enlarge the beta lattice until the residual including its tail is below tol_residual."""
    n = n_start or 2 * b[0].N_phi
    while True:
        st = straighten_transport(b, p, n_beta=n, **kw)
        total = math.hypot(st.residual, st.tail_residual)
        if total <= tol_residual or n >= n_cap:
            return st
        n = min(n_cap, n + max(4, n // 2))


# ---------------------------------------------------------------- composition at phi = 0


def _slice_coeffs(prof, mmap, phi=None):
    """x-coefficients of a traveling profile at phi (default 0), on the smallest enclosing box."""
    n = prof.shape[0] // 2
    nu = mmap.nu
    ell = box_grid(n, nu).reshape(nu, -1)
    j = -mmap.transpose(ell)
    nx = int(np.abs(j).max(initial=0))
    c = np.zeros((2 * nx + 1, 2 * nx + 1), dtype=complex)
    vals = prof.reshape(-1)
    if phi is not None:
        vals = vals * np.exp(1j * (np.asarray(phi, dtype=float) @ ell))
    np.add.at(c, (j[0] + nx, j[1] + nx), vals)
    return c


@dataclass
class CompositionPair:
    B: MomentumOperator
    B_inv: MomentumOperator
    B_inv_approx: MomentumOperator
    breve: np.ndarray  # inverse displacement on the grid at phi = 0
    grid: int
    min_jacobian: float
    beta_coeffs: np.ndarray


def composition_pair(beta_prof, mmap, n_x, m=None):
    """Truncated B = Pi B(0) Pi, its exact inverse on the truncated space, and the grid data."""
    c = np.stack([_slice_coeffs(x, mmap) for x in beta_prof])
    nb = c.shape[-1] // 2
    m = m or int(2 ** math.ceil(math.log2(4 * (n_x + nb) + 8)))
    det = check_jacobian(c, m)
    if det <= 0:
        raise DistortionError("x -> x + beta(0, x) is not a diffeomorphism")
    disp = coeffs_to_grid(c, m, (1, 2)).real
    breve = invert_displacement(c, m)
    basis = mode_basis(n_x)
    geom = MomentumOperator.zero(mmap, n_x)._geom
    cb = np.where(geom.valid, composition_columns(disp, basis), 0.0)
    ci = np.where(geom.valid, composition_columns(breve, basis), 0.0)
    B = MomentumOperator(cb, mmap, n_x, check=False)
    approx = MomentumOperator(ci, mmap, n_x, check=False)
    try:
        B_inv = B.inverse(start=approx)
    except SmallnessError:
        # edge modes couple strongly to the dropped tail; invert the truncated matrix directly
        B_inv = MomentumOperator(np.linalg.solve(cb, np.eye(cb.shape[0])), mmap, n_x, check=False)
    return CompositionPair(B, B_inv, approx, breve, m, det, c)


# ---------------------------------------------------------------- stage 1


@dataclass
class StageOne:
    E1: MomentumOperator
    L1: MomentumOperator
    b0_norm: float
    comp: CompositionPair
    straightening: Straightening


def _compose_with(coeffs, breve):
    """Coefficients of y -> g(y + breve(y)) for g given by x-coefficients."""
    m = breve.shape[-1]
    g = 2 * np.pi * np.arange(m) / m
    y = np.array(np.meshgrid(g, g, indexing="ij")).reshape(2, -1)
    vals = eval_fourier(coeffs, y + breve.reshape(2, -1)).reshape(coeffs.shape[:-2] + (m, m))
    return vals


def b0_norm(st: Straightening, comp: CompositionPair, mmap, lam, s):
    """|lambda B^{-1}(omega.d_phi beta + b + b.grad beta)|_s at the traveling lattice."""
    res = np.stack([_slice_coeffs(r, mmap) for r in st.residual_profiles])
    vals = _compose_with(res, comp.breve).real * lam
    m = comp.grid
    nr = res.shape[-1] // 2
    n_keep = min(m // 2 - 1, nr + comp.beta_coeffs.shape[-1])
    c = grid_to_coeffs(vals, n_keep, (1, 2))
    jj = box_grid(n_keep, 2)
    lp = mmap.left_inverse()
    ell = np.tensordot(lp, -jj.astype(float), axes=(1, 0))
    w = np.maximum(bracket(ell), bracket(jj)) ** s
    return float(np.sqrt(np.sum(np.abs(w * c) ** 2)))


def conjugate_to_L1(lin: LinearizedOperator, p: ModelParams, tol_b0=1e-8, straighten_kw=None):
    mmap = lin.transport.mmap
    # conjugating by h -> h(x + beta) removes a0.grad when
    # lambda omega.d_phi beta = a0 + a0.grad beta, i.e. the transport
    # equation below with b = -a0 / lambda
    b = tuple(a * (-1.0 / p.lam) for a in lin.a0)
    st = straighten_adaptive(b, p, tol_residual=0.1 * tol_b0, **(straighten_kw or {}))
    comp = composition_pair(st.beta, mmap, lin.transport.N_x)
    L1 = pushforward(comp.B, lin.full, p.lam * p.omega_vec, comp.B_inv)
    E1 = L1 - lin.dispersion
    bn = b0_norm(st, comp, mmap, p.lam, p.s)
    return StageOne(E1, L1, bn, comp, st)


# ---------------------------------------------------------------- order reduction


@dataclass
class OrderReduction:
    Z: np.ndarray
    E: MomentumOperator
    Phi: MomentumOperator
    Phi_inv: MomentumOperator
    history: list  # per step: dict of norms


def order_reduce(E1: MomentumOperator, dispersion: MomentumOperator, p: ModelParams, steps=None, op_s=0.0):
    """Lie conjugations exp(X_m) with lambda omega.d_phi X_m = E_m - E_m(0)."""
    steps = p.M - 1 if steps is None else steps
    lw = p.lam * p.omega_vec
    ell = E1.ell
    wl = 1j * np.tensordot(ell, lw, axes=(2, 0))
    off = wl != 0
    diophantine_check(p.omega_vec, 2 * p.gamma, p.tau, int(np.abs(ell).max()), p.nu)
    J = E1.C.shape[0]
    Z = np.zeros(J, dtype=complex)
    E = E1
    Phi = MomentumOperator.identity(E1.mmap, E1.N_x)
    Phi_inv = Phi
    history = [dict(step=1, norm0=E.decay_norm(0, 0), norm_order=E.decay_norm(-1, op_s))]
    scale = max(history[0]["norm0"], 1e-300)
    for m in range(1, steps):
        if history[-1]["norm0"] <= 1e-15 * scale:
            history.append(dict(step=m + 1, norm0=0.0, norm_order=0.0))
            E = E * 0.0
            continue
        X = np.zeros_like(E.C)
        X[off] = E.C[off] / wl[off]
        Xop = E._like(X)
        expX, expmX = Xop.exp(), (-Xop).exp()
        G = dispersion + MomentumOperator.diagonal(Z, E.mmap, E.N_x) + E
        Z = Z + np.diag(E.C)
        G_plus = pushforward(expX, G, lw, expmX)
        E = G_plus - dispersion - MomentumOperator.diagonal(Z, E.mmap, E.N_x)
        Phi = Phi @ expX
        Phi_inv = expmX @ Phi_inv
        history.append(dict(step=m + 1, norm0=E.decay_norm(0, 0), norm_order=E.decay_norm(-(m + 1), op_s)))
    return OrderReduction(Z, E, Phi, Phi_inv, history)


# ---------------------------------------------------------------- KAM


@dataclass
class KAMResult:
    mu: np.ndarray
    E: MomentumOperator
    Phi: MomentumOperator
    Phi_inv: MomentumOperator
    remainders: list
    mu_history: list
    min_divisor: float
    min_divisor_ratio: float
    checked_l: list


def kam_reduce(mu0, E0: MomentumOperator, p: ModelParams, schedule: ReductionSchedule):
    """Quadratic iteration Psi_n = Pi_{N_n} E_n / (i lambda omega.l + mu_n(j') - mu_n(j))."""
    lw = p.lam * p.omega_vec
    geom = E0._geom
    wl = 1j * np.tensordot(E0.ell, lw, axes=(2, 0))
    offl = geom.ell_norm > 0
    jb = E0.basis.bracket
    mu = np.asarray(mu0, dtype=complex).copy()
    E = E0
    Phi = MomentumOperator.identity(E0.mmap, E0.N_x)
    Phi_inv = Phi
    scale = p.lam**p.theta
    remainders = [E.decay_norm(0, schedule.op_s)]
    mu_history = [mu.copy()]
    min_div, min_ratio = np.inf, np.inf
    checked = []
    for n in range(schedule.n_max):
        if remainders[-1] < schedule.tol_kam * scale:
            break
        Nn = schedule.N(n)
        mask = offl & (geom.ell_norm <= Nn) & (geom.dj_norm <= Nn) & geom.valid
        div = wl + mu[None, :] - mu[:, None]
        bound = p.lam * p.gamma / (np.maximum(1.0, geom.ell_norm) ** p.tau * jb[None, :] ** p.tau)
        ratio = np.where(mask, np.abs(div) / bound, np.inf)
        worst = np.unravel_index(np.argmin(ratio), ratio.shape)
        checked.append(float(Nn))
        if ratio[worst] < 1.0:
            a, b = worst
            raise ResonanceError(
                f"second Melnikov condition fails at l={tuple(E.ell[a, b])}, j={tuple(E.basis.modes[a])}, "
                f"j'={tuple(E.basis.modes[b])}: divisor {abs(div[worst]):.3e}",
                index=(tuple(E.ell[a, b]), tuple(E.basis.modes[a]), tuple(E.basis.modes[b])),
                divisor=float(abs(div[worst])),
            )
        if np.any(mask):
            min_div = min(min_div, float(np.abs(div[mask]).min()))
            min_ratio = min(min_ratio, float(ratio[worst]))
        psi = np.zeros_like(E.C)
        psi[mask] = E.C[mask] / div[mask]
        P = E._like(psi)
        expP, expmP = P.exp(), (-P).exp()
        D = MomentumOperator.diagonal(mu, E.mmap, E.N_x)
        G_plus = pushforward(expP, D + E, lw, expmP)
        mu = mu + np.diag(E.C)
        E = G_plus - MomentumOperator.diagonal(mu, E.mmap, E.N_x)
        Phi = Phi @ expP
        Phi_inv = expmP @ Phi_inv
        remainders.append(E.decay_norm(0, schedule.op_s))
        mu_history.append(mu.copy())
    mu_final = mu + np.diag(E.C)
    E_final = E.off_diagonal()
    return KAMResult(mu_final, E_final, Phi, Phi_inv, remainders, mu_history, min_div, min_ratio, checked)


# ---------------------------------------------------------------- assembly


@dataclass
class ReducedForm:
    params: ModelParams
    mu: np.ndarray
    U: MomentumOperator
    U_inv: MomentumOperator
    W: MomentumOperator
    W_inv: MomentumOperator
    stage_one: StageOne
    order: OrderReduction
    kam: KAMResult
    defect: float
    stage_norms: dict
    W_distance: float
    linearized: LinearizedOperator

    @property
    def basis(self):
        return self.U.basis

    def mu_table(self):
        return [(int(j[0]), int(j[1]), float(m.real), float(m.imag)) for j, m in zip(self.basis.modes, self.mu)]

    def certificate(self):
        p = self.params
        return {
            "omega": list(p.omega),
            "gamma": p.gamma,
            "tau": p.tau,
            "M": p.M,
            "checked_l_radii": self.kam.checked_l,
            "straightening_lattice": self.stage_one.straightening.n_beta,
            "minimal_divisor": self.kam.min_divisor if np.isfinite(self.kam.min_divisor) else None,
            "minimal_divisor_ratio": self.kam.min_divisor_ratio if np.isfinite(self.kam.min_divisor_ratio) else None,
            "b0_norm": self.stage_one.b0_norm,
            "defect": self.defect,
            "kam_remainders": self.kam.remainders,
        }


def hs_gain_norm(op: MomentumOperator, s):
    """|| Lambda^s (C - Id) Lambda^{1-s} ||_2: the H^{s-1} -> H^s size of op - Id (phi-independent)."""
    br = op.basis.bracket
    a = (op.C - np.eye(op.C.shape[0])) * br[:, None] ** s * br[None, :] ** (1 - s)
    return float(np.linalg.norm(a, 2))


def assemble_U(lin: LinearizedOperator, one: StageOne, order: OrderReduction, kam: KAMResult, p: ModelParams):
    W = order.Phi @ kam.Phi
    W_inv = kam.Phi_inv @ order.Phi_inv
    U = one.comp.B @ W
    U_inv = W_inv @ one.comp.B_inv
    D = MomentumOperator.diagonal(kam.mu, U.mmap, U.N_x)
    conj = pushforward(U, lin.full, p.lam * p.omega_vec, U_inv)
    defect = (conj - D).decay_norm(0, 0)
    return U, U_inv, W, W_inv, defect


def reduce_linearized(sol: WaveSolution, schedule: ReductionSchedule | None = None, order_steps=None, tol_b0=1e-8):
    """Run the whole pipeline and return a ReducedForm."""
    p = sol.params
    schedule = schedule or ReductionSchedule.from_params(p)
    lin = linearize(sol)
    one = conjugate_to_L1(lin, p, tol_b0=tol_b0)
    order = order_reduce(one.E1, lin.dispersion, p, steps=order_steps, op_s=schedule.op_s)
    mu0 = np.diag(lin.dispersion.C) + order.Z
    kam = kam_reduce(mu0, order.E, p, schedule)
    U, U_inv, W, W_inv, defect = assemble_U(lin, one, order, kam, p)
    stage_norms = {
        "E0": lin.E0.decay_norm(0, 0),
        "transport": lin.transport.decay_norm(0, 0),
        "E1": one.E1.decay_norm(0, 0),
        "EM": order.E.decay_norm(0, 0),
        "E_final": kam.E.decay_norm(0, 0),
    }
    dist = max(hs_gain_norm(W, p.s), hs_gain_norm(W_inv, p.s))
    return ReducedForm(p, kam.mu, U, U_inv, W, W_inv, one, order, kam, defect, stage_norms, dist, lin)


# ---------------------------------------------------------------- brute-force spectrum


def floquet_spectrum(lin: LinearizedOperator, p: ModelParams, reference=None):
    """Eigenvalues of the constant matrix A + i lambda Omega generating the linear flow.

    In the rotating variables z_j = e^{i j.q} w_j (q = P^T lambda omega t) the
    flow of L(lambda omega t) is autonomous. Returned as mu(j) = Lambda - i lambda omega.P j.
    Eigenvectors of nearly degenerate eigenvalues mix, so when ``reference``
    exponents are given the labels come from a minimum-distance assignment
    between Lambda and reference + rotation; otherwise from |eigenvector|^2.
    """
    L = lin.full
    q_rate = L.mmap.left_inverse().T @ (p.lam * p.omega_vec)
    rot = 1j * (L.basis.modes @ q_rate)
    A = L.C + np.diag(rot)
    if reference is None:
        vals, vecs = np.linalg.eig(A)
        owner, col = linear_sum_assignment(-np.abs(vecs) ** 2)
    else:
        vals = np.linalg.eigvals(A)
        cost = np.abs((np.asarray(reference) + rot)[:, None] - vals[None, :])
        owner, col = linear_sum_assignment(cost)
    mu = np.empty(len(vals), dtype=complex)
    mu[owner] = vals[col] - rot[owner]
    return mu


# ---------------------------------------------------------------- Melnikov Monte Carlo


def sample_annulus(rng, n, nu):
    if nu == 1:
        r = rng.uniform(1.0, 2.0, n)
        return (r * rng.choice([-1.0, 1.0], n))[:, None]
    d = rng.standard_normal((n, nu))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.uniform(1.0, 2.0**nu, n) ** (1.0 / nu)
    return d * r[:, None]


def _merged_intervals(centers, radii):
    order = np.argsort(centers - radii)
    lo = (centers - radii)[order]
    hi = (centers + radii)[order]
    out_lo, out_hi = [lo[0]], [hi[0]]
    for a, b in zip(lo[1:], hi[1:]):
        if a <= out_hi[-1]:
            out_hi[-1] = max(out_hi[-1], b)
        else:
            out_lo.append(a)
            out_hi.append(b)
    return np.array(out_lo), np.array(out_hi)


def excised_mask(omegas, p: ModelParams, gamma, n_trunc, z=None):
    """True where omega violates DC(2 gamma, tau) or a final second-Melnikov bound.

    Final eigenvalues are modelled as mu(j) = i beta L(j) + z(j), z optional
    (defaults to 0). Conditions are divided through by lambda.
    """
    mmap = p.mmap
    nu = mmap.nu
    basis = mode_basis(n_trunc)
    modes = basis.modes
    r2 = (modes.astype(float) ** 2).sum(1)
    freq = p.beta * modes[:, 0] / r2  # mu / i
    if z is not None:
        freq = freq + np.imag(np.asarray(z))
    bad = np.zeros(len(omegas), dtype=bool)
    for ell in box_grid(n_trunc, nu).reshape(nu, -1).T:
        if not np.any(ell):
            continue
        br = max(1.0, float(np.linalg.norm(ell)))
        centers = [0.0]
        radii = [2 * gamma * br ** (-p.tau)]
        d = mmap.transpose(ell)
        jp = modes + d
        ok = np.max(np.abs(jp), axis=1) <= n_trunc
        ok &= np.any(jp != 0, axis=1)
        if np.any(ok):
            src = np.nonzero(ok)[0]
            dst = np.array([basis.index[tuple(x)] for x in jp[ok]])
            # |lambda omega.l + (mu(j) - mu(j'))/i| >= 2 lambda gamma / (<l>^tau |j'|^tau)
            shift = (freq[src] - freq[dst]) / p.lam
            rad = 2 * gamma / (br**p.tau * np.sqrt(r2[dst]) ** p.tau)
            centers.extend(list(-shift))
            radii.extend(list(rad))
        lo, hi = _merged_intervals(np.array(centers), np.array(radii))
        x = omegas @ ell
        k = np.searchsorted(lo, x, side="right") - 1
        inside = (k >= 0) & (x < hi[np.clip(k, 0, None)])
        bad |= inside
    return bad


def melnikov_measure(p: ModelParams, gamma, n_samples, rng_seed, n_trunc=None, z=None, chunk=20000):
    """Monte Carlo fraction of the annulus excised by the non-resonance conditions."""
    if n_samples < 1:
        raise PreconditionError("n_samples must be >= 1")
    n_trunc = p.N_x if n_trunc is None else n_trunc
    if gamma == 0:
        return 0.0
    seeds = np.random.SeedSequence(rng_seed).spawn((n_samples + chunk - 1) // chunk)
    hits = 0
    left = n_samples
    for ss in seeds:
        k = min(chunk, left)
        om = sample_annulus(np.random.default_rng(ss), k, p.nu)
        hits += int(excised_mask(om, p, gamma, n_trunc, z).sum())
        left -= k
    return hits / n_samples


# ---------------------------------------------------------------- transformed nonlinearity


def _grid_fields(coeffs, m):
    return coeffs_to_grid(coeffs, m, (-2, -1)).real


def transformed_nonlinearity(rf: ReducedForm, psi: Field2, phi):
    """Split U^{-1} N[U psi, U psi] into Pi0perp(a . grad psi) + R_Q.

    a(phi, psi) = -M^T B^{-1}[B(U psi)] with M = B^{-1}[(Id + grad beta)^T].
    Returns (a as two x-coefficient arrays, R_Q as Field2, Q as Field2).
    """
    basis = rf.basis
    n = basis.N
    vec = basis.vector(psi)
    u_vec = rf.U.apply_vec(phi, vec)
    u_field = basis.field(u_vec)
    q_vec = rf.U_inv.apply_vec(phi, basis.vector(Field2(transport_array(u_field.coeffs, u_field.coeffs, n), check=False)))
    Q = basis.field(q_vec)
    mmap = rf.U.mmap
    beta_c = np.stack([_slice_coeffs(x, mmap, phi) for x in rf.stage_one.straightening.beta])
    nb = beta_c.shape[-1] // 2
    m = int(2 ** math.ceil(math.log2(4 * (n + nb) + 8)))
    breve = invert_displacement(beta_c, m)
    # grad beta composed with the inverse map, then M = (Id + grad beta)^T o inverse
    gb = np.stack([np.stack([1j * np.arange(-nb, nb + 1)[:, None] * beta_c[k], 1j * np.arange(-nb, nb + 1)[None, :] * beta_c[k]]) for k in range(2)])
    gb_inv = _compose_with(gb, breve).real  # (comp k, deriv i, m, m): d_i beta_k at y + breve
    _, bs, _ = _symbols(n)
    vel = bs * u_field.coeffs  # B(U psi) coefficients
    vel_inv = _compose_with(vel, breve).real  # B^{-1}[B(U psi)] on the grid
    # (M^T w)_i = w_i + sum_k d_k beta_i w_k, everything evaluated at y + breve(y)
    a_grid = np.empty((2, m, m))
    for i in range(2):
        a_grid[i] = -(vel_inv[i] + gb_inv[i, 0] * vel_inv[0] + gb_inv[i, 1] * vel_inv[1])
    grad_psi = coeffs_to_grid(np.stack([1j * box_grid(n, 2)[k] * psi.resized(n).coeffs for k in range(2)]), m, (1, 2)).real
    adv = grid_to_coeffs(a_grid[0] * grad_psi[0] + a_grid[1] * grad_psi[1], n, (0, 1))
    adv[n, n] = 0.0
    a_coeffs = grid_to_coeffs(a_grid, m // 2 - 1, (1, 2))
    RQ = Field2(Q.coeffs - adv, check=False)
    return a_coeffs, RQ, Q
