import numpy as np
import pytest

from betaplane.dynamics import Forcing, ModelParams, dispersion_array, full_vector_field
from betaplane.errors import PreconditionError, ResonanceError
from betaplane.lattice import Field2, MomentumMap, TravelingField, sobolev_norm
from betaplane.operators import MomentumOperator, mode_basis
from betaplane.reduction import (
    ReductionSchedule,
    diophantine_check,
    floquet_spectrum,
    kam_reduce,
    linearize,
    melnikov_measure,
    order_reduce,
    reduce_linearized,
    straighten_transport,
    transformed_nonlinearity,
)
from betaplane.wave import newton_solve


def test_schedule_constants():
    p = ModelParams(lam=100.0)
    sch = ReductionSchedule.from_params(p)
    assert (sch.tau, sch.M) == (6, 13)
    assert sch.M > (1 - p.c) / (2 * (1 - p.c) - p.alpha)
    assert (sch.tau1, sch.a, sch.b) == (39, 79, 80)
    assert sch.N(-1) == 1.0 and sch.N(0) == 4.0 and sch.N(1) == pytest.approx(8.0)


# ---------------------------------------------------------------- linearization


def test_linearization_of_zero_wave():
    p = ModelParams(lam=100.0, N_phi=4, N_x=4)
    lin = linearize(newton_solve(p, Forcing.zero(p.mmap, 4, 4)))
    assert not np.any(lin.E0.C) and not np.any(lin.transport.C)
    assert all(not np.any(a.profile) for a in lin.a0)


def test_linearization_matches_finite_differences(small_wave):
    p = small_wave.params
    lin = linearize(small_wave)
    zero = Forcing.zero(p.mmap, 1, p.N_x)
    rng = np.random.default_rng(1)
    for _ in range(3):
        phi = rng.uniform(0, 2 * np.pi, 2)
        v = small_wave.v.slice(phi)
        h = Field2.random(p.N_x, rng)
        eps = 1e-5
        fd = (full_vector_field(0, v + h * eps, p, zero).coeffs - full_vector_field(0, v - h * eps, p, zero).coeffs) / (2 * eps)
        out = lin.full.apply(phi, h).coeffs
        assert np.abs(out - fd).max() <= 1e-6 * np.abs(fd).max()


def test_linearized_operator_flags(small_wave):
    lin = linearize(small_wave)
    full = lin.full
    assert full.is_real() and full.is_reversible() and full.is_momentum_preserving()
    # div a0 = 0 and zero x-average, exactly in coefficients
    j = TravelingField.momenta(small_wave.v.N_phi, small_wave.v.mmap)
    a1, a2 = (a.profile for a in lin.a0)
    assert np.abs(j[0] * a1 + j[1] * a2).max() < 1e-12 * np.abs(a1).max()


def test_E0_bounded_by_lambda_theta(wave100):
    lin = linearize(wave100)
    p = wave100.params
    assert lin.E0.decay_norm(-1, 0) <= 10 * p.lam**p.theta


# ---------------------------------------------------------------- straightening


def traveling_pair(mmap, n_phi, entries):
    """Two traveling components from {(component, l): value}."""
    profs = [np.zeros((2 * n_phi + 1,) * 2, dtype=complex) for _ in range(2)]
    for (k, ell), val in entries.items():
        profs[k][ell[0] + n_phi, ell[1] + n_phi] = val
    return tuple(TravelingField(x, mmap, 16) for x in profs)


def test_straighten_zero():
    p = ModelParams(lam=100.0)
    b = traveling_pair(p.mmap, 2, {})
    st = straighten_transport(b, p)
    assert not np.any(st.beta[0]) and not np.any(st.beta[1])


@pytest.mark.parametrize("method", ["direct", "fixed_point"])
def test_straighten_exact_solution(method):
    """b = (0, eps cos(phi1 - x1)): beta2 depends on phi1 - x1 only, so b.grad beta = 0
    and beta = (0, -eps sin(phi1 - x1) / omega1) solves the equation exactly."""
    p = ModelParams(lam=100.0)
    eps = 1e-2
    b = traveling_pair(p.mmap, 1, {(1, (1, 0)): eps / 2, (1, (-1, 0)): eps / 2})
    st = straighten_transport(b, p, n_beta=3, method=method)
    w1 = p.omega[0]
    expected = np.zeros((7, 7), dtype=complex)
    expected[4, 3] = 1j * eps / (2 * w1)
    expected[2, 3] = -1j * eps / (2 * w1)
    assert np.abs(st.beta[1] - expected).max() <= 1e-14
    assert np.abs(st.beta[0]).max() <= 1e-14
    assert st.residual <= 1e-14


def test_straightening_rejects_resonant_frequency():
    p = ModelParams(lam=100.0, omega=(1.5, 0.0), check_annulus=True)
    with pytest.raises(ResonanceError):
        diophantine_check(p.omega_vec, 2 * p.gamma, p.tau, 4, 2)


def test_stage_one(reduced100):
    rf = reduced100
    p = rf.params
    st = rf.stage_one.straightening
    assert st.residual <= 1e-10
    assert rf.stage_one.b0_norm <= 1e-8 * p.lam
    assert rf.stage_one.comp.min_jacobian > 0
    E1 = rf.stage_one.E1
    assert E1.is_real() and E1.is_reversible() and E1.is_momentum_preserving()
    # modes on the truncation edge couple to the dropped tail; the bound is checked inside
    assert interior(E1).decay_norm(-1, 0) <= p.lam**p.theta
    # straightening displacement is small: lambda^(theta - 1) / gamma
    beta_norm = max(np.abs(b).max() for b in st.beta)
    assert beta_norm <= p.eps / p.gamma


# ---------------------------------------------------------------- order reduction


def interior(op, frac=0.5):
    modes = op.basis.modes
    keep = np.abs(modes).max(1) <= int(frac * op.N_x)
    return op._like(np.where(np.outer(keep, keep), op.C, 0.0))



def test_order_reduction_of_zero():
    p = ModelParams(lam=100.0)
    mmap = p.mmap
    disp = MomentumOperator.diagonal(dispersion_array(3, p.beta)[mode_basis(3).pos], mmap, 3)
    out = order_reduce(MomentumOperator.zero(mmap, 3), disp, p, steps=4)
    assert not np.any(out.Z)
    assert np.array_equal(out.Phi.C, np.eye(len(mode_basis(3))))


def test_order_reduction_single_entry_closed_form():
    """One real coupling pair at l0 != 0. X has no self-products, so the conjugated
    remainder is exactly [beta L, X] at the same entries: i beta (L(j) - L(j')) X."""
    p = ModelParams(lam=100.0)
    mmap, n = p.mmap, 3
    basis = mode_basis(n)
    disp_diag = dispersion_array(n, p.beta)[basis.pos]
    disp = MomentumOperator.diagonal(disp_diag, mmap, n)
    a, b = basis.index[(1, 0)], basis.index[(0, 1)]
    na, nb = basis.index[(-1, 0)], basis.index[(0, -1)]
    eps = 1e-3
    C = np.zeros((len(basis),) * 2, dtype=complex)
    C[a, b] = eps * (0.3 + 0.4j)
    C[na, nb] = np.conj(C[a, b])
    E1 = MomentumOperator(C, mmap, n)
    out = order_reduce(E1, disp, p, steps=2)
    ell = E1.ell[a, b]
    wl = 1j * p.lam * float(np.dot(p.omega_vec, ell))
    expected = np.zeros_like(C)
    for r, c in ((a, b), (na, nb)):
        x = C[r, c] / (1j * p.lam * float(np.dot(p.omega_vec, E1.ell[r, c])))
        expected[r, c] = (disp_diag[r] - disp_diag[c]) * x
    assert np.abs(out.E.C - expected).max() <= 1e-12 * np.abs(expected).max()
    assert not np.any(out.Z)
    assert abs(expected[a, b]) <= eps * 2 / abs(wl)


def test_order_reduction_history(reduced100):
    rf = reduced100
    p = rf.params
    lin = rf.linearized
    # interior part of E1: every step contracts by at least lambda^(theta-1)/gamma
    out = order_reduce(interior(rf.stage_one.E1), lin.dispersion, p)
    norms = [h["norm0"] for h in out.history if h["norm0"] > 1e-13]
    ratios = np.array(norms[1:]) / np.array(norms[:-1])
    assert len(ratios) >= 5 and ratios.max() <= p.eps / p.gamma
    # full box: edge modes slow the decay but the remainder still drops
    full = [h["norm0"] for h in rf.order.history]
    assert full[1] / full[0] <= p.eps / p.gamma
    assert full[-1] <= 1e-2 * full[0]


# ---------------------------------------------------------------- KAM


def test_kam_of_zero_remainder():
    p = ModelParams(lam=100.0)
    mu0 = 1j * np.arange(len(mode_basis(2)), dtype=float)
    out = kam_reduce(mu0, MomentumOperator.zero(p.mmap, 2), p, ReductionSchedule.from_params(p))
    assert np.array_equal(out.mu, mu0)
    assert np.array_equal(out.Phi.C, np.eye(len(mu0)))


def test_kam_one_step_is_quadratic():
    p = ModelParams(lam=100.0)
    n = 2
    basis = mode_basis(n)
    mu0 = dispersion_array(n, p.beta)[basis.pos]
    a, b = basis.index[(1, 0)], basis.index[(0, 1)]
    na, nb = basis.index[(-1, 0)], basis.index[(0, -1)]
    sched = ReductionSchedule.from_params(p, n_max=1, tol_kam=0.0)
    rem = []
    for eps in (1e-2, 1e-3):
        C = np.zeros((len(basis),) * 2, dtype=complex)
        C[a, b] = C[b, a] = eps
        C[na, nb] = C[nb, na] = eps
        out = kam_reduce(mu0, MomentumOperator(C, p.mmap, n), p, sched)
        rem.append(out.remainders[-1])
        assert out.remainders[-1] <= 10 * eps**2 / (p.lam * p.gamma)
    assert rem[0] / rem[1] == pytest.approx(100, rel=0.05)


def test_kam_superlinear(reduced100):
    rem = np.array(reduced100.kam.remainders)
    assert np.all(np.diff(rem) < 0)
    steps = np.diff(np.log(rem))
    assert np.all(np.diff(steps) < 0)


def test_final_eigenvalues(reduced100):
    rf = reduced100
    mu = rf.mu
    basis = rf.basis
    assert np.all(np.abs(mu.real) <= 1e-12 * np.abs(mu))
    assert np.abs(mu[basis.neg] + mu).max() <= 1e-12 * np.abs(mu).max()
    # z(j) |j| stays bounded by lambda^theta away from the truncation edge
    z = mu - dispersion_array(basis.N, rf.params.beta)[basis.pos]
    p = rf.params
    keep = np.abs(basis.modes).max(1) <= basis.N // 2
    assert np.max((np.abs(z) * basis.bracket)[keep]) <= p.lam**p.theta


def test_eigenvalue_history_converges(reduced100):
    hist = reduced100.kam.mu_history
    jumps = np.array([np.abs(b - a).max() for a, b in zip(hist[:-1], hist[1:])])
    # past the largest correction every step shrinks the update by at least 10x
    tail = jumps[int(np.argmax(jumps)) :]
    assert len(tail) >= 2 and np.all(tail[1:] <= 0.1 * tail[:-1])


def test_defect_and_stage_norms(reduced100):
    rf = reduced100
    p = rf.params
    assert rf.defect <= 1e-8 * p.lam**p.theta
    sn = rf.stage_norms
    assert sn["E1"] >= sn["EM"] >= sn["E_final"]
    for op in (rf.U, rf.U_inv, rf.W):
        assert op.is_real(1e-9) and op.is_reversibility_preserving(1e-9)


def test_W_distance_decreases_with_lambda(reduced100):
    p = reduced100.params.replace(lam=400.0)
    rf = reduce_linearized(newton_solve(p, Forcing.default(p.mmap, 8, 8), tol=1e-12, max_iter=10))
    assert rf.W_distance < reduced100.W_distance


def test_floquet_cross_check(reduced100):
    rf = reduced100
    p = rf.params
    mu = floquet_spectrum(rf.linearized, p, reference=rf.mu)
    assert np.abs(mu - rf.mu).max() <= 1e-8 * p.lam**p.theta


def test_zero_wave_reduces_to_dispersion():
    p = ModelParams(lam=100.0, N_phi=4, N_x=4)
    rf = reduce_linearized(newton_solve(p, Forcing.zero(p.mmap, 4, 4)))
    basis = rf.basis
    assert np.abs(rf.U.C - np.eye(len(basis))).max() < 1e-12
    assert np.abs(rf.mu - dispersion_array(4, p.beta)[basis.pos]).max() < 1e-12


def test_pipeline_requires_injective_map():
    # (1, 1) = (1, 0) + (0, 1): pi^T has a kernel
    mmap = MomentumMap(((1, 0), (0, 1), (1, 1)))
    p = ModelParams(lam=100.0, mmap=mmap, omega=(0.8, 0.9, 0.7), N_phi=2, N_x=4)
    sol = newton_solve(p, Forcing.default(mmap, 2, 4))
    with pytest.raises(PreconditionError):
        linearize(sol)


# ---------------------------------------------------------------- Melnikov measure


def test_melnikov_zero_gamma():
    assert melnikov_measure(ModelParams(lam=100.0), 0.0, 1000, 0) == 0.0


def test_melnikov_deterministic():
    p = ModelParams(lam=100.0)
    a = melnikov_measure(p, 0.02, 20000, 7)
    b = melnikov_measure(p, 0.02, 20000, 7)
    assert a == b and 0 < a < 1


def test_melnikov_shrinks_with_lambda():
    fr = []
    for lam in (50.0, 400.0):
        p = ModelParams(lam=lam)
        fr.append(melnikov_measure(p, p.gamma, 20000, 3))
    assert fr[1] < fr[0]


def test_melnikov_rejects_empty_sample():
    with pytest.raises(PreconditionError):
        melnikov_measure(ModelParams(lam=100.0), 0.01, 0, 0)


# ---------------------------------------------------------------- transformed nonlinearity


def test_transformed_nonlinearity(small_reduced):
    rf = small_reduced
    p = rf.params
    basis = rf.basis
    rng = np.random.default_rng(4)
    ratios_a, ratios_r = [], []
    from betaplane.dynamics import transport_nonlinearity

    for _ in range(20):
        phi = rng.uniform(0, 2 * np.pi, 2)
        psi = Field2.random(basis.N, rng) * rng.uniform(0.01, 1)
        a, rq, q = transformed_nonlinearity(rf, psi, phi)
        u = rf.U.apply(phi, psi)
        independent = rf.U_inv.apply(phi, transport_nonlinearity(u, u))
        assert np.abs(q.coeffs - independent.coeffs).max() <= 1e-10 * max(1, np.abs(q.coeffs).max())
        ratios_a.append(np.sqrt(sum(sobolev_norm(Field2(c, check=False), p.s) ** 2 for c in _zero_mean(a))) / sobolev_norm(psi, p.s - 1))
        ratios_r.append(sobolev_norm(rq, p.s) / sobolev_norm(psi, p.s) ** 2)
    assert max(ratios_a) < 10 and max(ratios_r) < 10


def _zero_mean(a):
    out = np.array(a)
    n = out.shape[-1] // 2
    out[:, n, n] = 0
    return out


def test_transformed_nonlinearity_zero_input(small_reduced):
    psi = Field2.zeros(small_reduced.basis.N)
    a, rq, q = transformed_nonlinearity(small_reduced, psi, np.zeros(2))
    assert not np.any(a) and not np.any(rq.coeffs) and not np.any(q.coeffs)


def test_transformed_nonlinearity_identity_case():
    from betaplane.dynamics import biot_savart

    p = ModelParams(lam=100.0, N_phi=4, N_x=4)
    rf = reduce_linearized(newton_solve(p, Forcing.zero(p.mmap, 4, 4)))
    psi = Field2.random(4, np.random.default_rng(0))
    a, rq, _ = transformed_nonlinearity(rf, psi, np.array([0.4, 1.0]))
    u1, u2 = biot_savart(psi)
    n = a.shape[-1] // 2
    got = a[:, n - 4 : n + 5, n - 4 : n + 5]
    assert np.abs(got[0] + u1.coeffs).max() < 1e-12 and np.abs(got[1] + u2.coeffs).max() < 1e-12
    assert np.abs(rq.coeffs).max() < 1e-12
