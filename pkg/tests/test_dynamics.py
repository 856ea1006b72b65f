import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from betaplane.dynamics import (
    Forcing,
    ModelParams,
    apply_L,
    biot_savart,
    dispersion_symbol,
    first_melnikov_check,
    full_vector_field,
    g_lambda,
    integrate,
    transport_nonlinearity,
)
from betaplane.errors import DivergenceError, PreconditionError, ResonanceError
from betaplane.lattice import (
    Field2,
    MomentumMap,
    TravelingField,
    box_grid,
    field_l2_pairing,
    sobolev_norm,
)

seeds = st.integers(0, 2**32 - 1)


def cos_mode(n, j, amp=1.0):
    j = tuple(j)
    return Field2.from_modes(n, {j: amp / 2, (-j[0], -j[1]): amp / 2})


# ---------------------------------------------------------------- symbols


@pytest.mark.parametrize("j, expected", [((1, 0), 1.0), ((0, 3), 0.0), ((2, 1), 0.4)])
def test_dispersion_symbol(j, expected):
    assert dispersion_symbol(j) == pytest.approx(expected, abs=1e-15)


def test_dispersion_symbol_rejects_zero():
    with pytest.raises(PreconditionError):
        dispersion_symbol((0, 0))


def test_biot_savart_single_mode():
    c = np.zeros((3, 3), dtype=complex)
    c[2, 1] = 1.0  # e^{i x1}
    u1, u2 = biot_savart(Field2(c, check=False))
    assert u1.coeffs[2, 1] == 0
    assert u2.coeffs[2, 1] == pytest.approx(-1j)
    z1, z2 = biot_savart(Field2.zeros(3))
    assert not np.any(z1.coeffs) and not np.any(z2.coeffs)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), seeds, st.floats(1, 4))
def test_biot_savart_identities(n, seed, s):
    v = Field2.random(n, np.random.default_rng(seed))
    u1, u2 = biot_savart(v)
    j = box_grid(n, 2)
    assert np.abs(j[0] * u1.coeffs + j[1] * u2.coeffs).max() < 1e-15 * max(1, np.abs(v.coeffs).max())
    assert u1.coeffs[n, n] == 0 and u2.coeffs[n, n] == 0
    # |factor| = 1/|j| = 1/<j> off zero: the H^s bound is attained exactly
    vel = np.hypot(sobolev_norm(u1, s), sobolev_norm(u2, s))
    assert vel == pytest.approx(sobolev_norm(v, s - 1), rel=1e-12)


# ---------------------------------------------------------------- skew-adjointness


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), seeds, st.floats(-3, 3).filter(lambda b: abs(b) > 1e-3))
def test_dispersion_is_skew(n, seed, beta):
    v = Field2.random(n, np.random.default_rng(seed))
    assert abs(field_l2_pairing(apply_L(v, beta), v)) <= 1e-10 * max(1, sobolev_norm(v, 0) ** 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), seeds)
def test_transport_is_skew(n, seed):
    rng = np.random.default_rng(seed)
    a, w = Field2.random(n, rng), Field2.random(n, rng)
    pair = field_l2_pairing(transport_nonlinearity(a, w), w)
    assert abs(pair) <= 1e-10 * max(1, sobolev_norm(a, 1) * sobolev_norm(w, 0) ** 2)


# ---------------------------------------------------------------- transport


def test_transport_cos_x1_vanishes():
    w = cos_mode(4, (1, 0))
    assert np.abs(transport_nonlinearity(w, w).coeffs).max() < 1e-15


def test_transport_with_zero():
    w = Field2.random(4, np.random.default_rng(0))
    assert not np.any(transport_nonlinearity(w, Field2.zeros(4)).coeffs)


def test_transport_two_mode_convolution():
    """Hand convolution: B(cos x1) = (0, sin x1), grad cos x2 = (0, -sin x2)."""
    out = transport_nonlinearity(cos_mode(3, (1, 0)), cos_mode(3, (0, 1)))
    # -B(w1).grad(w2) = sin x1 sin x2 = (cos(x1 - x2) - cos(x1 + x2)) / 2
    expected = cos_mode(3, (1, -1), 0.5).coeffs - cos_mode(3, (1, 1), 0.5).coeffs
    assert np.abs(out.coeffs - expected).max() < 1e-15


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), seeds)
def test_transport_output_zero_mean_and_real(n, seed):
    rng = np.random.default_rng(seed)
    out = transport_nonlinearity(Field2.random(n, rng), Field2.random(n, rng))
    assert out.coeffs[n, n] == 0
    assert out.is_real()


def test_transport_bound_constant_stable():
    """|N[w, w]|_s <= C |w|_{s+1}^2: the corpus constant agrees between halves."""
    s = 2.0
    rng = np.random.default_rng(11)
    ratios = []
    for _ in range(60):
        w = Field2.random(6, rng, decay=s + 2)
        ratios.append(sobolev_norm(transport_nonlinearity(w, w), s) / sobolev_norm(w, s + 1) ** 2)
    a, b = max(ratios[:30]), max(ratios[30:])
    assert a < 10 and abs(a - b) / max(a, b) < 0.5


# ---------------------------------------------------------------- vector field and forcing


def test_vector_field_at_zero_is_forcing():
    p = ModelParams(lam=50.0, N_phi=4, N_x=4)
    f = Forcing.default(p.mmap, 4, 4)
    out = full_vector_field(0.3, Field2.zeros(4), p, f)
    expected = p.lam**p.alpha * f.slice_array(p.lam * p.omega_vec * 0.3, 4)
    assert np.abs(out.coeffs - expected).max() == 0


def test_vector_field_single_mode_linear_part():
    p = ModelParams(lam=50.0)
    f = Forcing.zero(p.mmap, 2, 3)
    v = cos_mode(3, (2, 1))
    out = full_vector_field(0.0, v, p, f)
    assert out.coeffs[5, 4] == pytest.approx(1j * 0.4 * 0.5)


def test_forcing_slice_translation():
    """f(phi - pi(s), x) = f(phi, x + s): slice coefficients pick up e^{i j.s}."""
    mmap = MomentumMap.default()
    f = Forcing.default(mmap, 2, 3)
    rng = np.random.default_rng(5)
    phi, shift = rng.uniform(0, 2 * np.pi, (2, 2))
    j = box_grid(3, 2)
    lhs = f.slice_array(phi - mmap.forward(shift), 3)
    rhs = f.slice_array(phi, 3) * np.exp(1j * np.tensordot(shift, j, axes=(0, 0)))
    assert np.abs(lhs - rhs).max() < 1e-13


def test_forcing_validation():
    mmap = MomentumMap.default()
    with pytest.raises(PreconditionError):
        Forcing.from_triples([((1, 0), (-1, 0), 1.0, "sin")], mmap, 2, 2)
    with pytest.raises(PreconditionError):
        Forcing.from_triples([((1, 0), (0, 0), 1.0)], mmap, 2, 2)
    f = Forcing.from_triples([((1, 0), (-1, 0), 2.0)], mmap, 2, 2)
    assert f.qp.coeffs[3, 2, 1, 2] == 1.0


# ---------------------------------------------------------------- g_lambda


def test_g_lambda_worked_example():
    p = ModelParams(lam=10.0, omega=(1.1, 1.3), N_phi=2, N_x=2)
    f = Forcing.from_triples([((1, 0), (-1, 0), 2.0)], p.mmap, 2, 2)
    g = g_lambda(f, p, screen=False)
    # divisor i(10 * 1.1 - L(-1, 0)) = 12i
    assert g.profile[3, 2] == pytest.approx(10**1.5 / 12j, abs=1e-12)
    assert g.profile[3, 2] == pytest.approx(-2.635j, abs=5e-4)


def g_residual(g, f, p):
    ell = box_grid(g.N_phi, p.nu)
    j = TravelingField.momenta(g.N_phi, p.mmap).astype(float)
    r2 = np.maximum((j**2).sum(0), 1.0)
    op = 1j * (p.lam * np.tensordot(p.omega_vec, ell, axes=(0, 0)) - p.beta * j[0] / r2)
    return op * g.profile - p.lam**p.alpha * f.traveling_profile().profile


@pytest.mark.parametrize("lam", [50.0, 100.0, 200.0, 400.0])
def test_g_lambda_residual(lam):
    p = ModelParams(lam=lam)
    f = Forcing.default(p.mmap, p.N_phi, p.N_x)
    g = g_lambda(f, p)
    res = g_residual(g, f, p)
    assert np.abs(res).max() <= 1e-10 * p.lam**p.alpha * np.abs(f.traveling_profile().profile).max()


def test_g_lambda_of_zero():
    p = ModelParams(lam=100.0)
    g = g_lambda(Forcing.zero(p.mmap, 8, 8), p)
    assert not np.any(g.profile)


def test_g_lambda_growth_exponent():
    lams = np.array([50.0, 100.0, 200.0, 400.0])
    norms = []
    for lam in lams:
        p = ModelParams(lam=lam)
        norms.append(sobolev_norm(g_lambda(Forcing.default(p.mmap, 8, 8), p), p.s))
    slope = np.polyfit(np.log(lams), np.log(norms), 1)[0]
    assert abs(slope - 0.5) <= 0.05


def test_resonant_frequency_is_named():
    # lambda omega_1 = L(-1, 0) = -1 makes the ((1,0), (-1,0)) divisor vanish
    p = ModelParams(lam=100.0, omega=(-0.01, 1.5))
    with pytest.raises(ResonanceError) as err:
        first_melnikov_check(p)
    assert err.value.index is not None
    with pytest.raises(ResonanceError):
        g_lambda(Forcing.default(p.mmap, 8, 8), p)


# ---------------------------------------------------------------- integrator


def test_single_mode_exact_rotation():
    p = ModelParams(lam=50.0)
    f = Forcing.zero(p.mmap, 2, 4)
    v0 = cos_mode(4, (1, 2))
    traj = integrate(v0, (0.0, 3.0), p, f, dt=0.05, sample_every=1)
    drift = max(abs(sobolev_norm(v, 0) - sobolev_norm(v0, 0)) for v in traj.states)
    assert drift / 3.0 <= 1e-12
    phase = np.exp(1j * dispersion_symbol((1, 2)) * 3.0)
    assert traj.states[-1].coeffs[5, 6] == pytest.approx(0.5 * phase, abs=1e-13)


def test_energy_identity():
    """d/dt |v|^2 = 2 <lambda^alpha f(lambda omega t), v> along the flow."""
    p = ModelParams(lam=10.0, N_phi=4, N_x=4)
    f = Forcing.default(p.mmap, 4, 4)
    v0 = Field2.random(4, np.random.default_rng(3), decay=3.0)
    dt = 2e-4
    traj = integrate(v0, (0.0, 0.05), p, f, dt=dt, sample_every=1)
    e = np.array([sobolev_norm(v, 0) ** 2 for v in traj.states])
    t = traj.times
    deriv = np.gradient(e, t, edge_order=2)
    amp = p.lam**p.alpha
    pairing = np.array([2 * amp * field_l2_pairing(f.slice(p.lam * p.omega_vec * tk, 4), v) for tk, v in zip(t, traj.states)])
    scale = np.abs(pairing).max()
    assert np.abs(deriv - pairing)[2:-2].max() <= 1e-5 * scale


def test_fourth_order_self_convergence():
    p = ModelParams(lam=10.0, N_phi=4, N_x=6)
    f = Forcing.default(p.mmap, 4, 6)
    v0 = Field2.random(6, np.random.default_rng(8), decay=3.0) * 3.0
    ref = integrate(v0, (0, 0.4), p, f, dt=0.4 / 1600).states[-1]
    errs = []
    for k in (50, 100, 200):
        out = integrate(v0, (0, 0.4), p, f, dt=0.4 / k).states[-1]
        errs.append(sobolev_norm(out - ref, 0))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(12 <= r <= 20 for r in ratios), ratios


def test_reality_and_mean_preserved():
    p = ModelParams(lam=10.0, N_phi=4, N_x=4)
    f = Forcing.default(p.mmap, 4, 4)
    traj = integrate(Field2.random(4, np.random.default_rng(1)), (0, 0.1), p, f, dt=1e-3, sample_every=10)
    for v in traj.states:
        assert v.is_real() and v.coeffs[4, 4] == 0


def test_traveling_wave_invariance(small_wave):
    wave = small_wave
    p = wave.params
    f = Forcing.default(p.mmap, p.N_phi, p.N_x)
    v0 = Field2(wave.slice_array(0.0), check=False)
    errs = []
    for steps in (2000, 4000):
        traj = integrate(v0, (0.0, 1.0), p, f, dt=1.0 / steps, sample_every=steps // 10)
        errs.append(max(sobolev_norm(v - Field2(wave.slice_array(t), check=False), p.s) for t, v in zip(traj.times, traj.states)))
    scale = sobolev_norm(wave.v, p.s)
    assert errs[1] <= 1e-6 * scale
    # time-discretization dominated: the deviation shrinks with dt
    assert errs[1] < errs[0]


def test_cfl_guard_and_ceiling():
    p = ModelParams(lam=10.0, N_phi=2, N_x=4)
    f = Forcing.default(p.mmap, 2, 4)
    big = Field2.random(4, np.random.default_rng(2)) * 1e3
    with pytest.raises(PreconditionError):
        integrate(big, (0, 1), p, f, dt=0.5)
    with pytest.raises(DivergenceError) as err:
        integrate(Field2.random(4, np.random.default_rng(2)), (0, 1.0), p, f, dt=1e-3, ceiling=1e-3)
    assert err.value.last_time is not None
