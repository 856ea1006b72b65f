import numpy as np
import pytest

from betaplane.dynamics import Forcing, ModelParams, g_lambda
from betaplane.lattice import MomentumMap, TravelingField, parity_check, project_mean, sobolev_norm
from betaplane.wave import lattice_jacobian, newton_solve, traveling_transport, wave_residual


def test_zero_forcing_gives_zero_wave():
    p = ModelParams(lam=100.0)
    sol = newton_solve(p, Forcing.zero(p.mmap, 8, 8))
    assert sol.iterations == 1
    assert not np.any(sol.v.profile)


def test_residual_at_g_is_pure_transport():
    p = ModelParams(lam=100.0, N_phi=6, N_x=6)
    f = Forcing.default(p.mmap, 6, 6)
    g = g_lambda(f, p)
    res = wave_residual(g, p, f)
    nonlin, _ = traveling_transport(g, g)
    scale = np.abs(nonlin.profile).max()
    assert np.abs(res.profile - nonlin.profile).max() <= 1e-12 * scale


def test_single_wave_vector_is_exact():
    # one wave vector: B(v).grad v vanishes and g_lambda already solves the equation
    mmap = MomentumMap(((1, 0),))
    p = ModelParams(lam=100.0, mmap=mmap, omega=(1.5,), N_phi=6, N_x=6)
    f = Forcing.default(mmap, 6, 6)
    g = g_lambda(f, p)
    assert np.abs(wave_residual(g, p, f).profile).max() <= 1e-12 * np.abs(g.profile).max()
    sol = newton_solve(p, f, tol=1e-12)
    assert sol.iterations == 0


def test_newton_converges_quadratically(wave100):
    sol = wave100
    assert sol.residual_norm <= 1e-12
    assert sol.iterations <= 8
    h = sol.history
    # once in the basin each residual is bounded by a fixed multiple of the square of the last
    # the last step lands on the rounding floor and is excluded
    consts = [h[k + 1] / h[k] ** 2 for k in range(len(h) - 1) if h[k] < 1e-1 and h[k + 1] > 1e-13]
    assert consts and max(consts) < 1e3


def test_wave_is_odd_zero_mean_and_on_lattice(wave100):
    v = wave100.v
    assert parity_check(v, "odd")
    qp = v.to_qp()
    mean, _ = project_mean(qp)
    assert not np.any(mean.coeffs)
    mask = TravelingField.support_mask(v.N_phi, v.mmap, wave100.params.N_x)
    assert not np.any(v.profile[~mask])


def test_initial_guess_independence(wave100, forcing100):
    p = wave100.params
    other = newton_solve(p, forcing100, tol=1e-12, max_iter=10, v_init=wave100.g * 1.01)
    diff = sobolev_norm(other.v - wave100.v, p.s)
    assert diff <= 1e-8 * sobolev_norm(wave100.v, p.s)


def test_jacobian_matches_finite_differences():
    p = ModelParams(lam=100.0, N_phi=4, N_x=4)
    f = Forcing.default(p.mmap, 4, 4)
    v = newton_solve(p, f, tol=1e-6).v
    mask = TravelingField.support_mask(4, p.mmap, 4)
    index = np.argwhere(mask) - 4
    pos = tuple((index + 4).T)
    jac = lattice_jacobian(v, p, index)
    rng = np.random.default_rng(0)
    d = np.zeros_like(v.profile)
    d[pos] = 1j * rng.standard_normal(len(index))
    # real fields only: purely imaginary, odd profiles
    d = 0.5 * (d - np.flip(d))
    h = 1e-4
    plus = wave_residual(v.with_profile(v.profile + h * d), p, f).profile[pos]
    minus = wave_residual(v.with_profile(v.profile - h * d), p, f).profile[pos]
    fd = (plus - minus) / (2 * h)
    # the residual is quadratic, so the central difference is exact up to rounding
    assert np.abs(jac @ d[pos] - fd).max() <= 1e-8 * np.abs(fd).max()


def test_correction_smaller_than_leading_term():
    ratios = []
    lams = [50.0, 100.0, 200.0]
    for lam in lams:
        p = ModelParams(lam=lam)
        sol = newton_solve(p, Forcing.default(p.mmap, 8, 8), tol=1e-11)
        ratios.append(sobolev_norm(sol.z, p.s) / sobolev_norm(sol.g, p.s))
    assert ratios[0] > ratios[1] > ratios[2]
    assert max(ratios) < 1


def test_wave_solution_metadata(wave100):
    assert len(wave100.params_hash) == 16
    assert wave100.omega == wave100.params.omega
    z = wave100.z
    assert np.allclose(z.profile + wave100.g.profile, wave100.v.profile)
