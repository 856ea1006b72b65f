"""Nonlinear stability experiments around a traveling wave.

The perturbation w = v - v_lambda(lambda omega t, .) obeys
    d_t w = beta L w - B(v_t).grad w - B(w).grad v_t - B(w).grad w,
with v_t the wave slice. Everything here works on the centred box |j|_inf <= N_x.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    ETDRK4,
    Forcing,
    ModelParams,
    _realify,
    _symbols,
    _sup_velocity,
    dispersion_array,
    g_lambda,
    integrate,
    run_etdrk4,
    transport_array,
)
from .errors import DivergenceError, InconclusiveError, PreconditionError
from .lattice import Field2, TravelingField, bracket, box_grid, coeffs_to_grid, dealias_size, grid_to_coeffs, sobolev_norm
from .wave import WaveSolution


def hs_norm_array(c, s):
    n = c.shape[0] // 2
    w = bracket(box_grid(n, 2)) ** s
    return float(np.sqrt(np.sum(np.abs(w * c) ** 2)))


class WaveSlicer:
    """Fast evaluation of x-coefficients of v(phi, .) for a traveling profile."""

    def __init__(self, v: TravelingField, n):
        ell = box_grid(v.N_phi, v.nu).reshape(v.nu, -1)
        j = -v.mmap.transpose(ell)
        vals = v.profile.reshape(-1)
        keep = (np.max(np.abs(j), axis=0) <= n) & (vals != 0) & np.any(j != 0, axis=0)
        self.n = n
        self.ell = ell[:, keep].T.astype(float)
        self.vals = vals[keep]
        self.flat = (j[0, keep] + n) * (2 * n + 1) + (j[1, keep] + n)

    def __call__(self, phi):
        size = (2 * self.n + 1) ** 2
        z = self.vals * np.exp(1j * (self.ell @ np.asarray(phi, dtype=float)))
        out = np.bincount(self.flat, weights=z.real, minlength=size) + 1j * np.bincount(self.flat, weights=z.imag, minlength=size)
        return out.reshape(2 * self.n + 1, 2 * self.n + 1)


def comoving_velocity(p: ModelParams):
    """c = P^T lambda omega: for injective maps v_lambda(lambda omega t, x) = v_lambda(0, x - c t)."""
    return p.mmap.left_inverse().T @ (p.lam * p.omega_vec)


def resolve_frame(p: ModelParams, frame):
    if frame == "auto":
        return "lab"
    if frame == "comoving" and not p.mmap.injective:
        raise PreconditionError("comoving frame needs an injective momentum map")
    if frame not in ("lab", "comoving"):
        raise PreconditionError(f"unknown frame {frame!r}")
    return frame


def default_dt(p: ModelParams, wave: WaveSolution, n=None, safety=0.25, frame="lab"):
    """Step from the CFL number and, in the lab frame, the fastest phase lambda |omega|_1 N_phi."""
    n = p.N_x if n is None else n
    vel = _sup_velocity(WaveSlicer(wave.v, n)(np.zeros(p.nu)), n)
    fast = p.lam * float(np.abs(p.omega_vec).sum()) * wave.v.N_phi if resolve_frame(p, frame) == "lab" else 0.0
    return safety / max(fast, 4 * vel * n, 1.0)


def random_perturbation(n, delta, s, rng, decay=2.0):
    """Random real zero-mean odd field with |w|_{H^s} = delta."""
    if delta < 0:
        raise PreconditionError("delta must be non-negative")
    w = Field2.random(n, rng, decay=decay, odd=True)
    norm = sobolev_norm(w, s)
    return w * (delta / norm) if delta > 0 else w * 0.0


# ---------------------------------------------------------------- runs


@dataclass
class StabilityRun:
    delta: float
    s: float
    times: np.ndarray
    norms: np.ndarray
    tail_norms: np.ndarray  # companion trace at s - 1
    T_star: float
    censored: bool
    diverged: bool
    horizon: float
    params_hash: str
    seed: int | None = None
    final: Field2 | None = None
    extra: dict = field(default_factory=dict)


def first_crossing(times, values, level):
    """First time the sampled trace reaches ``level``, linearly interpolated; None if never."""
    values = np.asarray(values)
    above = np.nonzero(values >= level)[0]
    if len(above) == 0:
        return None
    k = int(above[0])
    if k == 0:
        return float(times[0])
    t0, t1, y0, y1 = times[k - 1], times[k], values[k - 1], values[k]
    return float(t0 + (level - y0) * (t1 - t0) / (y1 - y0))


def perturbation_rhs(wave: WaveSolution, n, linear=False, frame="lab"):
    """Explicit part of the w-equation (everything except the diagonal linear part).

    In the comoving frame the wave slice is frozen at phi = 0.
    """
    p = wave.params
    slicer = WaveSlicer(wave.v, n)
    lw = p.lam * p.omega_vec
    frozen = slicer(np.zeros(p.nu)) if frame == "comoving" else None
    m = dealias_size(n)
    _, bs, grad = _symbols(n)

    def rhs(t, w):
        v = frozen if frozen is not None else slicer(lw * t)
        # one batched transform: velocities and gradients of v and w
        g = coeffs_to_grid(np.stack([bs[0] * v, bs[1] * v, bs[0] * w, bs[1] * w, grad[0] * v, grad[1] * v, grad[0] * w, grad[1] * w]), m, (1, 2)).real
        ux, uy = g[0], g[1]
        if not linear:
            ux, uy = ux + g[2], uy + g[3]
        prod = ux * g[6] + uy * g[7] + g[2] * g[4] + g[3] * g[5]
        out = grid_to_coeffs(-prod, n, (0, 1))
        out[n, n] = 0.0
        return out

    return rhs


def integrate_perturbation(
    w0: Field2,
    horizon,
    p: ModelParams,
    wave: WaveSolution,
    dt=None,
    sample_every=10,
    delta=None,
    ceiling_factor=1e3,
    stop_at_escape=True,
    linear=False,
    seed=None,
    frame="auto",
):
    """Integrate the w-equation; T_star is the first time |w|_{H^s} reaches 2 delta.

    frame="comoving" (injective maps only) integrates w(t, y + c t), in which
    the wave is stationary and the translation is part of the exact linear
    step. H^s norms are translation invariant, so traces are unchanged; the
    returned final state is mapped back to the lab frame. It allows a larger
    step but its error constant is far larger, so "auto" selects the lab frame.
    """
    n = w0.N
    s = p.s
    frame = resolve_frame(p, frame)
    delta = sobolev_norm(w0, s) if delta is None else float(delta)
    if sobolev_norm(w0, s) > delta * (1 + 1e-12) + 1e-300:
        raise PreconditionError("|w0|_{H^s} exceeds delta")
    dt = default_dt(p, wave, n, frame=frame) if dt is None else dt
    rhs = perturbation_rhs(wave, n, linear=linear, frame=frame)
    n_steps = max(1, int(math.ceil(horizon / dt)))
    h = horizon / n_steps
    lin = dispersion_array(n, p.beta)
    jj = box_grid(n, 2)
    if frame == "comoving":
        vel = comoving_velocity(p)
        lin = lin + 1j * (vel[0] * jj[0] + vel[1] * jj[1])
    scheme = ETDRK4(lin, h)
    u = np.array(w0.coeffs, dtype=complex)
    times, norms, tails = [0.0], [hs_norm_array(u, s)], [hs_norm_array(u, s - 1)]
    ceiling = ceiling_factor * max(delta, 1e-300)
    diverged = False
    for k in range(1, n_steps + 1):
        # blow-up is caught by the ceiling check below
        with np.errstate(over="ignore", invalid="ignore"):
            u = _realify(scheme.step((k - 1) * h, u, rhs))
        if k % sample_every and k != n_steps:
            continue
        val = hs_norm_array(u, s)
        times.append(k * h)
        norms.append(val)
        tails.append(hs_norm_array(u, s - 1))
        if not np.isfinite(val) or val > ceiling:
            diverged = True
            break
        if stop_at_escape and delta > 0 and val >= 2 * delta:
            break
    times, norms = np.array(times), np.array(norms)
    if frame == "comoving":
        q = comoving_velocity(p) * times[-1]
        u = u * np.exp(-1j * (q[0] * jj[0] + q[1] * jj[1]))
    t_star = first_crossing(times, norms, 2 * delta) if delta > 0 else None
    return StabilityRun(
        delta=delta,
        s=s,
        times=times,
        norms=norms,
        tail_norms=np.array(tails),
        T_star=t_star if t_star is not None else float(horizon),
        censored=t_star is None,
        diverged=diverged,
        horizon=float(horizon),
        params_hash=wave.params_hash,
        seed=seed,
        final=Field2(u, check=False),
    )


def integrate_full_minus_wave(w0: Field2, horizon, p: ModelParams, f: Forcing, wave: WaveSolution, dt=None, sample_every=10):
    """Second path: integrate v from v_lambda(0) + w0 and subtract the wave slice."""
    n = w0.N
    dt = default_dt(p, wave, n) if dt is None else dt
    n_steps = max(1, int(math.ceil(horizon / dt)))
    slicer = WaveSlicer(wave.v, n)
    v0 = Field2(slicer(np.zeros(p.nu)) + w0.coeffs, check=False)
    traj = integrate(v0, (0.0, horizon), p, f, horizon / n_steps, sample_every=sample_every, ceiling=None)
    lw = p.lam * p.omega_vec
    ws = [Field2(st.coeffs - slicer(lw * t), check=False) for t, st in zip(traj.times, traj.states)]
    return traj.times, ws


# ---------------------------------------------------------------- transformed dynamics


def integrate_transformed(psi0: Field2, horizon, reduced, p: ModelParams, dt=None, sample_every=10, nonlinear=True):
    """d_t psi = D psi + Q(lambda omega t, psi), D = diag(mu) exact, Q by ETDRK4 quadrature.

    Returns (times, psi norms in H^s, final psi as mode vector).
    """
    basis = reduced.basis
    n = basis.N
    mu = reduced.mu
    lw = p.lam * p.omega_vec
    if dt is None:
        dt = 0.25 / max(p.lam * float(np.abs(p.omega_vec).sum()) * reduced.U.ell.max(), 1.0)
    weights = bracket(basis.modes.T) ** p.s
    U, U_inv = reduced.U, reduced.U_inv

    def rhs(t, vec):
        if not nonlinear:
            return np.zeros_like(vec)
        phi = lw * t
        w = basis.field(U.apply_vec(phi, vec))
        nl = Field2(transport_array(w.coeffs, w.coeffs, n), check=False)
        return U_inv.apply_vec(phi, basis.vector(nl))

    traj = run_etdrk4(basis.vector(psi0), 0.0, horizon, dt, mu, rhs, sample_every=sample_every)
    norms = np.array([float(np.linalg.norm(weights * x)) for x in traj.states])
    return traj.times, norms, traj.states


def conjugated_linear_flow(w0: Field2, times, reduced, p: ModelParams):
    """U(lambda omega t) e^{D t} U(0)^{-1} w0 at each requested time."""
    basis = reduced.basis
    lw = p.lam * p.omega_vec
    psi0 = reduced.U_inv.apply_vec(np.zeros(p.nu), basis.vector(w0))
    return [basis.field(reduced.U.apply_vec(lw * t, np.exp(reduced.mu * t) * psi0)) for t in times]


def fit_energy_constant(times, norms):
    """Smallest C with finite-differenced d_t |psi| <= C |psi|^2 on the trace."""
    dn = np.diff(norms) / np.diff(times)
    mid = 0.5 * (norms[1:] + norms[:-1])
    ok = mid > 0
    return float(np.max(dn[ok] / mid[ok] ** 2, initial=0.0))


# ---------------------------------------------------------------- sweeps


def fit_power(x, y):
    """Exponent and prefactor of y ~ C x^k by least squares in log-log."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 2:
        raise InconclusiveError("need at least two points to fit an exponent")
    k, logc = np.polyfit(np.log(x), np.log(y), 1)
    return float(k), float(np.exp(logc))


@dataclass
class SweepTable:
    rows: list  # dicts: delta, T_star, censored, diverged, horizon, seed
    exponent: float | None
    prefactor: float | None

    def uncensored(self):
        return [r for r in self.rows if not r["censored"]]


def delta_ceiling(p: ModelParams):
    return p.lam**p.theta / 6.0


def escape_time_sweep(
    deltas,
    p: ModelParams,
    wave: WaveSolution,
    horizon_factor=2.0,
    seed=0,
    n=None,
    dt=None,
    sample_every=5,
    extend=True,
    shape=None,
    frame="auto",
):
    """Escape times for decreasing deltas with a common perturbation shape.

    Horizon for each delta is horizon_factor / delta; a censored row is re-run
    once with twice the horizon. The exponent p in T_star ~ delta^p uses
    uncensored rows only.
    """
    deltas = [float(d) for d in deltas]
    if any(d <= 0 for d in deltas):
        raise PreconditionError("every delta must be positive")
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise PreconditionError("deltas must be strictly decreasing")
    if deltas[0] >= delta_ceiling(p):
        raise PreconditionError(f"delta {deltas[0]:g} exceeds lambda^theta/6 = {delta_ceiling(p):g}")
    n = p.N_x if n is None else n
    dt = default_dt(p, wave, n, frame=frame) if dt is None else dt
    if shape is None:
        shape = random_perturbation(n, 1.0, p.s, np.random.default_rng(seed))
    rows = []
    for d in deltas:
        horizon = horizon_factor / d
        run = integrate_perturbation(shape * d, horizon, p, wave, dt=dt, sample_every=sample_every, delta=d, seed=seed, frame=frame)
        if run.censored and extend and not run.diverged:
            horizon *= 2
            run = integrate_perturbation(shape * d, horizon, p, wave, dt=dt, sample_every=sample_every, delta=d, seed=seed, frame=frame)
        rows.append(
            {
                "delta": d,
                "T_star": run.T_star,
                "censored": run.censored,
                "diverged": run.diverged,
                "horizon": horizon,
                "seed": seed,
            }
        )
    good = [r for r in rows if not r["censored"]]
    if not good:
        warnings.warn("all sweep rows censored: raise horizon_factor", stacklevel=2)
        return SweepTable(rows, None, None)
    if len(good) < 2:
        return SweepTable(rows, None, None)
    k, c = fit_power([r["delta"] for r in good], [r["T_star"] for r in good])
    return SweepTable(rows, k, c)


def amplitude_bounds_check(lams, template: ModelParams, f: Forcing, horizon=0.5, delta_frac=1e-3, seed=0, newton_tol=1e-9):
    """sup_t |v(t)|_{H^s} along runs started near v_lambda(0), and the g_lambda-only probe.

    Rows for lambdas whose construction fails are kept with a reason and excluded
    from the fits.
    """
    from .errors import BetaPlaneError
    from .wave import newton_solve

    rows = []
    for lam in lams:
        p = template.replace(lam=float(lam))
        try:
            wave = newton_solve(p, f, tol=newton_tol)
        except BetaPlaneError as exc:
            rows.append({"lambda": float(lam), "sup_v": math.nan, "sup_g": math.nan, "skipped": str(exc)})
            continue
        n = p.N_x
        rng = np.random.default_rng(seed)
        w0 = random_perturbation(n, delta_frac * delta_ceiling(p), p.s, rng)
        dt = default_dt(p, wave, n)
        slicer = WaveSlicer(wave.v, n)
        v0 = Field2(slicer(np.zeros(p.nu)) + w0.coeffs, check=False)
        traj = integrate(v0, (0.0, horizon), p, f, dt, sample_every=5, ceiling=None)
        sup_v = max(sobolev_norm(st, p.s) for st in traj.states)
        g = g_lambda(f, p)
        lw = p.lam * p.omega_vec
        gs = WaveSlicer(g, n)
        sup_g = max(hs_norm_array(gs(lw * t), p.s) for t in traj.times)
        rows.append({"lambda": float(lam), "sup_v": sup_v, "sup_g": sup_g, "skipped": ""})
    ok = [r for r in rows if not r["skipped"]]
    kv = fit_power([r["lambda"] for r in ok], [r["sup_v"] for r in ok])[0] if len(ok) > 1 else None
    kg = fit_power([r["lambda"] for r in ok], [r["sup_g"] for r in ok])[0] if len(ok) > 1 else None
    return {"rows": rows, "exponent_v": kv, "exponent_g": kg}


# ---------------------------------------------------------------- probes


def _grad_coeffs(c):
    n = c.shape[-1] // 2
    j = box_grid(n, 2)
    return 1j * j[0] * c, 1j * j[1] * c


def _pad(c, n):
    m = c.shape[-1] // 2
    out = np.zeros(c.shape[:-2] + (2 * n + 1, 2 * n + 1), dtype=complex)
    out[..., n - m : n + m + 1, n - m : n + m + 1] = c
    return out


def advect_full(a, u):
    """Exact coefficients of a.grad u (complex fields) on the doubled box."""
    n = u.shape[-1] // 2
    big = 2 * n
    m = 3 * n + 1 + big
    ux, uy = _grad_coeffs(u)
    ag = coeffs_to_grid(np.stack([_pad(a[0], n), _pad(a[1], n), ux, uy]), m, (1, 2))
    prod = ag[0] * ag[2] + ag[1] * ag[3]
    return grid_to_coeffs(prod, big, (0, 1))


def kato_ponce_ratio(a, u, s):
    """|[Lambda^s, a.grad] u|_{L^2} / (|a|_{H^s} |u|_{H^s}); a is a pair of coefficient arrays."""
    n = u.shape[-1] // 2
    w_small = bracket(box_grid(n, 2)) ** s
    w_big = bracket(box_grid(2 * n, 2)) ** s
    comm = w_big * advect_full(a, u) - advect_full(a, w_small * u)
    num = float(np.sqrt(np.sum(np.abs(comm) ** 2)))
    na = math.sqrt(sum(float(np.sum(np.abs(w_small * x) ** 2)) for x in a))
    nu_ = float(np.sqrt(np.sum(np.abs(w_small * u) ** 2)))
    return num / (na * nu_)


def kato_ponce_probe(corpus_size, s, seed, n=8, decay=None, n_draw=None):
    """Max Kato-Ponce ratio over a seeded corpus of random real fields.

    Coefficients are drawn on the box of half-width n_draw (default 2n) and
    truncated to n; with a common n_draw, runs at different n see truncations
    of the same underlying functions.
    """
    if s <= 2:
        raise PreconditionError("Kato-Ponce probe needs s > 2")
    decay = s + 2.0 if decay is None else decay
    n_draw = 2 * n if n_draw is None else n_draw
    if n_draw < n:
        raise PreconditionError("n_draw must be at least n")
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(corpus_size):
        fields = []
        for _k in range(3):
            c = Field2.random(n_draw, rng, decay=decay).coeffs
            fields.append(Field2(c, check=False).resized(n).coeffs)
        ratios.append(kato_ponce_ratio(fields[:2], fields[2], s))
    return float(max(ratios)), ratios


def conservation_probe(p: ModelParams, wave: WaveSolution | None = None, horizon=0.05, seed=0, n=None, tol_zero=1e-12, tol_rel=1e-6):
    """Controls run before every experiment.

    (i) unforced truncated flow conserves enstrophy sum|v_j|^2 and energy sum|v_j|^2/|j|^2;
    (ii) the delta = 0 perturbation stays identically zero along the wave.
    """
    n = p.N_x if n is None else n
    rng = np.random.default_rng(seed)
    v0 = Field2.random(n, rng, decay=2.0)
    v0 = v0 * (1.0 / sobolev_norm(v0, 0))
    j = box_grid(n, 2).astype(float)
    r2 = np.maximum((j**2).sum(0), 1.0)
    zero_f = Forcing.zero(p.mmap, p.N_phi, n)
    dt = 0.1 / (n * max(_sup_velocity(v0.coeffs, n), 1.0))
    traj = integrate(v0, (0.0, horizon), p, zero_f, dt, sample_every=10, ceiling=None)
    ens = np.array([np.sum(np.abs(x.coeffs) ** 2) for x in traj.states])
    en = np.array([np.sum(np.abs(x.coeffs) ** 2 / r2) for x in traj.states])
    drift = max(float(np.abs(ens / ens[0] - 1).max()), float(np.abs(en / en[0] - 1).max()))
    out = {"conservation_drift": drift, "conservation_ok": drift <= tol_rel}
    if wave is not None:
        run = integrate_perturbation(Field2.zeros(n), min(horizon, 0.05), p, wave, delta=0.0, stop_at_escape=False)
        out["zero_perturbation_max"] = float(run.norms.max())
        out["zero_perturbation_ok"] = out["zero_perturbation_max"] <= tol_zero
    out["passed"] = all(v for k, v in out.items() if k.endswith("_ok"))
    return out


def require_conservation(p, wave=None, **kw):
    res = conservation_probe(p, wave, **kw)
    if not res["passed"]:
        raise DivergenceError(f"conservation probe failed: {res}")
    return res
