"""Command-line entry point: betaplane {wave,reduce,simulate,sweep,measure,probe}.

Exit codes: 0 success, 2 precondition or screening rejection, 3 numerical
divergence, 4 inconclusive (every sweep row censored).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import BetaPlaneError, InconclusiveError, PreconditionError

log = logging.getLogger("betaplane")


def _common(sub):
    sub.add_argument("--config", type=Path, help="flat key = value config file")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    sub.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    sub.add_argument("--no-plots", action="store_true", help="skip matplotlib figures")


def build_parser():
    ap = argparse.ArgumentParser(prog="betaplane", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    subs = ap.add_subparsers(dest="command", required=True)

    _common(subs.add_parser("wave", help="construct and persist the traveling wave"))
    _common(subs.add_parser("reduce", help="reduce the linearized operator to diagonal form"))
    sp = subs.add_parser("simulate", help="one nonlinear stability run")
    _common(sp)
    sp.add_argument("--delta", type=float, help="perturbation size (default lambda^theta / 12)")
    sp.add_argument("--horizon", type=float, help="final time (default horizon_factor / delta)")
    sp = subs.add_parser("sweep", help="escape-time or amplitude sweep")
    _common(sp)
    sp.add_argument("--kind", choices=("escape", "amplitude"), default="escape")
    _common(subs.add_parser("measure", help="Monte Carlo measure of excised frequencies"))
    sp = subs.add_parser("probe", help="conservation, Kato-Ponce or g_lambda checks")
    _common(sp)
    sp.add_argument("--kind", choices=("conservation", "kato-ponce", "g-lambda"), default="conservation")
    sp.add_argument("--corpus", type=int, default=50, help="Kato-Ponce corpus size")
    return ap


def _overrides(pairs):
    out = {}
    for item in pairs:
        if "=" not in item:
            raise PreconditionError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


class Context:
    def __init__(self, args):
        self.args = args
        self.cfg = io.load_config(args.config, _overrides(args.set))
        self.hash = io.config_hash(self.cfg)
        self.seed = int(self.cfg["seed"])
        label = args.command + (f"-{args.kind}" if getattr(args, "kind", None) else "")
        self.out = args.out / f"{label}-{self.hash}"
        self.out.mkdir(parents=True, exist_ok=True)
        self.paths = []
        self.plots = not args.no_plots

    def path(self, name):
        p = self.out / name
        self.paths.append(p)
        return p

    def params(self, lam=None):
        return io.params_from_config(self.cfg, lam)

    def wave(self, p=None):
        from .wave import newton_solve

        p = p or self.params()
        f = io.forcing_from_config(self.cfg, p)
        return newton_solve(p, f, tol=float(self.cfg["tol_newton"])), f


def cmd_wave(ctx):
    from .lattice import TravelingField, sobolev_norm

    wave, _ = ctx.wave()
    p = wave.params
    ell = np.argwhere(np.ones(wave.v.profile.shape, bool)) - wave.v.N_phi
    j = TravelingField.momenta(wave.v.N_phi, p.mmap).reshape(2, -1).T
    rows = []
    for k, (l, jj) in enumerate(zip(ell, j)):
        c = wave.v.profile[tuple(l + wave.v.N_phi)]
        if c != 0:
            rows.append(list(l) + list(jj) + [c.real, c.imag])
    cols = [f"l{i + 1}" for i in range(p.nu)] + ["j1", "j2", "re", "im"]
    io.write_csv(ctx.path("wave_profile.csv"), cols, rows)
    io.write_csv(ctx.path("newton_history.csv"), ["iteration", "relative_residual"], list(enumerate(wave.history)))
    meta = {"params_hash": wave.params_hash, "iterations": wave.iterations, "residual": wave.residual_norm, "omega": list(wave.omega)}
    ctx.path("wave_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    summary = {
        "params_hash": wave.params_hash,
        "iterations": wave.iterations,
        "residual": wave.residual_norm,
        "norm_v_s": sobolev_norm(wave.v, p.s),
        "norm_g_s": sobolev_norm(wave.g, p.s),
        "norm_z_s": sobolev_norm(wave.z, p.s),
    }
    if ctx.plots:
        from . import plotting

        ctx.paths.append(plotting.plot_profile(wave, ctx.out / "wave_profile.png"))
        ctx.paths.append(plotting.plot_history(wave.history, ctx.out / "newton_history.png", "Newton residual"))
    return summary


def cmd_reduce(ctx):
    from .reduction import ReductionSchedule, reduce_linearized

    wave, _ = ctx.wave()
    p = wave.params
    sched = ReductionSchedule.from_params(p, tol_kam=float(ctx.cfg["tol_kam"]))
    rf = reduce_linearized(wave, sched, tol_b0=float(ctx.cfg["tol_b0"]))
    io.write_csv(ctx.path("mu_table.csv"), ["j1", "j2", "re_mu", "im_mu"], rf.mu_table())
    io.write_csv(ctx.path("kam_remainders.csv"), ["step", "remainder"], list(enumerate(rf.kam.remainders)))
    io.write_csv(
        ctx.path("order_history.csv"),
        ["step", "norm0"],
        [(k, h["norm0"]) for k, h in enumerate(rf.order.history)],
    )
    from .operators import write_operator_dump

    stages = {"E0": rf.linearized.E0, "E1": rf.stage_one.E1, "EM": rf.order.E, "E_final": rf.kam.E, "U": rf.U}
    for name, op in stages.items():
        write_operator_dump(op, ctx.path(f"operator_{name}.csv"))
    cert = ctx.path("certificate.json")
    cert.write_text(json.dumps(rf.certificate(), indent=2, sort_keys=True, default=io._json_default) + "\n")
    if ctx.plots:
        from . import plotting

        ctx.paths.append(plotting.plot_spectrum(rf.basis.modes, rf.mu, ctx.out / "mu_spectrum.png"))
        ctx.paths.append(plotting.plot_history(rf.kam.remainders, ctx.out / "kam_remainders.png", "KAM remainder"))
    return {"defect": rf.defect, "b0": rf.stage_one.b0_norm, **rf.stage_norms}


def cmd_simulate(ctx):
    from .stability import integrate_perturbation, random_perturbation, require_conservation

    wave, _ = ctx.wave()
    p = wave.params
    probe = require_conservation(p, wave)
    delta = ctx.args.delta if ctx.args.delta is not None else p.lam**p.theta / 12
    horizon = ctx.args.horizon if ctx.args.horizon is not None else float(ctx.cfg["horizon_factor"]) / delta
    dt = float(ctx.cfg["dt"]) if ctx.cfg["dt"] else None
    w0 = random_perturbation(p.N_x, delta, p.s, np.random.default_rng(ctx.seed))
    run = integrate_perturbation(w0, horizon, p, wave, dt=dt, delta=delta, seed=ctx.seed)
    io.write_csv(ctx.path("trace.csv"), ["t", "norm_s", "norm_s_minus_1"], zip(run.times, run.norms, run.tail_norms))
    if ctx.plots:
        from . import plotting

        ctx.paths.append(
            plotting.plot_trace(run.times, run.norms, delta, ctx.out / "trace.png", run.tail_norms, None if run.censored else run.T_star)
        )
    if run.diverged:
        from .errors import DivergenceError

        raise DivergenceError("perturbation norm exceeded the ceiling", last_time=float(run.times[-1]))
    return {"delta": delta, "T_star": run.T_star, "censored": run.censored, "horizon": horizon, "probe": probe}


def cmd_sweep(ctx):
    if ctx.args.kind == "amplitude":
        return _amplitude_sweep(ctx)
    from .stability import escape_time_sweep, require_conservation

    wave, _ = ctx.wave()
    p = wave.params
    probe = require_conservation(p, wave)
    deltas = io.floats(ctx.cfg["delta_list"])
    if not deltas:
        d0 = p.lam**p.theta / 12
        deltas = [d0 / 2**k for k in range(4)]
    dt = float(ctx.cfg["dt"]) if ctx.cfg["dt"] else None
    table = escape_time_sweep(deltas, p, wave, float(ctx.cfg["horizon_factor"]), seed=ctx.seed, dt=dt)
    cols = ["delta", "T_star", "censored", "diverged", "horizon", "seed"]
    io.write_csv(ctx.path("escape_times.csv"), cols, table.rows)
    if ctx.plots:
        from . import plotting

        ctx.paths.append(
            plotting.plot_loglog_fit(
                [r["delta"] for r in table.rows],
                [r["T_star"] for r in table.rows],
                ctx.out / "escape_times.png",
                table.exponent,
                table.prefactor,
                [r["censored"] for r in table.rows],
                "delta",
                "T_star",
                "escape time",
            )
        )
    if not table.uncensored():
        raise InconclusiveError("every sweep row was censored; raise horizon_factor")
    return {"exponent": table.exponent, "prefactor": table.prefactor, "probe": probe}


def _amplitude_sweep(ctx):
    from .stability import amplitude_bounds_check

    p = ctx.params()
    f = io.forcing_from_config(ctx.cfg, p)
    lams = io.floats(ctx.cfg["lambda_list"])
    res = amplitude_bounds_check(lams, p, f, horizon=float(ctx.cfg["horizon"]), seed=ctx.seed, newton_tol=float(ctx.cfg["tol_newton"]))
    io.write_csv(ctx.path("amplitudes.csv"), ["lambda", "sup_v", "sup_g", "skipped"], res["rows"])
    ok = [r for r in res["rows"] if not r["skipped"]]
    if ctx.plots and ok:
        from . import plotting

        ctx.paths.append(
            plotting.plot_loglog_fit(
                [r["lambda"] for r in ok], [r["sup_v"] for r in ok], ctx.out / "amplitudes.png", xlabel="lambda", ylabel="sup_t |v|_{H^s}", title="amplitude scaling"
            )
        )
    return {"exponent_v": res["exponent_v"], "exponent_g": res["exponent_g"]}


def cmd_measure(ctx):
    from .reduction import melnikov_measure
    from .stability import fit_power

    p = ctx.params()
    n = int(ctx.cfg["samples"])
    gammas = io.floats(ctx.cfg["gamma_list"])
    rows = [{"gamma": g, "fraction": melnikov_measure(p, g, n, ctx.seed), "samples": n} for g in gammas]
    io.write_csv(ctx.path("melnikov.csv"), ["gamma", "fraction", "samples"], rows)
    good = [r for r in rows if r["fraction"] > 0]
    k, c = fit_power([r["gamma"] for r in good], [r["fraction"] for r in good]) if len(good) > 1 else (None, None)
    if ctx.plots and good:
        from . import plotting

        ctx.paths.append(
            plotting.plot_loglog_fit(
                [r["gamma"] for r in good], [r["fraction"] for r in good], ctx.out / "melnikov.png", k, c, xlabel="gamma", ylabel="excised fraction"
            )
        )
    return {"exponent": k}


def cmd_probe(ctx):
    kind = ctx.args.kind
    if kind == "conservation":
        from .stability import conservation_probe

        wave, _ = ctx.wave()
        res = conservation_probe(wave.params, wave, seed=ctx.seed)
        io.write_csv(ctx.path("probe.csv"), ["key", "value"], sorted(res.items()))
        if not res["passed"]:
            from .errors import DivergenceError

            raise DivergenceError(f"conservation probe failed: {res}")
        return res
    if kind == "kato-ponce":
        from .stability import kato_ponce_probe

        p = ctx.params()
        worst, ratios = kato_ponce_probe(ctx.args.corpus, p.s, ctx.seed, n=p.N_x)
        io.write_csv(ctx.path("kato_ponce.csv"), ["sample", "ratio"], list(enumerate(ratios)))
        return {"max_ratio": worst}
    from .dynamics import g_lambda
    from .lattice import sobolev_norm

    rows = []
    for lam in io.floats(ctx.cfg["lambda_list"]):
        p = ctx.params(lam)
        f = io.forcing_from_config(ctx.cfg, p)
        rows.append({"lambda": lam, "norm_g_s": sobolev_norm(g_lambda(f, p), p.s)})
    io.write_csv(ctx.path("g_lambda.csv"), ["lambda", "norm_g_s"], rows)
    from .stability import fit_power

    k = fit_power([r["lambda"] for r in rows], [r["norm_g_s"] for r in rows])[0] if len(rows) > 1 else None
    return {"exponent": k}


COMMANDS = {
    "wave": cmd_wave,
    "reduce": cmd_reduce,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "measure": cmd_measure,
    "probe": cmd_probe,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        ctx = Context(args)
        with io.Stopwatch() as sw:
            summary = COMMANDS[args.command](ctx)
    except BetaPlaneError as exc:
        print(f"betaplane {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    rec = io.RunRecord(ctx.hash, ctx.seed, io.provenance(), ctx.paths, sw.elapsed, {"command": args.command, "summary": summary, "config": ctx.cfg})
    manifest = rec.write(ctx.out / "manifest.json")
    print(json.dumps({"out": str(ctx.out), "manifest": str(manifest), **{k: v for k, v in summary.items() if not isinstance(v, dict)}}, default=io._json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
