"""Static figures written next to the CSV/JSON outputs (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.8),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_profile(wave, path):
    """|profile(l)| on the l-box (nu = 2) or against |l| otherwise."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        mag = np.abs(wave.v.profile)
        if wave.v.nu == 2:
            n = wave.v.N_phi
            floor = max(mag.max() * 1e-16, 1e-300)
            im = ax.imshow(np.log10(np.maximum(mag, floor)).T, origin="lower", extent=(-n - 0.5, n + 0.5, -n - 0.5, n + 0.5), cmap="viridis")
            fig.colorbar(im, ax=ax, label="log10 |coefficient|")
            ax.set_xlabel("l1")
            ax.set_ylabel("l2")
        else:
            from .lattice import box_grid

            r = np.linalg.norm(box_grid(wave.v.N_phi, wave.v.nu), axis=0).ravel()
            ax.semilogy(r, mag.ravel(), ".")
            ax.set_xlabel("|l|")
            ax.set_ylabel("|coefficient|")
        ax.set_title(f"traveling wave profile, lambda = {wave.params.lam:g}")
        return _save(fig, path)


def plot_history(values, path, title, ylabel="norm"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        vals = np.asarray(values, dtype=float)
        ax.semilogy(np.arange(len(vals)), np.maximum(vals, 1e-300), "o-")
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        return _save(fig, path)


def plot_spectrum(modes, mu, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        r = np.linalg.norm(modes, axis=1)
        sc = ax.scatter(modes[:, 0] / np.maximum(r, 1) ** 2, np.imag(mu), c=r, s=10, cmap="plasma")
        fig.colorbar(sc, ax=ax, label="|j|")
        ax.set_xlabel("L(j) = j1/|j|^2")
        ax.set_ylabel("Im mu(j)")
        ax.set_title("reduced eigenvalues")
        return _save(fig, path)


def plot_trace(times, norms, delta, path, tail=None, t_star=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(times, np.asarray(norms) / delta, label="|w|_{H^s} / delta")
        if tail is not None and len(tail):
            ax.plot(times, np.asarray(tail) / tail[0], "--", label="|w|_{H^(s-1)} (normalized)")
        ax.axhline(2.0, color="k", lw=0.8, ls=":")
        if t_star is not None:
            ax.axvline(t_star, color="r", lw=0.8)
        ax.set_xlabel("t")
        ax.legend()
        return _save(fig, path)


def plot_loglog_fit(x, y, path, exponent=None, prefactor=None, censored=None, xlabel="x", ylabel="y", title=""):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x, y = np.asarray(x, float), np.asarray(y, float)
        cens = np.zeros(len(x), bool) if censored is None else np.asarray(censored, bool)
        ax.loglog(x[~cens], y[~cens], "o", label="measured")
        if cens.any():
            ax.loglog(x[cens], y[cens], "^", mfc="none", label="censored (lower bound)")
        if exponent is not None and prefactor is not None:
            xx = np.geomspace(x.min(), x.max(), 50)
            ax.loglog(xx, prefactor * xx**exponent, "-", label=f"fit slope {exponent:.3f}")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend()
        return _save(fig, path)
