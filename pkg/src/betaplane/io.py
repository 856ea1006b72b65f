"""Flat key=value configuration, CSV tables and JSON run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import Forcing, ModelParams
from .errors import PreconditionError
from .lattice import MomentumMap

DEFAULTS = {
    "lambda": "100",
    "alpha": "1.5",
    "beta": "1.0",
    "c": "0.1",
    "nu": "2",
    "wave_vectors": "1,0;0,1",
    "omega": "",
    "omega_seed": "",
    "N_phi": "8",
    "N_x": "8",
    "N0": "4",
    "s": "3",
    "delta_list": "",
    "horizon_factor": "2.0",
    "tol_newton": "1e-9",
    "tol_b0": "1e-8",
    "tol_kam": "1e-11",
    "seed": "0",
    "forcing": "",
    "lambda_list": "50,100,200,400",
    "samples": "100000",
    "gamma_list": "0.01,0.02",
    "horizon": "0.5",
    "dt": "",
}

_DEFAULT_OMEGA = ModelParams.__dataclass_fields__["omega"].default


def parse_config_text(text):
    """Parse ``key = value`` lines; '#' starts a comment. Unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PreconditionError(f"config line {lineno}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in DEFAULTS:
            raise PreconditionError(f"config line {lineno}: unknown key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides=None):
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg.update(parse_config_text(Path(path).read_text()))
    for k, v in (overrides or {}).items():
        if k not in DEFAULTS:
            raise PreconditionError(f"unknown key {k!r}")
        cfg[k] = str(v)
    return cfg


def config_hash(cfg):
    blob = json.dumps({k: cfg[k] for k in sorted(cfg)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def floats(text):
    return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]


def parse_wave_vectors(text):
    rows = [r for r in text.split(";") if r.strip()]
    return tuple(tuple(int(x) for x in r.split(",")) for r in rows)


def omega_from_seed(seed, nu):
    """Uniform draw from the annulus 1 <= |omega| <= 2."""
    from .reduction import sample_annulus

    return tuple(float(x) for x in sample_annulus(np.random.default_rng(seed), 1, nu)[0])


def params_from_config(cfg, lam=None):
    mmap = MomentumMap(parse_wave_vectors(cfg["wave_vectors"]))
    nu = int(cfg["nu"])
    if mmap.nu != nu:
        raise PreconditionError(f"nu = {nu} but {mmap.nu} wave vectors given")
    if cfg["omega"]:
        omega = tuple(floats(cfg["omega"]))
    elif cfg["omega_seed"]:
        omega = omega_from_seed(int(cfg["omega_seed"]), nu)
    elif nu == 2:
        omega = _DEFAULT_OMEGA
    else:
        raise PreconditionError("omega or omega_seed is required when nu != 2")
    return ModelParams(
        lam=float(cfg["lambda"]) if lam is None else float(lam),
        alpha=float(cfg["alpha"]),
        beta=float(cfg["beta"]),
        c=float(cfg["c"]),
        mmap=mmap,
        omega=omega,
        N_phi=int(cfg["N_phi"]),
        N_x=int(cfg["N_x"]),
        s=float(cfg["s"]),
        N0=float(cfg["N0"]),
    )


def forcing_from_config(cfg, p: ModelParams):
    """Forcing terms 'l1,l2:j1,j2:a; ...' meaning a cos(l.phi + j.x); empty selects the default."""
    text = cfg.get("forcing", "")
    if not text.strip():
        return Forcing.default(p.mmap, p.N_phi, p.N_x)
    triples = []
    for term in text.split(";"):
        if not term.strip():
            continue
        parts = term.split(":")
        if len(parts) != 3:
            raise PreconditionError(f"bad forcing term {term!r}")
        ell = tuple(int(x) for x in parts[0].split(","))
        j = tuple(int(x) for x in parts[1].split(","))
        triples.append((ell, j, float(parts[2])))
    return Forcing.from_triples(triples, p.mmap, p.N_phi, p.N_x)


# ---------------------------------------------------------------- output


def fmt(x):
    """Full double precision: 17 significant digits."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        return f"{x:.17g}"
    if x is None:
        return ""
    return str(x)


def write_csv(path, columns, rows):
    """rows: iterable of dicts or sequences ordered as ``columns``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            vals = [r.get(c) for c in columns] if isinstance(r, dict) else list(r)
            w.writerow([fmt(v) for v in vals])
    return path


def read_csv(path):
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


def provenance():
    """git describe of the working tree when available, else the package version."""
    from . import __version__

    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        rev = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"betaplane {__version__}" + (f" ({rev})" if rev else "")


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    provenance: str
    artifact_paths: list = field(default_factory=list)
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def manifest(self):
        import scipy

        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "provenance": self.provenance,
            "versions": {
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "wall_clock": self.wall_clock,
            "artifact_paths": [str(p) for p in self.artifact_paths],
            **self.extra,
        }

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True, default=_json_default) + "\n")
        return path


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x).__name__)


class Stopwatch:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
