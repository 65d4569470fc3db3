"""Scenario description, method lookup and result logs shared by the runners."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .. import chance, transform
from ..errors import ConfigurationError
from ..reformulate import MR_SAMPLING, MR_TAYLOR, REPRESENTATIONS, SR

PROBLEMS = ("cstr", "chain", "watertank", "pendulum")
OPEN_LOOP = "open"
CLOSED_LOOP = "closed"

# per-problem defaults; ``None`` fields of a Scenario are filled from here
DEFAULTS = {
    "cstr": dict(dt=1.0, duration=60.0, T=36.0, n_grid=20, outer=2, inner=2, rollouts=1,
                 approx=chance.CHEBYSHEV, noise_var=1e-9, mode=CLOSED_LOOP),
    "chain": dict(dt=0.2, duration=2.0, T=1.0, n_grid=40, outer=2, inner=2, rollouts=1,
                  approx=chance.GAUSSIAN, noise_var=1e-6, mode=CLOSED_LOOP),
    "watertank": dict(dt=0.1, duration=20.0, T=1.5, n_grid=20, outer=2, inner=2, rollouts=1,
                      approx=chance.GAUSSIAN, noise_var=1e-3, mode=CLOSED_LOOP,
                      representation=MR_SAMPLING),
    "pendulum": dict(dt=1e-3, duration=3.0, T=0.7, n_grid=10, outer=1, inner=2, rollouts=1,
                     approx=chance.GAUSSIAN, noise_var=1e-8, mode=CLOSED_LOOP),
}

# open-loop runs solve one OCP to convergence and evaluate it on many rollouts
OPEN_DEFAULTS = {
    "cstr": dict(outer=40, inner=20, rollouts=1000, duration=36.0),
}


@dataclass
class Scenario:
    """Everything needed to reproduce one benchmark run."""

    problem: str
    representation: Optional[str] = None
    method: Optional[str] = None
    approx: Optional[str] = None
    seed: int = 0
    rollouts: Optional[int] = None
    out: Optional[str] = None
    mode: Optional[str] = None
    dt: Optional[float] = None
    duration: Optional[float] = None
    T: Optional[float] = None
    n_grid: Optional[int] = None
    outer: Optional[int] = None
    inner: Optional[int] = None
    noise_var: Optional[float] = None
    chain_n: int = 2
    gp_points: int = 10
    mc_points: int = 1000
    quad_order: int = 3
    pce_order: int = 2
    extra: dict = field(default_factory=dict)

    def resolved(self) -> "Scenario":
        """Copy with defaults filled in; raises ConfigurationError on invalid values."""
        if self.problem not in PROBLEMS:
            raise ConfigurationError(f"unknown problem {self.problem!r}; choose from {PROBLEMS}")
        d = dict(asdict(self))
        if (d.get("mode") or DEFAULTS[self.problem]["mode"]) == OPEN_LOOP:
            if self.problem not in OPEN_DEFAULTS:
                raise ConfigurationError(f"open-loop mode is not available for {self.problem}")
            for k, v in OPEN_DEFAULTS[self.problem].items():
                if d.get(k) is None:
                    d[k] = v
        for k, v in DEFAULTS[self.problem].items():
            if d.get(k) is None:
                d[k] = v
        if d["representation"] is None:
            d["representation"] = SR
        if d["method"] is None:
            d["method"] = transform.TAYLOR1 if d["representation"] == MR_TAYLOR else transform.UNSCENTED
        s = Scenario(**d)
        s.validate()
        return s

    def validate(self):
        if self.representation not in REPRESENTATIONS:
            raise ConfigurationError(f"unknown representation {self.representation!r}")
        if self.method not in transform.METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.approx not in chance.APPROXIMATIONS:
            raise ConfigurationError(f"unknown constraint approximation {self.approx!r}")
        if self.mode not in (OPEN_LOOP, CLOSED_LOOP):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.representation == MR_TAYLOR and self.method != transform.TAYLOR1:
            raise ConfigurationError("mr-taylor requires method 'taylor'")
        if self.method == transform.TAYLOR1 and self.representation != MR_TAYLOR:
            raise ConfigurationError("method 'taylor' is only available with mr-taylor")
        if self.representation == MR_SAMPLING and self.method not in transform.SIGMA_METHODS:
            raise ConfigurationError("mr-sampling supports ut, stirling1 and stirling2")
        if not self.T > 0 or not self.dt > 0 or not self.duration > 0:
            raise ConfigurationError("T, dt and duration must be positive")
        steps = self.duration / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigurationError(f"dt={self.dt} does not divide duration={self.duration}")
        if self.n_grid < 2 or self.outer < 1 or self.inner < 1:
            raise ConfigurationError("n_grid >= 2 and at least one outer and inner iteration required")
        if self.rollouts < 1:
            raise ConfigurationError("rollouts must be >= 1")
        if self.noise_var < 0:
            raise ConfigurationError("noise variance must be >= 0")
        if self.problem == "chain" and not 2 <= self.chain_n <= 14:
            raise ConfigurationError("chain needs 2 <= n <= 14")
        if self.problem == "watertank" and self.gp_points < 1:
            raise ConfigurationError("the GP needs at least one data point")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    def propagation(self) -> transform.PropagationMethod:
        return make_method(self.method, n_points=self.mc_points, order=self.quad_order,
                           pce_order=self.pce_order, seed=self.seed)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown scenario keys {sorted(unknown)}")
        if "problem" not in d:
            raise ConfigurationError("scenario needs a 'problem'")
        return cls(**d)


def make_method(name, n_points=1000, order=3, pce_order=2, seed=0) -> transform.PropagationMethod:
    makers = {
        transform.TAYLOR1: lambda: transform.Taylor(),
        transform.STIRLING1: lambda: transform.Stirling1(),
        transform.STIRLING2: lambda: transform.Stirling2(),
        transform.UNSCENTED: lambda: transform.Unscented(),
        transform.QUADRATURE: lambda: transform.Quadrature(order=order),
        transform.MONTECARLO: lambda: transform.MonteCarlo(n_points=n_points, seed=seed),
        transform.PCE: lambda: transform.PCExpansion(pce_order=pce_order, order=order),
    }
    if name not in makers:
        raise ConfigurationError(f"unknown method {name!r}")
    return makers[name]()


@dataclass
class TrajectoryLog:
    """Per-sample data of one run.

    ``t`` has ``K`` entries; ``u`` is (nu, K), ``mu``/``var`` are (nx, K) and
    ``htilde`` is (nh, K).  ``rollouts`` is (R, nx, K_r) on ``t_rollouts``.
    """

    t: np.ndarray
    u: np.ndarray
    mu: np.ndarray
    var: np.ndarray
    htilde: np.ndarray
    t_rollouts: np.ndarray
    rollouts: np.ndarray
    timings: list
    meta: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)


def fmt(v) -> str:
    return f"{float(v):.17g}"


def write_outputs(log: TrajectoryLog, out_dir) -> None:
    """Write trajectory.csv, rollouts.csv, timing.csv and meta.json into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    nu, nx, nh = log.u.shape[0], log.mu.shape[0], log.htilde.shape[0]
    with open(os.path.join(out_dir, "trajectory.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"u_{i + 1}" for i in range(nu)] + [f"mu_x_{i + 1}" for i in range(nx)]
                   + [f"var_x_{i + 1}" for i in range(nx)] + [f"htilde_{i + 1}" for i in range(nh)])
        for k in range(log.t.size):
            w.writerow([fmt(log.t[k])] + [fmt(v) for v in log.u[:, k]] + [fmt(v) for v in log.mu[:, k]]
                       + [fmt(v) for v in log.var[:, k]] + [fmt(v) for v in log.htilde[:, k]])
    R = log.rollouts.shape[0]
    nxr = log.rollouts.shape[1]
    with open(os.path.join(out_dir, "rollouts.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rollout", "t"] + [f"x_{i + 1}" for i in range(nxr)])
        for r in range(R):
            for k in range(log.t_rollouts.size):
                w.writerow([str(r), fmt(log.t_rollouts[k])] + [fmt(v) for v in log.rollouts[r, :, k]])
    with open(os.path.join(out_dir, "timing.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "wall_ns"])
        for k, ns in enumerate(log.timings):
            w.writerow([str(k), str(int(ns))])
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(_jsonable(log.meta), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def mean_step_time(timings, warmup=5) -> float:
    """Mean wall time in seconds after discarding ``warmup`` steps."""
    ts = np.asarray(timings[warmup:] if len(timings) > warmup else timings, dtype=float)
    return float(ts.mean() * 1e-9) if ts.size else float("nan")
