"""Benchmark runners: open/closed-loop simulation, statistics and timing."""
from __future__ import annotations

import time
from dataclasses import asdict, replace

import numpy as np

from .. import chance, transform
from ..distributions import JointDistribution, sample
from ..errors import ConfigurationError
from ..gp import SquaredExponential, gp_fit, gp_predict
from ..reformulate import MR_SAMPLING, SR, attach_gp, build
from ..solver import MPCController, SolverConfig, solve_ocp
from . import problems as bp
from .kalman import KalmanFilter
from .plant import TruthPlant, rollout_rngs
from .scenario import OPEN_LOOP, Scenario, TrajectoryLog, mean_step_time

CSTR_X0 = (1.0, 0.0)
CSTR_CB_DES = 0.125
TANK_X0 = (0.0, 0.1)
TANK_GP_RANGE = (0.0, 1.2)
TANK_KERNEL = dict(sf2=0.01, ell=0.4)
PEND_SWITCH = 0.1          # time of the 0 -> 0.6 setpoint change
PEND_TARGET = 0.6
PEND_MEAS_VAR_ANGLE = 1e-6
PEND_PROCESS = 1e-6        # filter process-noise intensity
CHAIN_BUDGET_BYTES = 2 ** 31


def _config(s: Scenario) -> SolverConfig:
    return SolverConfig(n_grid=s.n_grid, outer=s.outer, inner=s.inner)


def _builder(s: Scenario, base, method):
    def make(dist, k):
        return build(replace(base, x0=dist), s.representation, method, s.approx)
    return make


def _meta(s: Scenario, **extra):
    d = asdict(s)
    d.update(extra)
    return d


def _gauss(mean, var):
    mean = np.asarray(mean, dtype=float)
    return JointDistribution.gaussian(mean, var * np.eye(mean.size))


def _closed_loop(s, make_ctrl, plant, x_init, P, measure, rng, log_rows, extra_step=None):
    """Run one controller from ``x_init``; returns (states (nx, K+1), controller).

    ``measure(x, rng)`` returns the state distribution handed to the
    controller.  ``log_rows`` receives ``(t, u0, dist, result)`` per step.
    """
    ctrl = make_ctrl()
    x = np.asarray(x_init, dtype=float).reshape(-1, 1)
    xs = [x[:, 0]]
    for k in range(s.steps):
        dist = measure(x[:, 0], rng, k)
        u0, u1 = ctrl.step(dist)
        if log_rows is not None:
            log_rows.append((k * s.dt, u0, dist, ctrl.last))
        x = plant.step(x, u0, u1, s.dt, P)
        if extra_step is not None:
            extra_step(u0, u1)
        xs.append(x[:, 0])
    return np.array(xs).T, ctrl


def _rows_to_log(rows, nh, s, t_roll, roll, timings, meta, stats):
    t = np.array([r[0] for r in rows])
    u = np.array([r[1] for r in rows]).T
    mu = np.array([r[2].mean for r in rows]).T
    var = np.array([np.diag(r[2].cov) for r in rows]).T
    H = np.array([r[3].h[:, 0] if r[3].h.shape[0] else np.zeros(0) for r in rows]).T.reshape(nh, -1)
    return TrajectoryLog(t, u, mu, var, H, t_roll, roll, timings, meta, stats)


# ---------------------------------------------------------------------------
# reactor


def run_cstr(s: Scenario) -> TrajectoryLog:
    s = s.resolved()
    x_des, u_des = bp.cstr_steady_state(CSTR_CB_DES)
    base = bp.cstr_problem(_gauss(CSTR_X0, s.noise_var), x_des, u_des, T=s.T)
    method = s.propagation()
    meta = _meta(s, x_des=x_des, u_des=u_des, x0=CSTR_X0)
    plant = TruthPlant(bp.cstr_f, 2)
    if s.mode == OPEN_LOOP:
        return _cstr_open(s, base, method, plant, meta)
    make = _builder(s, base, method)
    t_roll = np.arange(s.steps + 1) * s.dt
    roll = np.empty((s.rollouts, 2, s.steps + 1))
    rows = []
    timings = []
    step_times = []

    def measure(x, rng, k):
        y = x + np.sqrt(s.noise_var) * rng.standard_normal(2)
        return _gauss(y, s.noise_var)

    for r, rng in enumerate(rollout_rngs(s.seed, s.rollouts)):
        P = sample(bp.cstr_params(), 1, rng)
        X, ctrl = _closed_loop(s, lambda: MPCController(make, _config(s), s.dt), plant,
                               CSTR_X0, P, measure, rng, rows if r == 0 else None)
        roll[r] = X
        if r == 0:
            timings = list(ctrl.timings)
        step_times.append(mean_step_time(ctrl.timings))
    cb = roll[:, 1, :]
    stats = dict(min_margin=float(np.min(bp.CSTR_CB_MAX - cb)),
                 violation_fraction=float(np.mean(np.any(cb > bp.CSTR_CB_MAX, axis=1))),
                 final_state=roll[:, :, -1].mean(axis=0),
                 mean_step_s=float(np.mean(step_times)))
    meta["statistics"] = stats
    return _rows_to_log(rows, 1, s, t_roll, roll, timings, meta, stats)


def _cstr_open(s, base, method, plant, meta):
    dp = build(base, s.representation, method, s.approx)
    t0 = time.perf_counter_ns()
    res = solve_ocp(dp, _config(s))
    timings = [time.perf_counter_ns() - t0]
    mu, var = dp.moments(res.x)
    diagnostics = []
    if res.stalled:
        diagnostics.append("line search stalled; best iterate returned")
    if res.h_max.size and np.max(res.h_max) > 1e-3:
        diagnostics.append(f"tightened constraint violated by {np.max(res.h_max):.3g} in the prediction")
    X = np.empty((2, s.rollouts))
    P = np.empty((3, s.rollouts))
    for r, rng in enumerate(rollout_rngs(s.seed, s.rollouts)):
        X[:, r] = sample(base.x0, 1, rng)[:, 0]
        P[:, r] = sample(base.p, 1, rng)[:, 0]
    t_roll = np.arange(s.steps + 1) * s.dt
    roll = np.empty((s.rollouts, 2, s.steps + 1))
    roll[:, :, 0] = X.T
    # every rollout sees the same open-loop input, so they integrate as one batch
    for k in range(s.steps):
        u0 = [np.interp(k * s.dt, res.t, res.u[0])]
        u1 = [np.interp((k + 1) * s.dt, res.t, res.u[0])]
        X = plant.step(X, u0, u1, s.dt, P)
        roll[:, :, k + 1] = X.T
    cb = roll[:, 1, :]
    q90 = np.quantile(cb, bp.CSTR_ALPHA, axis=0)
    kpk = int(np.argmax(q90))
    stats = dict(q90_peak=float(q90[kpk]), q90_peak_time=float(t_roll[kpk]),
                 mean_peak=float(cb.mean(axis=0).max()),
                 violation_at_peak=float(np.mean(cb[:, kpk] > bp.CSTR_CB_MAX)),
                 max_violation_fraction=float(np.max(np.mean(cb > bp.CSTR_CB_MAX, axis=0))),
                 predicted_h_max=float(np.max(res.h_max)), stalled=res.stalled,
                 diagnostics=diagnostics, solve_s=timings[0] * 1e-9)
    meta["statistics"] = stats
    stats = dict(stats, q90=q90, mean=cb.mean(axis=0), t=t_roll,
                 tightened_bound=bp.CSTR_CB_MAX - (res.h[0] - (mu[1] - bp.CSTR_CB_MAX)) + 0.0)
    return TrajectoryLog(res.t, res.u, mu, var, res.h, t_roll, roll, timings, meta, stats)


CSTR_METHODS = ((SR, transform.UNSCENTED), (SR, transform.STIRLING1), (SR, transform.STIRLING2),
                ("mr-taylor", transform.TAYLOR1), (MR_SAMPLING, transform.UNSCENTED),
                (SR, transform.MONTECARLO), (SR, transform.QUADRATURE), (SR, transform.PCE))


def cstr_timing_table(s: Scenario, methods=CSTR_METHODS, steps=20, repeats=3):
    """Mean closed-loop step time per (representation, method) after the warm-up steps.

    Repeats are interleaved across methods and the fastest mean is kept.
    """
    best = {}
    for _ in range(repeats):
        for rep, meth in methods:
            sc = replace(s, representation=rep, method=meth, rollouts=1, duration=None).resolved()
            sc = replace(sc, duration=steps * sc.dt)
            log = run_cstr(sc)
            t = mean_step_time(log.timings)
            best[rep, meth] = min(best.get((rep, meth), np.inf), t)
    return [dict(representation=rep, method=meth, mean_step_s=best[rep, meth]) for rep, meth in methods]


# ---------------------------------------------------------------------------
# spring chain

CHAIN_METHODS = ((SR, transform.UNSCENTED), (MR_SAMPLING, transform.UNSCENTED),
                 ("mr-taylor", transform.TAYLOR1), (SR, transform.MONTECARLO),
                 (SR, transform.QUADRATURE), (SR, transform.PCE))


def _n_points(s: Scenario, nxi: int) -> int:
    if s.method in transform.SIGMA_METHODS:
        return 2 * nxi + 1
    if s.method in (transform.QUADRATURE, transform.PCE):
        return s.quad_order ** nxi
    if s.method == transform.MONTECARLO:
        return s.mc_points
    return 1


def chain_memory_estimate(s: Scenario) -> float:
    """Bytes held by the state trajectories of one solve (with a 4x allowance for temporaries)."""
    nx = 6 * s.chain_n - 3
    if s.representation == SR:
        states = _n_points(s, nx) * nx
    else:
        states = nx + nx * nx
    return 4.0 * 8.0 * states * 2 * s.n_grid


def chain_setup(n: int):
    """Chain parameters with the wall below the equilibrium, the reference and a disturbed start."""
    cp = bp.ChainParams(n=n)
    x_ref = bp.chain_equilibrium(cp)
    m = n - 1
    zmin = float(np.min(x_ref[2:3 * m:3]))
    cp = replace(cp, wall=zmin - 0.05)
    x_start = x_ref.copy()
    x_start[3 * m:6 * m:3] += 0.2          # push the free masses along x
    x_start[3 * m + 1:6 * m:3] += 0.1
    return cp, x_ref, x_start


def chain_measurement_var(cp, noise_var: float) -> np.ndarray:
    """Per-state measurement variance; velocities are scaled by the squared link frequency.

    Isotropic noise in mixed position/velocity units is far from the
    oscillator's natural metric, which makes the explicit covariance
    predictor indefinite on the default grid.
    """
    m = cp.n - 1
    v = np.full(cp.nx, float(noise_var))
    v[3 * m:6 * m] *= 1.5 * cp.stiffness / cp.mass
    return v


def run_chain(s: Scenario, budget_bytes: float = CHAIN_BUDGET_BYTES) -> TrajectoryLog:
    """Closed-loop stabilization of the chain; skipped with a reason when over budget."""
    s = s.resolved()
    n = s.chain_n
    nx = 6 * n - 3
    meta = _meta(s, nx=nx)
    need = chain_memory_estimate(s)
    if need > budget_bytes:
        reason = (f"{s.representation}/{s.method} at n={n} needs about {need / 2 ** 30:.3g} GiB "
                  f"for {_n_points(s, nx)} points, budget {budget_bytes / 2 ** 30:.3g} GiB")
        stats = dict(skipped=True, reason=reason)
        meta["statistics"] = stats
        return TrajectoryLog(np.zeros(0), np.zeros((3, 0)), np.zeros((nx, 0)), np.zeros((nx, 0)),
                             np.zeros((n - 1, 0)), np.zeros(0), np.zeros((0, nx, 0)), [], meta, stats)
    cp, x_ref, x_start = chain_setup(n)
    f, vjp = bp.chain_f(cp)
    var = chain_measurement_var(cp, s.noise_var)
    base = bp.chain_problem(cp, JointDistribution.gaussian(x_start, np.diag(var)), x_ref, T=s.T)
    if s.representation == "mr-taylor":
        dfdx, dfdu = bp.chain_jacobians(cp)
        base = replace(base, dfdx=dfdx, dfdu=dfdu)
    make = _builder(s, base, s.propagation())
    plant = TruthPlant(f, nx)
    rows = []

    def measure(x, rng, k):
        return JointDistribution.gaussian(x + np.sqrt(var) * rng.standard_normal(nx), np.diag(var))

    rng = rollout_rngs(s.seed, 1)[0]
    X, ctrl = _closed_loop(s, lambda: MPCController(make, _config(s), s.dt), plant,
                           x_start, None, measure, rng, rows)
    stats = dict(skipped=False, mean_step_s=mean_step_time(ctrl.timings),
                 final_error=float(np.max(np.abs(X[:, -1] - x_ref))))
    meta["statistics"] = stats
    t_roll = np.arange(s.steps + 1) * s.dt
    return _rows_to_log(rows, n - 1, s, t_roll, X[None], list(ctrl.timings), meta, stats)


def chain_timing_table(s: Scenario, ns=(2, 4, 6, 8), methods=CHAIN_METHODS, steps=10,
                       budget_bytes: float = CHAIN_BUDGET_BYTES, repeats=1):
    """Per-step wall time for every (n, representation, method); skipped runs carry a reason.

    Each configuration is timed by its mean step after the warm-up steps;
    with ``repeats > 1`` the runs of one ``n`` are interleaved and the
    fastest mean is kept, which suppresses machine noise.
    """
    rows = []
    for n in ns:
        best = {}
        skipped = {}
        for _ in range(repeats):
            for rep, meth in methods:
                if (rep, meth) in skipped:
                    continue
                sc = replace(s, chain_n=n, representation=rep, method=meth, duration=None)
                sc = sc.resolved()
                sc = replace(sc, duration=steps * sc.dt)
                log = run_chain(sc, budget_bytes)
                if log.stats["skipped"]:
                    skipped[rep, meth] = log.stats["reason"]
                    continue
                t = mean_step_time(log.timings)
                best[rep, meth] = min(best.get((rep, meth), np.inf), t)
        for rep, meth in methods:
            skip = (rep, meth) in skipped
            rows.append(dict(n=n, nx=6 * n - 3, representation=rep, method=meth,
                             mean_step_s=None if skip else best[rep, meth],
                             skipped=skip, reason=skipped.get((rep, meth), "")))
    return rows


# ---------------------------------------------------------------------------
# water tank with a learned outflow


def tank_gp(n_points: int, noise_var: float, seed: int = 0):
    """GP of the outflow ``g(h)`` from ``n_points`` noisy samples on an even grid."""
    lo, hi = TANK_GP_RANGE
    h = np.linspace(lo, hi, n_points) if n_points > 1 else np.array([0.5 * (lo + hi)])
    rng = np.random.Generator(np.random.Philox(key=[seed, 2 ** 32]))
    y = bp.tank_outflow(h) + np.sqrt(noise_var) * rng.standard_normal(h.size)
    return gp_fit(SquaredExponential(**TANK_KERNEL), h[:, None], y[:, None], noise_var)


def tank_inflow_limit(model, approx=chance.GAUSSIAN) -> float:
    """Largest inflow whose learned equilibrium level stays below ``h_max`` with the chance level."""
    mean, var = gp_predict(model, [bp.TANK_H_MAX])
    z = chance.z_coeff(approx, bp.TANK_ALPHA)
    return bp.TANK_A * float(-mean[0] - z * np.sqrt(var[0]))


def _tank_setup(s: Scenario):
    model = tank_gp(s.gp_points, s.noise_var, s.seed)
    q_max = tank_inflow_limit(model, s.approx)
    base = bp.tank_problem(_gauss(TANK_X0, 0.0), T=s.T, q_max=q_max)
    return attach_gp(base, model, outputs=(1,), inputs=(1,)), model, q_max


def run_watertank(s: Scenario) -> TrajectoryLog:
    s = s.resolved()
    if s.representation == SR:
        raise ConfigurationError("the water tank uses a GP, which needs a moment-based representation")
    prob, model, q_max = _tank_setup(s)
    make = _builder(s, prob, s.propagation())
    plant = TruthPlant(bp.tank_f_true, 2)
    rows = []

    def measure(x, rng, k):
        return _gauss(x, 0.0)

    rng = rollout_rngs(s.seed, 1)[0]
    X, ctrl = _closed_loop(s, lambda: MPCController(make, _config(s), s.dt), plant,
                           TANK_X0, None, measure, rng, rows)
    h = X[1]
    stats = dict(max_level=float(h.max()), min_margin=float(np.min(bp.TANK_H_MAX - h)),
                 final_level=float(h[-1]), mean_step_s=mean_step_time(ctrl.timings))
    meta = _meta(s, x0=TANK_X0, kernel=TANK_KERNEL, gp_range=TANK_GP_RANGE, q_max=q_max,
                 statistics=stats)
    t_roll = np.arange(s.steps + 1) * s.dt
    return _rows_to_log(rows, 1, s, t_roll, X[None], list(ctrl.timings), meta, stats)


def gp_timing_sweep(s: Scenario, sizes=(1, 10, 100, 1000), steps=10, repeats=3):
    """Per-step controller time versus GP data count.

    Sizes are measured round-robin and the smallest of ``repeats`` means is
    kept, which suppresses scheduler noise.
    """
    s = s.resolved()
    s = replace(s, duration=steps * s.dt)
    best = {m: np.inf for m in sizes}
    for _ in range(repeats):
        for m in sizes:
            log = run_watertank(replace(s, gp_points=int(m)))
            best[m] = min(best[m], log.stats["mean_step_s"])
    return best


# ---------------------------------------------------------------------------
# cart pendulum with a Kalman filter


def pendulum_filter(s: Scenario, mean0=None, cov0=None) -> KalmanFilter:
    A, B = bp.pend_linearization()
    C = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    R = np.diag([s.noise_var, PEND_MEAS_VAR_ANGLE])
    mean0 = np.zeros(4) if mean0 is None else mean0
    cov0 = np.diag([s.noise_var, 1e-8, PEND_MEAS_VAR_ANGLE, 1e-8]) if cov0 is None else cov0
    return KalmanFilter(A, B, C, PEND_PROCESS * np.eye(4), R, s.dt, mean0, cov0)


def run_pendulum(s: Scenario) -> TrajectoryLog:
    s = s.resolved()
    x0 = np.zeros(4)
    probs = {v: bp.pend_problem(_gauss(x0, 0.0), v, T=s.T) for v in (0.0, PEND_TARGET)}
    method = s.propagation()
    switch = int(round(PEND_SWITCH / s.dt))

    def make(dist, k):
        return build(replace(probs[0.0 if k < switch else PEND_TARGET], x0=dist),
                     s.representation, method, s.approx)

    plant = TruthPlant(bp.pend_f, 4)
    noiseless = s.noise_var == 0.0
    kf = None if noiseless else pendulum_filter(s)
    rng = rollout_rngs(s.seed, 1)[0]
    meas_sd = np.sqrt([s.noise_var, PEND_MEAS_VAR_ANGLE])

    def measure(x, rng, k):
        if noiseless:
            return _gauss(x, 0.0)
        y = x[[0, 2]] + meas_sd * rng.standard_normal(2)
        kf.update(y)
        return kf.distribution()

    def after(u0, u1):
        if kf is not None:
            kf.predict(0.5 * (u0 + u1))

    rows = []
    X, ctrl = _closed_loop(s, lambda: MPCController(make, _config(s), s.dt), plant,
                           x0, None, measure, rng, rows, after)
    stats = dict(max_cart=float(X[0].max()), final_cart=float(X[0, -1]), final_angle=float(X[2, -1]),
                 mean_step_s=mean_step_time(ctrl.timings))
    meta = _meta(s, switch_time=PEND_SWITCH, target=PEND_TARGET, statistics=stats)
    t_roll = np.arange(s.steps + 1) * s.dt
    return _rows_to_log(rows, 1, s, t_roll, X[None], list(ctrl.timings), meta, stats)


RUNNERS = {"cstr": run_cstr, "chain": run_chain, "watertank": run_watertank, "pendulum": run_pendulum}


def run(s: Scenario) -> TrajectoryLog:
    return RUNNERS[s.problem](s)
