"""Benchmark probe problems and finite-difference gradient checks shared by the test files."""
from dataclasses import replace

import numpy as np

from smpc import transform as tr
from smpc.bench import problems as bp
from smpc.bench.runners import chain_measurement_var, chain_setup, tank_gp
from smpc.bench.scenario import DEFAULTS
from smpc.distributions import JointDistribution
from smpc.reformulate import attach_gp, build_mr_sampling, build_mr_taylor, build_sr
from smpc.solver import WarmStart, augmented_cost_and_gradient


def cstr(var=1e-4):
    x_des, u_des = bp.cstr_steady_state(0.125)
    return bp.cstr_problem(JointDistribution.gaussian([0.5, 0.1], var * np.eye(2)), x_des, u_des)


def pendulum(var=1e-4):
    # angular-rate variance in the oscillator's natural metric keeps the explicit covariance predictor PSD
    A, _ = bp.pend_linearization()
    scale = np.array([1.0, 1.0, 1.0, -A[3, 2]])
    return bp.pend_problem(JointDistribution.gaussian([0.1, 0.0, 0.05, 0.0], var * np.diag(scale)), 0.6)


def chain():
    cp, x_ref, x_start = chain_setup(2)
    base = bp.chain_problem(cp, JointDistribution.gaussian(x_start, np.diag(chain_measurement_var(cp, 1e-6))), x_ref)
    dfdx, dfdu = bp.chain_jacobians(cp)
    return replace(base, dfdx=dfdx, dfdu=dfdu)


def tank():
    model = tank_gp(10, 1e-3)
    base = bp.tank_problem(JointDistribution.gaussian([0.05, 0.4], 1e-4 * np.eye(2)), q_max=0.14)
    return attach_gp(base, model, outputs=(1,), inputs=(1,))


def _sym_dir(rng, S):
    n = S.shape[-1]
    A = 0.1 * rng.standard_normal(S.shape[:-2] + (n, n))
    return A @ S + S @ A.transpose(0, 2, 1) if S.ndim == 3 else A @ S + S @ A.T


def _random_state(dp, rng, K, mean_scale):
    """Probe states near ``x0``: perturbed samples (SR) or perturbed moments (MR)."""
    if not hasattr(dp, "unpack"):
        X = dp.x0[:, None] + 0.02 * mean_scale[:, None] * rng.standard_normal((dp.nx, K))
        dX = 0.02 * mean_scale[:, None] * rng.standard_normal((dp.nx, K))
        return X, dX
    n, q = dp.base_nx, dp.n_p
    mu0, S0, _ = dp.unpack(dp.x0[:, None])
    mu = mu0 + 0.02 * mean_scale[:n, None] * rng.standard_normal((n, K))
    B = rng.standard_normal((K, n, n)) * np.sqrt(np.diag(S0[0]))[None, :, None]
    S = S0 + 0.2 * B @ B.transpose(0, 2, 1)
    Sxp = 0.1 * rng.standard_normal((K, n, q)) * np.sqrt(np.diag(S0[0]))[None, :, None] \
        * np.sqrt(np.diag(dp.Sp))[None, None, :]
    dmu = 0.02 * mean_scale[:n, None] * rng.standard_normal((n, K))
    dS = _sym_dir(rng, S)
    dxp = 0.01 * Sxp
    return dp.pack(mu, S, Sxp), dp.pack(dmu, dS, dxp)


def _dd(fun, X, U, dX, dU, eps=1e-6):
    return (fun(X + eps * dX, U + eps * dU) - fun(X - eps * dX, U - eps * dU)) / (2 * eps)


def _close(an, fd):
    return abs(an - fd) <= 1e-4 * max(abs(an), abs(fd)) + 1e-13


def _gradient_failures(dp, rng, n_probes, mean_scale, u_scale):
    fails = []
    for k in range(n_probes):
        K = 2
        X, dX = _random_state(dp, rng, K, mean_scale)
        U = dp.u_min[:, None] + (dp.u_max - dp.u_min)[:, None] * rng.uniform(0.1, 0.9, (dp.nu, K))
        dU = u_scale * rng.standard_normal((dp.nu, K))
        L = rng.standard_normal((dp.nx, K))
        gx, gu = dp.f_vjp(X, U, L)
        checks = [("f", np.sum(gx * dX) + np.sum(gu * dU),
                   np.sum(L * _dd(dp.f, X, U, dX, dU)))]
        gx, gu = dp.l_grad(X, U)
        checks.append(("l", np.sum(gx * dX) + np.sum(gu * dU), np.sum(_dd(dp.l, X, U, dX, dU))))
        if dp.nh:
            N = rng.uniform(0, 1, (dp.nh, K))
            gx, gu = dp.h_vjp(X, U, N)
            checks.append(("h", np.sum(gx * dX) + np.sum(gu * dU), np.sum(N * _dd(dp.h, X, U, dX, dU))))
        x, dx = X[:, 0], dX[:, 0]
        g = dp.V_grad(x)
        checks.append(("V", g @ dx, (dp.V(x + 1e-6 * dx) - dp.V(x - 1e-6 * dx)) / 2e-6))
        if dp.nhT:
            nu = rng.uniform(0, 1, dp.nhT)
            g = dp.hT_vjp(x, nu)
            checks.append(("hT", g @ dx, nu @ (dp.hT(x + 1e-6 * dx) - dp.hT(x - 1e-6 * dx)) / 2e-6))
        fails += [(k, name, an, fd) for name, an, fd in checks if not _close(an, fd)]
    return fails


# name -> (constructor, input perturbation scale, seed)
PROBLEMS = {
    "cstr": (cstr, 5.0, 0),
    "chain": (chain, 0.1, 1),
    "watertank": (tank, 0.01, 2),
    "pendulum": (pendulum, 0.5, 3),
}


def builders(prob):
    out = [build_mr_taylor, lambda p: build_mr_sampling(p, tr.Unscented())]
    if prob.gp is None:
        out.append(lambda p: build_sr(p, tr.Unscented()))
    return out


def builder_gradient_failures(name, n_probes=100):
    """Directional FD checks of f, l, h, V, hT for every applicable builder."""
    make, u_scale, seed = PROBLEMS[name]
    prob = make()
    bs = builders(prob)
    rng = np.random.default_rng(seed)
    per = -(-n_probes // len(bs))
    fails = []
    for b in bs:
        dp = b(prob)
        scale = np.tile(np.abs(prob.x0.mean) + 0.1, dp.nx // prob.nx if not hasattr(dp, "unpack") else 1)
        fails += [(type(dp).__name__,) + f for f in _gradient_failures(dp, rng, per, scale, u_scale)]
    return fails


def solver_gradient_failures(name, n_probes=100):
    """Directional FD checks of the adjoint gradient of the augmented cost on the scenario grid."""
    make, _, seed = PROBLEMS[name]
    n_grid = DEFAULTS[name]["n_grid"]
    prob = make()
    bs = builders(prob)
    rng = np.random.default_rng(seed + 100)
    per = -(-n_probes // len(bs))
    fails = []
    for b in bs:
        dp = b(prob)
        span = (dp.u_max - dp.u_min)[:, None]
        for k in range(per):
            ws = WarmStart(np.zeros((dp.nu, n_grid)), rng.uniform(0, 1, (dp.nh, n_grid)), rng.uniform(0, 1, dp.nhT),
                           rng.uniform(1, 10, dp.nh), rng.uniform(1, 10, dp.nhT))
            U = dp.u_min[:, None] + span * rng.uniform(0.2, 0.8, (dp.nu, n_grid))
            d = span * rng.standard_normal((dp.nu, n_grid))
            _, G = augmented_cost_and_gradient(dp, U, ws)
            eps = 1e-6
            fd = (augmented_cost_and_gradient(dp, U + eps * d, ws)[0]
                  - augmented_cost_and_gradient(dp, U - eps * d, ws)[0]) / (2 * eps)
            an = float(np.sum(G * d))
            if not _close(an, fd):
                fails.append((type(dp).__name__, k, an, fd))
    return fails
