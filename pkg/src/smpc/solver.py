"""Augmented-Lagrangian projected-gradient solver and MPC stepping.

The control is piecewise linear on a uniform grid of ``N`` points over the
horizon.  The dynamics are integrated with Heun's method; the gradient of
the discretized augmented cost is obtained by the discrete adjoint of the
same Heun steps, so it is exact for the discretized problem.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import IndefiniteCovarianceError, IntegrationError, ParameterError


@dataclass(frozen=True)
class SolverConfig:
    n_grid: int = 20
    outer: int = 2
    inner: int = 2
    rho0: float = 1.0
    growth: float = 5.0
    rho_max: float = 1e8
    decrease: float = 0.9
    armijo: float = 1e-4
    contraction: float = 0.5
    max_halvings: int = 30
    tol: Optional[float] = None     # gradient-norm tolerance; None means fixed budget

    def __post_init__(self):
        if self.n_grid < 2:
            raise ParameterError("n_grid must be >= 2")
        if self.outer < 1 or self.inner < 1:
            raise ParameterError("iteration counts must be >= 1")
        if not self.rho0 > 0 or not self.growth > 1:
            raise ParameterError("need rho0 > 0 and growth > 1")
        if not 0 < self.contraction < 1:
            raise ParameterError("contraction must lie in (0, 1)")


@dataclass
class WarmStart:
    u: np.ndarray                 # (nu, N)
    lam: np.ndarray               # (nh, N)
    lamT: np.ndarray              # (nhT,)
    rho: np.ndarray               # (nh,)
    rhoT: np.ndarray              # (nhT,)
    step: Optional[float] = None


@dataclass
class SolveResult:
    t: np.ndarray
    u: np.ndarray
    x: np.ndarray
    cost: float
    augmented_cost: float
    h: np.ndarray
    hT: np.ndarray
    h_max: np.ndarray
    hT_max: np.ndarray
    warm: WarmStart
    stalled: bool = False
    iterations: int = 0
    history: list = field(default_factory=list)
    violation_history: list = field(default_factory=list)


def clamp(u, u_min, u_max):
    return np.minimum(np.maximum(u, u_min[:, None]), u_max[:, None])


class _Evaluator:
    """Forward simulation, augmented cost and its adjoint gradient for one problem."""

    def __init__(self, prob, n_grid):
        self.prob = prob
        self.N = n_grid
        self.dt = prob.T / (n_grid - 1)
        self.t = np.linspace(0.0, prob.T, n_grid)
        w = np.full(n_grid, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        self.w = w

    def forward(self, U, x0):
        prob, dt, N = self.prob, self.dt, self.N
        X = np.empty((x0.shape[0], N))
        Xh = np.empty((x0.shape[0], N - 1))
        X[:, 0] = x0
        x = x0[:, None]
        for k in range(N - 1):
            k1 = prob.f(x, U[:, k:k + 1])
            xh = x + dt * k1
            k2 = prob.f(xh, U[:, k + 1:k + 2])
            x = x + 0.5 * dt * (k1 + k2)
            X[:, k + 1] = x[:, 0]
            Xh[:, k] = xh[:, 0]
        bad = ~np.isfinite(X).all(axis=0)
        if bad.any():
            k = int(np.argmax(bad))
            raise IntegrationError(f"non-finite state at t={self.t[k]:.6g}", self.t[k])
        return X, Xh

    def cost(self, X, U, ws):
        prob = self.prob
        J = float(prob.l(X, U) @ self.w) + prob.V(X[:, -1])
        H = prob.h(X, U)
        HT = prob.hT(X[:, -1])
        JA = J
        if H.shape[0]:
            r = ws.rho[:, None]
            JA += float((((np.maximum(0.0, ws.lam + r * H) ** 2 - ws.lam ** 2) / (2.0 * r)) @ self.w).sum())
        if HT.shape[0]:
            JA += float(((np.maximum(0.0, ws.lamT + ws.rhoT * HT) ** 2 - ws.lamT ** 2) / (2.0 * ws.rhoT)).sum())
        return JA, J, H, HT

    def gradient(self, X, Xh, U, ws, H, HT):
        prob, dt, N = self.prob, self.dt, self.N
        gX, gU = prob.l_grad(X, U)
        gX = gX * self.w
        gU = gU * self.w
        gX[:, -1] += prob.V_grad(X[:, -1])
        if H.shape[0]:
            M = np.maximum(0.0, ws.lam + ws.rho[:, None] * H) * self.w
            a, b = prob.h_vjp(X, U, M)
            gX += a
            gU += b
        if HT.shape[0]:
            gX[:, -1] += prob.hT_vjp(X[:, -1], np.maximum(0.0, ws.lamT + ws.rhoT * HT))
        p = gX[:, -1:].copy()
        for k in range(N - 2, -1, -1):
            q2 = 0.5 * dt * p
            a2x, a2u = prob.f_vjp(Xh[:, k:k + 1], U[:, k + 1:k + 2], q2)
            q1 = q2 + dt * a2x
            a1x, a1u = prob.f_vjp(X[:, k:k + 1], U[:, k:k + 1], q1)
            gU[:, k + 1] += a2u[:, 0]
            gU[:, k] += a1u[:, 0]
            p = gX[:, k:k + 1] + p + a2x + a1x
        return gU


def integrate_forward(prob, U, x0=None, n_grid=None):
    """Heun integration of ``prob.f`` on the control grid; returns ``(t, X)``."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    ev = _Evaluator(prob, U.shape[1] if n_grid is None else n_grid)
    X, _ = ev.forward(U, prob.x0 if x0 is None else np.asarray(x0, dtype=float))
    return ev.t, X


def _default_warm(prob, N, rho0):
    u0 = clamp(np.zeros((prob.nu, 1)), prob.u_min, prob.u_max)
    return WarmStart(np.repeat(u0, N, axis=1), np.zeros((prob.nh, N)), np.zeros(prob.nhT),
                     np.full(prob.nh, rho0), np.full(prob.nhT, rho0))


def augmented_cost_and_gradient(prob, U, ws: WarmStart, n_grid=None):
    """``(J_A, dJ_A/dU)`` for the given multipliers; useful for verification."""
    ev = _Evaluator(prob, U.shape[1] if n_grid is None else n_grid)
    X, Xh = ev.forward(U, prob.x0)
    JA, _, H, HT = ev.cost(X, U, ws)
    return JA, ev.gradient(X, Xh, U, ws, H, HT)


def solve_ocp(prob, config: SolverConfig = SolverConfig(), warm: Optional[WarmStart] = None) -> SolveResult:
    """Run the augmented-Lagrangian loop with projected-gradient inner iterations."""
    N = config.n_grid
    ev = _Evaluator(prob, N)
    ws = _default_warm(prob, N, config.rho0) if warm is None else replace(
        warm, u=warm.u.copy(), lam=warm.lam.copy(), lamT=warm.lamT.copy(),
        rho=warm.rho.copy(), rhoT=warm.rhoT.copy())
    if ws.u.shape != (prob.nu, N):
        raise ParameterError(f"warm start has shape {ws.u.shape}, expected {(prob.nu, N)}")
    lo, hi = prob.u_min, prob.u_max
    U = clamp(ws.u, lo, hi)
    rng_u = np.maximum(hi - lo, 1e-12)
    rng_u = np.where(np.isfinite(rng_u), rng_u, 1.0)
    X, Xh = ev.forward(U, prob.x0)
    JA, J, H, HT = ev.cost(X, U, ws)
    stalled = False
    history = [JA]
    viol_hist = []
    prev_viol = _violation(H, HT)
    it = 0
    step = ws.step
    for outer in range(config.outer):
        G_prev = U_prev = None
        for inner in range(config.inner):
            it += 1
            G = ev.gradient(X, Xh, U, ws, H, HT)
            if config.tol is not None:
                pg = clamp(U - G, lo, hi) - U
                if np.max(np.abs(pg)) <= config.tol:
                    break
            if G_prev is not None:
                s = (U - U_prev).ravel()
                y = (G - G_prev).ravel()
                sy = s @ y
                if sy > 0:
                    step = (s @ s) / sy
            if step is None or not np.isfinite(step) or step <= 0:
                gmax = np.max(np.abs(G) / rng_u[:, None])
                step = 0.1 / gmax if gmax > 0 else 1.0
            accepted = False
            s_try = step
            for _ in range(config.max_halvings):
                Un = clamp(U - s_try * G, lo, hi)
                d = Un - U
                dd = float(np.sum(d * G))
                if not np.any(d):
                    break
                try:
                    Xn, Xhn = ev.forward(Un, prob.x0)
                    JAn, Jn, Hn, HTn = ev.cost(Xn, Un, ws)
                except (IntegrationError, IndefiniteCovarianceError):
                    # an ill-posed trial trajectory counts as a rejected step
                    s_try *= config.contraction
                    continue
                if JAn <= JA + config.armijo * dd:
                    accepted = True
                    break
                s_try *= config.contraction
            if not accepted:
                # a vanishing predicted decrease means the iterate is already optimal
                if np.any(d) and -dd > 1e-12 * (1.0 + abs(JA)):
                    stalled = True
                break
            G_prev, U_prev = G, U
            U, X, Xh, JA, J, H, HT = Un, Xn, Xhn, JAn, Jn, Hn, HTn
            step = s_try
            history.append(JA)
        # multiplier and penalty update
        if H.shape[0]:
            ws.lam = np.maximum(0.0, ws.lam + ws.rho[:, None] * H)
            hm = np.max(H, axis=1)
            grow = np.maximum(hm, 0.0) > config.decrease * np.maximum(prev_viol[0], 0.0)
            grow &= hm > 0
            ws.rho = np.where(grow, np.minimum(ws.rho * config.growth, config.rho_max), ws.rho)
        if HT.shape[0]:
            ws.lamT = np.maximum(0.0, ws.lamT + ws.rhoT * HT)
            grow = (HT > 0) & (HT > config.decrease * np.maximum(prev_viol[1], 0.0))
            ws.rhoT = np.where(grow, np.minimum(ws.rhoT * config.growth, config.rho_max), ws.rhoT)
        prev_viol = _violation(H, HT)
        viol_hist.append(max(float(np.max(prev_viol[0], initial=-np.inf)),
                             float(np.max(prev_viol[1], initial=-np.inf))))
        JA, J, H, HT = ev.cost(X, U, ws)
    ws.u = U
    ws.step = step
    return SolveResult(ev.t, U, X, J, JA, H, HT,
                       np.max(H, axis=1) if H.shape[0] else np.zeros(0),
                       HT.copy(), ws, stalled, it, history, viol_hist)


def _violation(H, HT):
    return (np.max(H, axis=1) if H.shape[0] else np.zeros(0)), HT.copy()


def shift_warm(warm: WarmStart, t, shift):
    """Shift a warm start by ``shift`` time units; values past the end are held."""
    ts = np.minimum(t + shift, t[-1])

    def sh(A):
        if A.size == 0:
            return A.copy()
        return np.stack([np.interp(ts, t, a) for a in A])

    return replace(warm, u=sh(warm.u), lam=sh(warm.lam))


class MPCController:
    """Receding-horizon controller.

    ``builder(x0_dist, step)`` returns the deterministic problem to solve at
    MPC step ``step`` for the current state distribution.
    """

    def __init__(self, builder: Callable, config: SolverConfig = SolverConfig(), dt: float = 1.0):
        self.builder = builder
        self.config = config
        self.dt = dt
        self.warm = None
        self.k = 0
        self.last = None
        self.timings = []

    def step(self, x0_dist):
        """Solve one OCP and return ``(u0, u_next)``: the first control and its FOH end value."""
        t0 = time.perf_counter_ns()
        prob = self.builder(x0_dist, self.k)
        res = solve_ocp(prob, self.config, self.warm)
        u0 = res.u[:, 0].copy()
        u1 = np.array([np.interp(self.dt, res.t, row) for row in res.u])
        self.warm = shift_warm(res.warm, res.t, self.dt)
        self.k += 1
        self.last = res
        self.timings.append(time.perf_counter_ns() - t0)
        return u0, u1


def mpc_step(controller: MPCController, x0_dist):
    """Functional form of :meth:`MPCController.step`; returns ``(u0, controller)``."""
    u0, _ = controller.step(x0_dist)
    return u0, controller
